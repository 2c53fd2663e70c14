"""Voxel lattice, multivariate CAR prior on log-hyperparameters, and ICM.

Each masked-in voxel carries a vector ``ell_v`` of three log-hyperparameters.
Given its first-order neighbours, the prior for ``ell_v`` is Gaussian with
mean ``sum_{v'} B0 ell_{v'}`` (``B0 = R / |N(v)|``) and diagonal covariance
``T0 = diag(t)``.  Iterated conditional modes replaces each ``ell_v`` in turn
by the maximizer of evidence + conditional prior, holding the neighbours fixed.
"""

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gp_core import LOG_2PI, HyperParams, KernelKind, evidence_function
from .errors import FactorizationFailure
from .optimize import OptimizerOptions, maximize
from .seeding import derive_rng

log = logging.getLogger(__name__)

# (+x, -x, +y, -y, +z, -z)
_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class Lattice:
    """A 3-D voxel grid with a boolean in-brain mask.

    Voxels are addressed either by ``(x, y, z)`` tuples or by their flat
    index ``x + nx * (y + ny * z)`` (x fastest, the on-disk order).  The
    masked-in voxels are also numbered ``0..n_masked-1`` in flat order;
    fields and neighbour tables use that compact numbering.
    """

    def __init__(self, dims, mask=None):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {dims}")
        self.dims = dims
        if mask is None:
            mask = np.ones(dims, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != dims:
            raise ValueError(f"mask shape {mask.shape} does not match dims {dims}")
        if not mask.any():
            raise ValueError("mask selects no voxels")
        self.mask = mask.copy()
        self.mask.setflags(write=False)
        flat_mask = self.mask.reshape(-1, order="F")
        self.flat_indices = np.flatnonzero(flat_mask)
        self._compact = np.full(flat_mask.size, -1, dtype=np.int64)
        self._compact[self.flat_indices] = np.arange(self.flat_indices.size)
        self._neighbor_table = self._build_neighbors()

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    @property
    def n_masked(self):
        return int(self.flat_indices.size)

    def __eq__(self, other):
        return (
            isinstance(other, Lattice)
            and self.dims == other.dims
            and np.array_equal(self.mask, other.mask)
        )

    def __hash__(self):
        return hash((self.dims, self.mask.tobytes()))

    def __repr__(self):
        return f"Lattice(dims={self.dims}, n_masked={self.n_masked})"

    def flat_index(self, xyz):
        x, y, z = xyz
        nx, ny, _ = self.dims
        return int(x) + nx * (int(y) + ny * int(z))

    def coords(self, flat):
        nx, ny, _ = self.dims
        flat = int(flat)
        return flat % nx, (flat // nx) % ny, flat // (nx * ny)

    def compact_index(self, voxel):
        """Compact (masked) index of a voxel given as a tuple or a flat index."""
        flat = self.flat_index(voxel) if isinstance(voxel, tuple) else int(voxel)
        c = int(self._compact[flat]) if 0 <= flat < self.n_voxels else -1
        if c < 0:
            raise ValueError(f"voxel {voxel} is not masked in")
        return c

    def _build_neighbors(self):
        table = []
        for flat in self.flat_indices:
            x, y, z = self.coords(flat)
            out = []
            for dx, dy, dz in _OFFSETS:
                u = (x + dx, y + dy, z + dz)
                if all(0 <= c < d for c, d in zip(u, self.dims)) and self.mask[u]:
                    out.append(int(self._compact[self.flat_index(u)]))
            table.append(np.array(out, dtype=np.int64))
        return table

    def neighbor_indices(self, c):
        """Neighbours of compact index ``c`` as compact indices."""
        return self._neighbor_table[c]

    def neighbor_counts(self):
        return np.array([t.size for t in self._neighbor_table])

    def to_volume(self, values, fill=np.nan):
        """Scatter per-masked-voxel values (length ``n_masked``) into a volume."""
        values = np.asarray(values)
        flat = np.full(self.n_voxels, fill, dtype=np.result_type(values.dtype, type(fill)))
        flat[self.flat_indices] = values
        return flat.reshape(self.dims, order="F")

    def from_volume(self, vol):
        """Gather masked-in values from a volume of shape ``dims``."""
        vol = np.asarray(vol)
        if vol.shape != self.dims:
            raise ValueError(f"volume shape {vol.shape} does not match lattice {self.dims}")
        return vol.reshape(-1, order="F")[self.flat_indices]


def neighbors(lattice, v):
    """Masked-in face neighbours of ``v`` in the order +x, -x, +y, -y, +z, -z.

    ``v`` may be an ``(x, y, z)`` tuple (neighbours returned as tuples) or a
    flat index (neighbours returned as flat indices).
    """
    c = lattice.compact_index(v)
    flats = lattice.flat_indices[lattice.neighbor_indices(c)]
    if isinstance(v, tuple):
        return [lattice.coords(f) for f in flats]
    return [int(f) for f in flats]


class CouplingMode(enum.Enum):
    DIAGONAL = "diagonal"
    FULL_ROW = "fullrow"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


@dataclass(frozen=True)
class CarConfig:
    """Parameters of the CAR prior and of the ICM schedule.

    ``rho`` are the coupling weights, ``t`` the conditional variances of the
    three log-hyperparameters.  ``DIAGONAL`` coupling averages each component
    over the same component of the neighbours; ``FULL_ROW`` uses a weight
    matrix whose row ``i`` is constant ``rho_i``, so every component's mean
    mixes all three neighbour components.
    """

    rho: tuple = (1.0, 1.0, 1.0)
    t: tuple = (0.5, 0.5, 0.5)
    coupling_mode: CouplingMode = CouplingMode.DIAGONAL
    sweeps: int = 5
    seed: int = 0
    schedule: str = "serial"

    def __post_init__(self):
        rho = tuple(float(r) for r in self.rho)
        t = tuple(float(v) for v in self.t)
        if len(rho) != 3 or len(t) != 3:
            raise ValueError("rho and t must have three components")
        if not all(math.isfinite(r) and abs(r) <= 1.0 for r in rho):
            raise ValueError(f"|rho_i| must be <= 1, got {rho}")
        if not all(math.isfinite(v) and v > 0 for v in t):
            raise ValueError(f"t_i must be positive, got {t}")
        if int(self.sweeps) < 0:
            raise ValueError("sweeps must be non-negative")
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")
        if self.schedule not in ("serial", "checkerboard"):
            raise ValueError("schedule must be 'serial' or 'checkerboard'")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "coupling_mode", CouplingMode.parse(self.coupling_mode))
        object.__setattr__(self, "sweeps", int(self.sweeps))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def weight_matrix(self):
        rho = np.array(self.rho)
        if self.coupling_mode is CouplingMode.DIAGONAL:
            return np.diag(rho)
        return np.repeat(rho[:, None], 3, axis=1)


def check_symmetry(lattice, cfg):
    """Warn when neighbour-count asymmetry breaks exact CAR symmetry.

    The joint CAR needs ``B_{v,v'} T0 = T0 B_{v',v}^T``; with
    ``B = R / |N(v)|`` this holds only where neighbouring voxels have equal
    neighbour counts (and, for full-row coupling, only if ``R T0`` is
    symmetric).  ICM only uses conditionals, so this is advisory.
    """
    counts = lattice.neighbor_counts()
    uneven = sum(
        1 for c in range(lattice.n_masked) for u in lattice.neighbor_indices(c) if counts[u] != counts[c]
    )
    RT = cfg.weight_matrix @ np.diag(cfg.t)
    problems = []
    if uneven:
        problems.append(f"{uneven // 2} neighbour pairs with unequal neighbour counts")
    if not np.allclose(RT, RT.T):
        problems.append("R T0 is not symmetric")
    if problems:
        warnings.warn("CAR prior is not jointly symmetric: " + "; ".join(problems), stacklevel=2)
    return not problems


class HyperField:
    """Per-voxel log-hyperparameters over the masked-in voxels of a lattice.

    ``values`` has shape ``(n_masked, 3)`` in compact order.
    """

    def __init__(self, lattice, values):
        values = np.array(values, dtype=float)
        if values.shape != (lattice.n_masked, 3):
            raise ValueError(f"values must have shape ({lattice.n_masked}, 3), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        self.lattice = lattice
        self.values = values

    @classmethod
    def constant(cls, lattice, params=None):
        params = params or HyperParams()
        return cls(lattice, np.tile(params.as_array(), (lattice.n_masked, 1)))

    def copy(self):
        return HyperField(self.lattice, self.values.copy())

    def __getitem__(self, v):
        return HyperParams.from_array(self.values[self.lattice.compact_index(v)])

    def component_volume(self, i):
        return self.lattice.to_volume(self.values[:, i])

    def __eq__(self, other):
        return (
            isinstance(other, HyperField)
            and self.lattice == other.lattice
            and np.array_equal(self.values, other.values)
        )


def _conditional_mean(values, nbrs, R):
    if nbrs.size == 0:
        return np.zeros(3)
    return R @ values[nbrs].mean(axis=0)


def car_conditional_mean(field, cfg, v):
    """Prior mean of ``ell_v`` given its neighbours (zero when isolated)."""
    c = field.lattice.compact_index(v)
    return _conditional_mean(field.values, field.lattice.neighbor_indices(c), cfg.weight_matrix)


def _car_logpdf(ell, mean, t):
    diff = ell - mean
    return -0.5 * (3 * LOG_2PI + float(np.sum(np.log(t))) + float(np.sum(diff * diff / t)))


def car_log_density(field, cfg, v, ell=None):
    """Log conditional prior density of ``ell_v`` (the field's value unless given)."""
    c = field.lattice.compact_index(v)
    ell = field.values[c] if ell is None else np.asarray(ell, dtype=float)
    mean = _conditional_mean(field.values, field.lattice.neighbor_indices(c), cfg.weight_matrix)
    return _car_logpdf(ell, mean, np.array(cfg.t))


def local_objective(v, data_v, kind, field, cfg, ell=None, jitter=1e-10):
    """Evidence plus conditional prior at voxel ``v``: the quantity ICM maximizes."""
    c = field.lattice.compact_index(v)
    ell = field.values[c] if ell is None else np.asarray(ell, dtype=float)
    lml, _ = evidence_function(kind, data_v, jitter)(ell, want_grad=False)
    return lml + car_log_density(field, cfg, v, ell)


@dataclass
class UpdateOutcome:
    params: HyperParams
    before: float
    after: float
    status: str  # "accepted", "unchanged", "stall" or "failed"


def _icm_step(c, evidence, field, cfg, opts, R, t):
    values = field.values
    current = values[c].copy()
    mean = _conditional_mean(values, field.lattice.neighbor_indices(c), R)
    tinv = 1.0 / t

    def objective(ell):
        lml, g = evidence(ell)
        diff = ell - mean
        prior = -0.5 * (3 * LOG_2PI + float(np.sum(np.log(t))) + float(np.sum(diff * diff * tinv)))
        return lml + prior, g - diff * tinv

    try:
        before = objective(current)[0]
    except FactorizationFailure:
        before = -math.inf
    try:
        res = maximize(objective, current, opts)
    except FactorizationFailure:
        return current, before, before, "failed"
    if res.status == "stall":
        return current, before, before, "stall"
    if res.fun > before:
        return res.x, before, res.fun, "accepted"
    return current, before, before, "unchanged"


def icm_update(v, data_v, kind, field, cfg, opts=None):
    """Maximize evidence + CAR conditional at ``v`` starting from the current value.

    The field is not modified; the caller writes the returned value back.
    The returned value never has a lower local objective than the current one;
    a stalled or failed optimization leaves the current value in place.
    """
    opts = opts or OptimizerOptions()
    kind = KernelKind.parse(kind)
    c = field.lattice.compact_index(v)
    x, before, after, status = _icm_step(
        c, evidence_function(kind, data_v, opts.jitter), field, cfg, opts,
        cfg.weight_matrix, np.array(cfg.t),
    )
    return UpdateOutcome(HyperParams.from_array(x), before, after, status)


@dataclass
class IcmReport:
    updates: int = 0
    accepted: int = 0
    unchanged: int = 0
    stalled: int = 0
    failed: int = 0
    sweep_objective: list = field(default_factory=list)

    def as_dict(self):
        return {
            "updates": self.updates,
            "accepted": self.accepted,
            "unchanged": self.unchanged,
            "stalled": self.stalled,
            "failed": self.failed,
        }


def pseudo_objective(field, evidences, cfg):
    """Sum over voxels of evidence + conditional prior (tracked, not guaranteed monotone)."""
    R = cfg.weight_matrix
    t = np.array(cfg.t)
    total = 0.0
    for c in range(field.lattice.n_masked):
        mean = _conditional_mean(field.values, field.lattice.neighbor_indices(c), R)
        try:
            lml = evidences[c](field.values[c], want_grad=False)[0]
        except FactorizationFailure:
            return -math.inf
        total += lml + _car_logpdf(field.values[c], mean, t)
    return total


def visit_order(lattice, cfg, sweep, rng):
    """Voxel visiting order for one sweep (compact indices)."""
    perm = rng.permutation(lattice.n_masked)
    if cfg.schedule == "serial":
        return perm
    # same-colour voxels share no first-order neighbours
    colour = np.array([sum(lattice.coords(f)) % 2 for f in lattice.flat_indices])
    return np.concatenate([perm[colour[perm] == 0], perm[colour[perm] == 1]])


def run_icm(datasets, kind, cfg, init, opts=None, on_update=None, report=None, frozen=None):
    """Run ``cfg.sweeps`` ICM sweeps from ``init`` and return the new field.

    Parameters
    ----------
    datasets : sequence of GpDataset
        One per masked-in voxel, in compact order.
    on_update : callable, optional
        Called as ``on_update(c, before_field, outcome)`` after each update,
        before the new value is written; used for instrumentation.
    report : IcmReport, optional
        Filled with update counts and the pseudo-objective after each sweep.
    frozen : array of bool, optional
        Voxels (compact order) that keep their initial value.
    """
    opts = opts or OptimizerOptions()
    kind = KernelKind.parse(kind)
    field_ = init.copy()
    if cfg.sweeps == 0:
        return field_
    if len(datasets) != field_.lattice.n_masked:
        raise ValueError("need one dataset per masked-in voxel")
    report = report if report is not None else IcmReport()
    evidences = [evidence_function(kind, d, opts.jitter) for d in datasets]
    R = cfg.weight_matrix
    t = np.array(cfg.t)
    rng = derive_rng(cfg.seed, "icm")
    for sweep in range(cfg.sweeps):
        for c in visit_order(field_.lattice, cfg, sweep, rng):
            c = int(c)
            if frozen is not None and frozen[c]:
                continue
            x, before, after, status = _icm_step(c, evidences[c], field_, cfg, opts, R, t)
            report.updates += 1
            if status == "accepted":
                report.accepted += 1
            elif status == "stall":
                report.stalled += 1
            elif status == "failed":
                report.failed += 1
            else:
                report.unchanged += 1
            if on_update is not None:
                on_update(c, field_, UpdateOutcome(HyperParams.from_array(x), before, after, status))
            field_.values[c] = x
        report.sweep_objective.append(pseudo_objective(field_, evidences, cfg))
        log.debug("ICM sweep %d: pseudo-objective %.6f", sweep + 1, report.sweep_objective[-1])
    return field_
