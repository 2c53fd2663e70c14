"""Synthetic block-design population with score-dependent activation.

Each subject gets a baseline of Gaussian noise (white or AR(1)) on a small
patch, linearly detrended per run and standardized, to which a periodic
on/off reference function is added in two regions.  Region A's amplitude
grows with the subject's normalized score and region B's shrinks, so the
z-maps cross-fade from B to A across the population.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import ZeroVariance
from .seeding import derive_rng
from .spatial_field import Lattice
from .volume_model import ScoreMap, VolumeDataset

PERIOD = 48
OFF_LEAD = 12
ON_LENGTH = 24

PROFILES = ("crossfade", "nonmonotone")
NOISE_MODELS = ("white", "ar1")


def rect_region(x_range, y_range, z=0):
    """Voxel tuples of the half-open rectangle ``x_range`` x ``y_range`` in slice ``z``."""
    return tuple((x, y, z) for y in range(*y_range) for x in range(*x_range))


DEFAULT_REGION_A = rect_region((2, 6), (4, 10))
DEFAULT_REGION_B = rect_region((6, 10), (14, 20))


@dataclass(frozen=True)
class PhantomConfig:
    """Settings for :func:`generate_population`.

    ``profile="crossfade"`` weights region A by ``alpha`` and region B by
    ``1 - alpha``.  ``profile="nonmonotone"`` uses ``sin(pi alpha)`` for A
    (peaking mid-range) and ``|cos(pi alpha)|`` for B (high at both ends).
    """

    dims: tuple = (12, 24, 1)
    n_runs: int = 8
    run_length: int = 48
    scores: tuple = (0.0, 0.1, 0.3, 0.7, 0.8, 0.9, 1.0)
    m_fraction: float = 1.0
    region_a: tuple = DEFAULT_REGION_A
    region_b: tuple = DEFAULT_REGION_B
    noise_model: str = "ar1"
    ar_phi: float = 0.3
    profile: str = "crossfade"
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        object.__setattr__(self, "region_a", tuple(tuple(int(i) for i in v) for v in self.region_a))
        object.__setattr__(self, "region_b", tuple(tuple(int(i) for i in v) for v in self.region_b))
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {dims}")
        if self.run_length % PERIOD or self.run_length < PERIOD:
            raise ValueError(f"run_length must be a positive multiple of {PERIOD}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be positive")
        if not all(0.0 <= s <= 1.0 for s in self.scores):
            raise ValueError("scores must lie in [0, 1]")
        a, b = set(self.region_a), set(self.region_b)
        if a & b:
            raise ValueError("regions A and B overlap")
        for v in a | b:
            if len(v) != 3 or not all(0 <= c < d for c, d in zip(v, dims)):
                raise ValueError(f"region voxel {v} outside dims {dims}")
        if self.noise_model not in NOISE_MODELS:
            raise ValueError(f"noise_model must be one of {NOISE_MODELS}")
        if not -1.0 < self.ar_phi < 1.0:
            raise ValueError("ar_phi must lie in (-1, 1)")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        if self.m_fraction < 0:
            raise ValueError("m_fraction must be non-negative")

    @property
    def n_timepoints(self):
        return self.n_runs * self.run_length

    def label_volume(self):
        """0 = background, 1 = region A, 2 = region B."""
        labels = np.zeros(self.dims, dtype=np.int8)
        for v in self.region_a:
            labels[v] = 1
        for v in self.region_b:
            labels[v] = 2
        return labels


@dataclass
class SubjectSeries:
    series: np.ndarray  # (nx, ny, nz, T)
    alpha: float
    sigma: np.ndarray  # per-voxel sd of the standardized baseline


def reference_function(t):
    """On/off block regressor: 12 off, 24 on, 12 off, repeating every 48 samples."""
    phase = np.asarray(t) % PERIOD
    out = ((phase >= OFF_LEAD) & (phase < OFF_LEAD + ON_LENGTH)).astype(int)
    return int(out) if out.ndim == 0 else out


def _line_basis(n):
    return np.column_stack([np.ones(n), np.arange(n, dtype=float)])


def detrend_run(series):
    """Residuals from a least-squares intercept + slope fit along the last axis."""
    series = np.asarray(series, dtype=float)
    n = series.shape[-1]
    if n < 3:
        raise ValueError("run length must be at least 3")
    X = _line_basis(n)
    coef, *_ = np.linalg.lstsq(X, series.reshape(-1, n).T, rcond=None)
    resid = series.reshape(-1, n) - (X @ coef).T
    return resid.reshape(series.shape)


def detrend_runs(series, run_length):
    """Detrend each run of ``run_length`` samples separately."""
    series = np.asarray(series, dtype=float)
    n = series.shape[-1]
    pieces = [detrend_run(series[..., i:i + run_length]) for i in range(0, n, run_length)]
    return np.concatenate(pieces, axis=-1)


def standardize(series):
    """Scale to unit sample variance (``ddof=1``) along the last axis."""
    series = np.asarray(series, dtype=float)
    sd = series.std(axis=-1, ddof=1, keepdims=True)
    if np.any(sd == 0):
        raise ZeroVariance("cannot standardize a zero-variance series")
    return series / sd


def profile_weights(alpha, profile="crossfade"):
    """Activation weights ``(w_A, w_B)`` for a subject with normalized score ``alpha``."""
    if profile == "crossfade":
        return alpha, 1.0 - alpha
    if profile == "nonmonotone":
        return math.sin(math.pi * alpha), abs(math.cos(math.pi * alpha))
    raise ValueError(f"unknown profile {profile!r}")


def effective_beta(alpha, v, cfg, sigma_v):
    """Signal amplitude added at voxel ``v`` for score ``alpha``.

    ``beta_v = m * sigma_v``; region A contributes ``w_A(alpha) beta_v`` and
    region B ``w_B(alpha) beta_v``; elsewhere zero.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    v = tuple(v)
    beta_v = cfg.m_fraction * sigma_v
    w_a, w_b = profile_weights(alpha, cfg.profile)
    in_a = v in set(cfg.region_a)
    in_b = v in set(cfg.region_b)
    return w_a * in_a * beta_v + w_b * in_b * beta_v


def _baseline(cfg, rng):
    shape = cfg.dims + (cfg.n_runs, cfg.run_length)
    white = rng.standard_normal(shape)
    if cfg.noise_model == "white":
        return white.reshape(cfg.dims + (cfg.n_timepoints,))
    phi = cfg.ar_phi
    # stationary AR(1) per run: scale innovations, draw the first sample from the marginal
    innov = white * math.sqrt(1.0 - phi * phi)
    innov[..., 0] = white[..., 0]
    noise = lfilter([1.0], [1.0, -phi], innov, axis=-1)
    return noise.reshape(cfg.dims + (cfg.n_timepoints,))


def generate_subject(cfg, alpha, rng):
    """Baseline, per-run detrend, standardize, then add the weighted reference."""
    base = standardize(detrend_runs(_baseline(cfg, rng), cfg.run_length))
    sigma = base.std(axis=-1, ddof=1)
    ref = reference_function(np.arange(cfg.n_timepoints))
    w_a, w_b = profile_weights(alpha, cfg.profile)
    amp = np.zeros(cfg.dims)
    for v in cfg.region_a:
        amp[v] += w_a * cfg.m_fraction * sigma[v]
    for v in cfg.region_b:
        amp[v] += w_b * cfg.m_fraction * sigma[v]
    return SubjectSeries(base + amp[..., None] * ref, float(alpha), sigma)


def glm_zscores(subject, cfg):
    """Per-voxel OLS of the series on ``[1, reference]``; returns ``beta / se(beta)``."""
    T = subject.series.shape[-1]
    X = np.column_stack([np.ones(T), reference_function(np.arange(T))]).astype(float)
    XtX_inv = np.linalg.inv(X.T @ X)
    Y = subject.series.reshape(-1, T).T
    coef = XtX_inv @ X.T @ Y
    resid = Y - X @ coef
    s2 = np.sum(resid * resid, axis=0) / (T - X.shape[1])
    se = np.sqrt(s2 * XtX_inv[1, 1])
    return (coef[1] / se).reshape(subject.series.shape[:-1])


def generate_population(cfg):
    """One GLM z-volume per score in ``cfg.scores`` on a fully masked patch."""
    zvols = []
    for i, alpha in enumerate(cfg.scores):
        subject = generate_subject(cfg, alpha, derive_rng(cfg.seed, "phantom-subject", i))
        zvols.append(glm_zscores(subject, cfg))
    return VolumeDataset(Lattice(cfg.dims), cfg.scores, np.stack(zvols), ScoreMap(0.0, 1.0))
