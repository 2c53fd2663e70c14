"""Whole-volume fitting, prediction and kernel comparison.

A volume model is one GP per masked-in voxel, all sharing the same subject
scores as inputs, with the per-voxel log-hyperparameters tied together by
the CAR prior.  Scores are mapped affinely onto ``[0, 1]`` before fitting.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DatasetError, FactorizationFailure, MaskMismatch
from .gp_core import (
    GpDataset,
    HyperParams,
    KernelKind,
    is_degenerate,
    log_marginal_likelihood,
    optimize_voxel,
    predict,
)
from .optimize import OptimizerOptions
from .spatial_field import CarConfig, HyperField, IcmReport, run_icm

log = logging.getLogger(__name__)

EMPIRICAL = "empirical"


@dataclass(frozen=True)
class ScoreMap:
    """Affine map from the raw score range ``[lo, hi]`` onto ``[0, 1]``."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
            raise ValueError(f"score range must satisfy lo < hi, got [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def normalize(self, raw):
        return (np.asarray(raw, dtype=float) - self.lo) / (self.hi - self.lo)

    def denormalize(self, unit):
        return self.lo + np.asarray(unit, dtype=float) * (self.hi - self.lo)

    def contains(self, raw):
        raw = np.asarray(raw, dtype=float)
        return bool(np.all((raw >= self.lo) & (raw <= self.hi)))


class VolumeDataset:
    """Per-subject z-volumes on a shared lattice, with raw behavioural scores.

    Parameters
    ----------
    lattice : Lattice
    scores : array_like, shape (N,)
        Raw-scale scores (e.g. MMSE), one per subject.
    zvols : array_like, shape (N, nx, ny, nz)
        Per-subject z-volumes; values outside the mask are ignored.
    score_map : ScoreMap, optional
        Declared raw range.  Defaults to the observed score range.
    """

    def __init__(self, lattice, scores, zvols, score_map=None):
        scores = np.array(scores, dtype=float).reshape(-1)
        zvols = np.array(zvols, dtype=float)
        if scores.size < 2:
            raise DatasetError(f"need at least 2 subjects, got {scores.size}")
        if zvols.shape != (scores.size,) + lattice.dims:
            raise DatasetError(
                f"z-volumes have shape {zvols.shape}, expected {(scores.size,) + lattice.dims}"
            )
        if not np.all(np.isfinite(scores)):
            raise DatasetError("scores must be finite")
        if score_map is None:
            if np.ptp(scores) == 0:
                raise DatasetError("cannot infer a score range from identical scores")
            score_map = ScoreMap(scores.min(), scores.max())
        if not score_map.contains(scores):
            raise DatasetError(f"scores fall outside the declared range [{score_map.lo}, {score_map.hi}]")
        targets = np.stack([lattice.from_volume(z) for z in zvols], axis=1)
        if not np.all(np.isfinite(targets)):
            raise DatasetError("non-finite z-score inside the mask")
        self.lattice = lattice
        self.scores = scores
        self.zvols = zvols
        self.score_map = score_map
        self._targets = targets

    @property
    def n_subjects(self):
        return self.scores.size

    @property
    def inputs(self):
        """Normalized scores used as GP inputs."""
        return self.score_map.normalize(self.scores)

    def voxel_targets(self):
        """Array of shape ``(n_masked, N)``: each masked voxel's z-scores."""
        return self._targets

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return VolumeDataset(self.lattice, self.scores[indices], self.zvols[indices], self.score_map)

    def with_scores(self, scores):
        return VolumeDataset(self.lattice, scores, self.zvols, self.score_map)

    def voxel_datasets(self, mean=0.0):
        """One :class:`GpDataset` per masked voxel.

        ``mean`` is a constant prior mean, or ``"empirical"`` to use each
        voxel's sample mean of its targets.
        """
        x = self.inputs
        out = []
        for y in self._targets:
            m = float(np.mean(y)) if mean == EMPIRICAL else float(mean)
            out.append(GpDataset(x, y, m))
        return out


def _check_mean(mean):
    if mean == EMPIRICAL:
        return mean
    mean = float(mean)
    if not math.isfinite(mean):
        raise ValueError("prior mean must be finite")
    return mean


@dataclass
class FitReport:
    lml: np.ndarray  # per masked voxel, compact order
    status: list
    init_failures: int = 0
    degenerate: int = 0
    icm: IcmReport = field(default_factory=IcmReport)
    score_map: ScoreMap = None

    @property
    def failure_count(self):
        return self.init_failures + self.icm.failed + self.icm.stalled


@dataclass
class FittedVolumeModel:
    kind: KernelKind
    field: HyperField
    cfg: CarConfig
    dataset: VolumeDataset
    report: FitReport
    mean: object = 0.0
    opts: OptimizerOptions = field(default_factory=OptimizerOptions)

    @property
    def lattice(self):
        return self.dataset.lattice


@dataclass
class PredictionVolume:
    query_score: float
    mean_vol: np.ndarray
    var_vol: np.ndarray
    extrapolated: bool = False


@dataclass
class ModelComparisonMap:
    """Per-voxel comparison of model ``a`` against model ``b``.

    ``p_linear_vol`` is the posterior probability of model ``b`` (the linear
    model in the standard SE-versus-linear comparison).
    """

    log_bf_vol: np.ndarray
    p_linear_vol: np.ndarray
    total_a: float
    total_b: float
    n_voxels: int

    @property
    def total_log_diff(self):
        return self.total_a - self.total_b

    @property
    def per_voxel_log_diff(self):
        """Mean per-voxel log-evidence difference in nats (not an odds ratio)."""
        return self.total_log_diff / self.n_voxels

    @property
    def per_voxel_odds(self):
        """``exp`` of :attr:`per_voxel_log_diff`: the per-voxel evidence ratio."""
        return math.exp(self.per_voxel_log_diff)


def scaled_start(data):
    """Second starting point scaled to the voxel's residual spread.

    From ``ell = 0`` alone, strong but nonmonotone profiles often converge to
    the all-noise optimum (output scale driven to zero).
    """
    spread = max(float(np.std(data.residuals())), 1e-3)
    return HyperParams(math.log(0.3), math.log(spread), math.log(0.25 * spread))


def initialize_fits(dataset, kind, opts=None, mean=0.0, multistart=True):
    """Independent maximum-evidence fits at every masked voxel.

    Every voxel starts from ``ell = 0``; with ``multistart`` a second fit
    from :func:`scaled_start` is also run and the higher evidence kept.
    """
    kind = KernelKind.parse(kind)
    opts = opts or OptimizerOptions()
    mean = _check_mean(mean)
    start = HyperParams()
    fits = []
    for c, data in enumerate(dataset.voxel_datasets(mean)):
        fit = optimize_voxel(kind, data, start, opts)
        if multistart and fit.status != "degenerate":
            alt = optimize_voxel(kind, data, scaled_start(data), opts)
            if alt.status != "failed" and (fit.status == "failed" or alt.lml > fit.lml):
                fit = alt
        if fit.status == "failed":
            log.warning("voxel %d: initial fit failed, using default start", c)
        elif fit.status == "degenerate":
            log.info("voxel %d: degenerate data, noise floored", c)
        fits.append(fit)
    return fits


def initialize_field(dataset, kind, opts=None, mean=0.0, multistart=True):
    fits = initialize_fits(dataset, kind, opts, mean, multistart)
    return HyperField(dataset.lattice, np.array([f.params.as_array() for f in fits]))


def _voxel_lml(kind, field_, datasets, jitter):
    out = np.empty(len(datasets))
    for c, data in enumerate(datasets):
        try:
            out[c] = log_marginal_likelihood(kind, field_.values[c], data, jitter)
        except FactorizationFailure:
            out[c] = np.nan
    return out


def fit_volume(dataset, kind, cfg=None, opts=None, mean=0.0, on_update=None, multistart=True):
    """Independent initialization followed by ``cfg.sweeps`` ICM sweeps.

    Voxels whose targets are constant are held at their fallback values and
    skipped by ICM; they still act as neighbours.
    """
    kind = KernelKind.parse(kind)
    cfg = cfg or CarConfig()
    opts = opts or OptimizerOptions()
    mean = _check_mean(mean)
    datasets = dataset.voxel_datasets(mean)
    fits = initialize_fits(dataset, kind, opts, mean, multistart)
    init = HyperField(dataset.lattice, np.array([f.params.as_array() for f in fits]))
    frozen = np.array([f.status == "degenerate" for f in fits])
    icm_report = IcmReport()
    field_ = run_icm(datasets, kind, cfg, init, opts, on_update=on_update,
                     report=icm_report, frozen=frozen)
    lml = _voxel_lml(kind, field_, datasets, opts.jitter)
    status = []
    for f, value in zip(fits, lml):
        if f.status in ("degenerate", "failed"):
            status.append(f.status)
        elif not np.isfinite(value):
            status.append("failed")
        else:
            status.append("ok")
    report = FitReport(
        lml=lml,
        status=status,
        init_failures=sum(f.status == "failed" for f in fits),
        degenerate=int(frozen.sum()),
        icm=icm_report,
        score_map=dataset.score_map,
    )
    return FittedVolumeModel(kind, field_, cfg, dataset, report, mean, opts)


def model_from_field(dataset, kind, field_, cfg=None, opts=None, mean=0.0):
    """Wrap an already-fitted field (e.g. read from disk) as a model."""
    kind = KernelKind.parse(kind)
    opts = opts or OptimizerOptions()
    mean = _check_mean(mean)
    if field_.lattice != dataset.lattice:
        raise MaskMismatch("field and dataset lattices differ")
    datasets = dataset.voxel_datasets(mean)
    lml = _voxel_lml(kind, field_, datasets, opts.jitter)
    status = ["degenerate" if is_degenerate(d) else ("ok" if np.isfinite(v) else "failed")
              for d, v in zip(datasets, lml)]
    report = FitReport(lml=lml, status=status, degenerate=status.count("degenerate"),
                       score_map=dataset.score_map)
    return FittedVolumeModel(kind, field_, cfg or CarConfig(), dataset, report, mean, opts)


def predict_volume(model, x_star_raw, include_noise=False):
    """Predictive mean and variance volumes at a raw-scale query score.

    Masked-out voxels hold NaN.  Voxels with constant training targets
    predict that constant, with only the noise variance (when requested).
    """
    x_star_raw = float(x_star_raw)
    smap = model.dataset.score_map
    extrapolated = not smap.contains(x_star_raw)
    if extrapolated:
        warnings.warn(f"query score {x_star_raw} lies outside [{smap.lo}, {smap.hi}]", stacklevel=2)
    x_star = float(smap.normalize(x_star_raw))
    n = model.lattice.n_masked
    means = np.empty(n)
    variances = np.empty(n)
    for c, data in enumerate(model.dataset.voxel_datasets(model.mean)):
        theta = model.field.values[c]
        if is_degenerate(data):
            means[c] = data.targets[0]
            variances[c] = math.exp(2.0 * theta[2]) if include_noise else 0.0
            continue
        pg = predict(model.kind, theta, data, x_star, include_noise, model.opts.jitter)
        means[c] = pg.mean
        variances[c] = pg.variance
    lat = model.lattice
    return PredictionVolume(x_star_raw, lat.to_volume(means), lat.to_volume(variances), extrapolated)


def total_evidence(model, region=None):
    """Sum of per-voxel log evidences with the field at its fitted value.

    ``region`` optionally restricts the sum to a boolean volume.
    """
    lml = model.report.lml
    if region is not None:
        keep = model.lattice.from_volume(np.asarray(region, dtype=bool))
        lml = lml[keep]
    return float(np.sum(lml))


def compare_models(model_a, model_b, prior_log_odds=0.0):
    """Per-voxel log Bayes factor of ``a`` over ``b`` and posterior of ``b``.

    ``prior_log_odds`` is ``log p(a) - log p(b)``; zero means equal priors.
    """
    if model_a.lattice != model_b.lattice:
        raise MaskMismatch("models were fitted on different lattices or masks")
    if not np.array_equal(model_a.dataset.scores, model_b.dataset.scores):
        raise MaskMismatch("models were fitted on different subjects")
    log_bf = model_a.report.lml - model_b.report.lml
    p_b = expit(-(log_bf + prior_log_odds))
    lat = model_a.lattice
    return ModelComparisonMap(
        log_bf_vol=lat.to_volume(log_bf),
        p_linear_vol=lat.to_volume(p_b),
        total_a=total_evidence(model_a),
        total_b=total_evidence(model_b),
        n_voxels=lat.n_masked,
    )
