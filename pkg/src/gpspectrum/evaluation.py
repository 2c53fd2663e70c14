"""Leave-one-out cross-validation against disease-stage binning."""

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GpSpectrumError, SubjectMismatch, UncoveredScore
from .gp_core import LOG_2PI
from .volume_model import fit_volume, predict_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BinningRule:
    """Piecewise-constant map from raw scores to group representatives.

    ``segments`` is an ordered sequence of ``(upper_bound, representative)``
    pairs; a score goes to the first segment whose inclusive upper bound it
    does not exceed.  Scores above the last bound are passed through
    unchanged when ``passthrough`` is set and rejected otherwise.
    """

    segments: tuple
    passthrough: bool = False

    def __post_init__(self):
        segs = tuple((float(u), float(r)) for u, r in self.segments)
        if not segs:
            raise ValueError("a binning rule needs at least one segment")
        bounds = [u for u, _ in segs]
        if any(b >= c for b, c in zip(bounds, bounds[1:])):
            raise ValueError(f"segment bounds must be strictly increasing, got {bounds}")
        object.__setattr__(self, "segments", segs)
        if not self.is_equidistant():
            warnings.warn(
                f"representatives {self.representatives} are not equidistant", stacklevel=3
            )

    @classmethod
    def mmse_three_stage(cls):
        """<=26 -> 24 (AD), 27-29 -> 27, 30 -> 30 (controls)."""
        return cls(((26.0, 24.0), (29.0, 27.0), (30.0, 30.0)))

    @property
    def representatives(self):
        return tuple(r for _, r in self.segments)

    def is_equidistant(self, rtol=1e-9):
        reps = np.array(self.representatives)
        if reps.size < 3:
            return True
        gaps = np.diff(reps)
        return bool(np.allclose(gaps, gaps[0], rtol=rtol, atol=1e-12))

    def representative(self, score):
        for upper, rep in self.segments:
            if score <= upper:
                return rep
        if self.passthrough:
            return float(score)
        raise UncoveredScore(f"score {score} exceeds every bound of the binning rule")


def apply_binning(scores, rule):
    """Replace each score by its group representative."""
    return np.array([rule.representative(float(s)) for s in np.asarray(scores, dtype=float)])


@dataclass
class CvReport:
    model: str
    subjects: np.ndarray
    scores: np.ndarray
    representatives: np.ndarray
    distances: np.ndarray
    pred_logdensity: np.ndarray  # NaN for failed folds
    failed: tuple = ()

    @property
    def overall_mean(self):
        ok = np.isfinite(self.pred_logdensity)
        return float(np.mean(self.pred_logdensity[ok])) if ok.any() else float("nan")

    def rows(self):
        for i in range(self.subjects.size):
            yield (int(self.subjects[i]), float(self.scores[i]), float(self.representatives[i]),
                   float(self.distances[i]), float(self.pred_logdensity[i]), self.model)


def heldout_logdensity(model, score, zvol):
    """Mean over masked voxels of the noise-inclusive predictive log density of ``zvol``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pred = predict_volume(model, score, include_noise=True)
    lat = model.lattice
    mu = lat.from_volume(pred.mean_vol)
    var = lat.from_volume(pred.var_vol)
    z = lat.from_volume(zvol)
    logpdf = -0.5 * (LOG_2PI + np.log(var) + (z - mu) ** 2 / var)
    return float(np.mean(logpdf))


def loo_cv(dataset, kind, cfg=None, binning=None, opts=None, mean=0.0, label=None):
    """Leave-one-subject-out predictive log density.

    Each fold is fitted on the other subjects (with their scores replaced by
    group representatives when ``binning`` is given) and scored at the
    held-out subject's own raw score.
    """
    n = dataset.n_subjects
    if n < 3:
        raise ValueError("leave-one-out needs at least 3 subjects")
    if binning is not None:
        reps = apply_binning(dataset.scores, binning)
        if not dataset.score_map.contains(reps):
            raise ValueError("binning representatives fall outside the declared score range")
    else:
        reps = dataset.scores.copy()
    label = label or ("binned" if binning is not None else "continuous")
    dens = np.full(n, np.nan)
    failed = []
    for i in range(n):
        keep = np.delete(np.arange(n), i)
        train = dataset.subset(keep).with_scores(reps[keep])
        try:
            model = fit_volume(train, kind, cfg, opts, mean)
            dens[i] = heldout_logdensity(model, dataset.scores[i], dataset.zvols[i])
        except (GpSpectrumError, ValueError, ArithmeticError) as exc:
            log.warning("fold %d failed: %s", i, exc)
            failed.append(i)
    return CvReport(
        model=label,
        subjects=np.arange(n),
        scores=dataset.scores.copy(),
        representatives=reps,
        distances=np.abs(dataset.scores - reps),
        pred_logdensity=dens,
        failed=tuple(failed),
    )


@dataclass(frozen=True)
class ProfileRow:
    distance: float
    model: str
    n_subjects: int
    mean_pred_logdensity: float


def distance_profile(report_cont, report_binned, decimals=9):
    """Mean predictive log density per distance-to-representative bucket, per model.

    Distances come from the binned report for both models; they are rounded
    to ``decimals`` places so that float noise does not split buckets.
    """
    a = set(report_cont.subjects.tolist())
    b = set(report_binned.subjects.tolist())
    if not a or a != b:
        raise SubjectMismatch("the two reports cover different subjects")
    dist = {int(s): round(float(d), decimals) for s, d in zip(report_binned.subjects, report_binned.distances)}
    rows = []
    for report in (report_cont, report_binned):
        buckets = {}
        for s, value in zip(report.subjects, report.pred_logdensity):
            if math.isfinite(value):
                buckets.setdefault(dist[int(s)], []).append(float(value))
        for d in sorted(buckets):
            rows.append(ProfileRow(d, report.model, len(buckets[d]), float(np.mean(buckets[d]))))
    return rows
