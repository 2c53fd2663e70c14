import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gpspectrum.evaluation as evaluation
from gpspectrum.errors import FactorizationFailure, SubjectMismatch, UncoveredScore
from gpspectrum.evaluation import (
    BinningRule,
    CvReport,
    apply_binning,
    distance_profile,
    heldout_logdensity,
    loo_cv,
)
from gpspectrum.spatial_field import CarConfig, Lattice
from gpspectrum.volume_model import ScoreMap, VolumeDataset, fit_volume, predict_volume

MMSE = BinningRule.mmse_three_stage()
FAST = CarConfig(sweeps=1)


def toy(seed=0, n=6, identical=False):
    rng = np.random.default_rng(seed)
    scores = np.array([0.0, 0.1, 0.3, 0.7, 0.9, 1.0][:n])
    base = rng.normal(size=(2, 2, 1))
    z = np.stack([base + (0 if identical else 0.8 * s * np.ones((2, 2, 1)) + 0.3 * rng.normal(size=(2, 2, 1)))
                  for s in scores])
    return VolumeDataset(Lattice((2, 2, 1)), scores, z, ScoreMap(0, 1))


# -- binning -----------------------------------------------------------------------------

@pytest.mark.parametrize("score,rep", [(22, 24), (20, 24), (26, 24), (27, 27), (28, 27), (29, 27), (30, 30)])
def test_mmse_rule(score, rep):
    assert MMSE.representative(score) == rep


def test_uncovered_score_raises():
    with pytest.raises(UncoveredScore):
        apply_binning([31.0], MMSE)


def test_passthrough_keeps_uncovered_scores():
    rule = BinningRule(((0.5, 0.0),), passthrough=True)
    np.testing.assert_array_equal(apply_binning([0.2, 0.8], rule), [0.0, 0.8])


@given(st.lists(st.floats(0, 30, allow_nan=False), min_size=1, max_size=20))
def test_binning_idempotent(scores):
    once = apply_binning(scores, MMSE)
    np.testing.assert_array_equal(apply_binning(once, MMSE), once)


def test_default_rule_is_equidistant_without_warning():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert BinningRule.mmse_three_stage().is_equidistant()


def test_non_equidistant_rule_warns():
    with pytest.warns(UserWarning):
        BinningRule(((0.2, 0.0), (0.5, 0.4), (1.0, 1.0)))


def test_bounds_must_increase():
    with pytest.raises(ValueError):
        BinningRule(((0.5, 0.0), (0.5, 1.0)))


# -- held-out density ------------------------------------------------------------------------

def test_heldout_logdensity_matches_gaussian_formula():
    ds = toy(1)
    model = fit_volume(ds, "se", FAST)
    z = ds.zvols[2] + 0.1
    pred = predict_volume(model, 0.45, include_noise=True)
    mu, var = pred.mean_vol.ravel(), pred.var_vol.ravel()
    ref = np.mean([-0.5 * math.log(2 * math.pi * v) - (zz - m) ** 2 / (2 * v)
                   for zz, m, v in zip(z.ravel(), mu, var)])
    assert heldout_logdensity(model, 0.45, z) == pytest.approx(ref, abs=1e-12)


# -- LOO ----------------------------------------------------------------------------------

def test_loo_with_uninformative_inputs_matches_binned():
    ds = toy(2, identical=True)
    rule = BinningRule(((0.35, 0.0), (0.65, 0.5), (1.0, 1.0)))
    cont = loo_cv(ds, "se", FAST)
    binned = loo_cv(ds, "se", FAST, rule)
    np.testing.assert_allclose(cont.pred_logdensity, binned.pred_logdensity, atol=1e-6)


def test_loo_report_fields():
    ds = toy(3)
    rule = BinningRule(((0.35, 0.0), (0.65, 0.5), (1.0, 1.0)))
    rep = loo_cv(ds, "se", FAST, rule)
    assert rep.model == "binned"
    np.testing.assert_array_equal(rep.representatives, [0, 0, 0, 1, 1, 1])
    np.testing.assert_allclose(rep.distances, [0, 0.1, 0.3, 0.3, 0.1, 0.0])
    assert np.all(np.isfinite(rep.pred_logdensity)) and rep.failed == ()
    assert rep.overall_mean == pytest.approx(np.mean(rep.pred_logdensity))


def test_loo_needs_three_subjects():
    with pytest.raises(ValueError):
        loo_cv(toy(n=2), "se", FAST)


def test_fold_isolation(monkeypatch):
    # replacing the held-out subject's volume with garbage leaves that fold's fit unchanged
    fields = []
    real_fit = evaluation.fit_volume

    def spy(train, *args, **kwargs):
        model = real_fit(train, *args, **kwargs)
        fields.append(model.field.values.copy())
        return model

    monkeypatch.setattr(evaluation, "fit_volume", spy)
    ds = toy(4)
    loo_cv(ds, "se", FAST)
    clean = list(fields)
    fields.clear()
    z = ds.zvols.copy()
    z[2] = 1e3 * np.random.default_rng(0).normal(size=z[2].shape)
    loo_cv(VolumeDataset(ds.lattice, ds.scores, z, ds.score_map), "se", FAST)
    np.testing.assert_array_equal(fields[2], clean[2])
    assert not np.array_equal(fields[0], clean[0])


def test_failed_fold_is_marked_not_fatal(monkeypatch):
    real_fit = evaluation.fit_volume
    calls = []

    def flaky(train, *args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise FactorizationFailure("synthetic")
        return real_fit(train, *args, **kwargs)

    monkeypatch.setattr(evaluation, "fit_volume", flaky)
    rep = loo_cv(toy(5), "se", FAST)
    assert rep.failed == (1,)
    assert np.isnan(rep.pred_logdensity[1])
    assert np.isfinite(rep.overall_mean)


# -- distance profile ------------------------------------------------------------------------

def make_report(model, dens, dist, subjects=None):
    n = len(dens)
    subjects = np.arange(n) if subjects is None else np.asarray(subjects)
    scores = np.linspace(0, 1, n)
    return CvReport(model, subjects, scores, scores - np.asarray(dist), np.asarray(dist, float),
                    np.asarray(dens, float))


def test_profile_single_bucket_when_all_distances_zero():
    rows = distance_profile(make_report("continuous", [1, 2, 3], [0, 0, 0]),
                            make_report("binned", [0, 1, 2], [0, 0, 0]))
    assert [(r.model, r.distance, r.n_subjects) for r in rows] == [("continuous", 0.0, 3), ("binned", 0.0, 3)]
    assert rows[0].mean_pred_logdensity == 2.0


def test_profile_groups_by_binned_distance():
    cont = make_report("continuous", [1, 2, 3, 4], [0, 0, 0, 0])
    binned = make_report("binned", [5, 6, 7, 8], [0.1, 0.0, 0.1 + 1e-12, 0.3])
    rows = [(r.model, r.distance, r.n_subjects, r.mean_pred_logdensity) for r in distance_profile(cont, binned)]
    assert rows == [
        ("continuous", 0.0, 1, 2.0), ("continuous", 0.1, 2, 2.0), ("continuous", 0.3, 1, 4.0),
        ("binned", 0.0, 1, 6.0), ("binned", 0.1, 2, 6.0), ("binned", 0.3, 1, 8.0),
    ]


def test_profile_subject_mismatch():
    with pytest.raises(SubjectMismatch):
        distance_profile(make_report("c", [1, 2], [0, 0]), make_report("b", [1, 2], [0, 0], subjects=[5, 6]))
