import math

import numpy as np
import pytest
from scipy.special import expit

from gpspectrum.errors import DatasetError, MaskMismatch
from gpspectrum.gp_core import GpDataset, log_marginal_likelihood, predict
from gpspectrum.spatial_field import CarConfig, HyperField, Lattice
from gpspectrum.volume_model import (
    ScoreMap,
    VolumeDataset,
    compare_models,
    fit_volume,
    initialize_field,
    initialize_fits,
    model_from_field,
    predict_volume,
    total_evidence,
)


def toy_dataset(dims=(3, 2, 1), n=7, seed=0, mask=None):
    rng = np.random.default_rng(seed)
    scores = np.linspace(10, 30, n)
    x = (scores - 10) / 20
    zvols = np.empty((n,) + dims)
    for idx in np.ndindex(dims):
        amp = rng.uniform(0.5, 2.0)
        zvols[(slice(None),) + idx] = amp * np.sin(4 * x + rng.uniform(0, 3)) + 0.3 * rng.normal(size=n)
    return VolumeDataset(Lattice(dims, mask), scores, zvols, ScoreMap(0, 30))


# -- dataset ------------------------------------------------------------------------

def test_score_map_round_trip():
    sm = ScoreMap(0, 30)
    np.testing.assert_allclose(sm.denormalize(sm.normalize([0, 15, 30])), [0, 15, 30])
    assert sm.normalize(15) == 0.5


def test_dataset_rejects_single_subject():
    with pytest.raises(DatasetError):
        VolumeDataset(Lattice((2, 1, 1)), [1.0], np.zeros((1, 2, 1, 1)))


def test_dataset_rejects_wrong_shape():
    with pytest.raises(DatasetError):
        VolumeDataset(Lattice((2, 1, 1)), [1.0, 2.0], np.zeros((2, 3, 1, 1)))


def test_dataset_rejects_scores_outside_range():
    with pytest.raises(DatasetError):
        VolumeDataset(Lattice((2, 1, 1)), [1.0, 31.0], np.zeros((2, 2, 1, 1)), ScoreMap(0, 30))


def test_dataset_rejects_non_finite_inside_mask_only():
    z = np.zeros((2, 2, 1, 1))
    z[0, 1, 0, 0] = np.nan
    with pytest.raises(DatasetError):
        VolumeDataset(Lattice((2, 1, 1)), [0.0, 1.0], z)
    mask = np.array([True, False]).reshape(2, 1, 1)
    VolumeDataset(Lattice((2, 1, 1), mask), [0.0, 1.0], z)


def test_empirical_mean_per_voxel():
    ds = toy_dataset()
    for d, y in zip(ds.voxel_datasets("empirical"), ds.voxel_targets()):
        assert d.mean_value == pytest.approx(np.mean(y))


# -- initialization and fitting -----------------------------------------------------------

def test_identical_series_get_identical_params():
    ds = toy_dataset()
    z = ds.zvols.copy()
    z[:, 1, 0, 0] = z[:, 0, 0, 0]
    ds2 = VolumeDataset(ds.lattice, ds.scores, z, ds.score_map)
    field = initialize_field(ds2, "se")
    np.testing.assert_array_equal(field[(0, 0, 0)].as_array(), field[(1, 0, 0)].as_array())


def test_constant_voxel_is_flagged_and_frozen():
    ds = toy_dataset()
    z = ds.zvols.copy()
    z[:, 2, 1, 0] = 0.0
    ds2 = VolumeDataset(ds.lattice, ds.scores, z, ds.score_map)
    fits = initialize_fits(ds2, "se")
    c = ds2.lattice.compact_index((2, 1, 0))
    assert fits[c].status == "degenerate"
    model = fit_volume(ds2, "se", CarConfig(sweeps=2))
    assert model.report.status[c] == "degenerate"
    np.testing.assert_array_equal(model.field.values[c], fits[c].params.as_array())
    pred = predict_volume(model, 20.0)
    assert pred.mean_vol[2, 1, 0] == 0.0 and pred.var_vol[2, 1, 0] == 0.0


def test_zero_sweeps_equals_independent_fit():
    ds = toy_dataset()
    model = fit_volume(ds, "se", CarConfig(sweeps=0))
    assert model.field == initialize_field(ds, "se")


def test_fit_is_deterministic():
    ds = toy_dataset(seed=3)
    a = fit_volume(ds, "se", CarConfig(sweeps=2, seed=5))
    b = fit_volume(ds, "se", CarConfig(sweeps=2, seed=5))
    assert a.field == b.field
    np.testing.assert_array_equal(a.report.lml, b.report.lml)
    assert a.report.status == b.report.status
    assert a.report.icm.as_dict() == b.report.icm.as_dict()


def test_report_lml_matches_gp_core():
    ds = toy_dataset(seed=2)
    model = fit_volume(ds, "linear", CarConfig(sweeps=1), mean="empirical")
    for c, d in enumerate(ds.voxel_datasets("empirical")):
        assert model.report.lml[c] == log_marginal_likelihood("linear", model.field.values[c], d)


def test_model_from_field_reproduces_report():
    ds = toy_dataset(seed=4)
    model = fit_volume(ds, "se", CarConfig(sweeps=1))
    again = model_from_field(ds, "se", model.field.copy())
    np.testing.assert_array_equal(again.report.lml, model.report.lml)


# -- prediction ------------------------------------------------------------------------

def test_prediction_matches_per_voxel_predict():
    ds = toy_dataset(seed=1)
    model = fit_volume(ds, "se", CarConfig(sweeps=1))
    pred = predict_volume(model, 17.0)
    for c, d in enumerate(ds.voxel_datasets()):
        v = ds.lattice.coords(ds.lattice.flat_indices[c])
        p = predict("se", model.field.values[c], d, 17.0 / 30.0)
        assert pred.mean_vol[v] == p.mean and pred.var_vol[v] == p.variance


def test_masked_out_voxels_are_nan():
    mask = np.ones((3, 2, 1), bool)
    mask[1, 1, 0] = False
    ds = toy_dataset(mask=mask)
    pred = predict_volume(fit_volume(ds, "se", CarConfig(sweeps=0)), 20.0)
    assert np.isnan(pred.mean_vol[1, 1, 0]) and np.isnan(pred.var_vol[1, 1, 0])
    assert np.all(pred.var_vol[mask] >= 0)


def test_prediction_at_training_score_with_small_noise():
    ds = toy_dataset(seed=6)
    field = HyperField(ds.lattice, np.tile([-1.5, 0.5, math.log(1e-4)], (ds.lattice.n_masked, 1)))
    model = model_from_field(ds, "se", field)
    pred = predict_volume(model, ds.scores[3])
    np.testing.assert_allclose(pred.mean_vol, ds.zvols[3], atol=1e-5)


def test_prediction_far_outside_range_decorrelates():
    ds = toy_dataset(seed=6)
    field = HyperField(ds.lattice, np.tile([-2.0, 0.3, -1.0], (ds.lattice.n_masked, 1)))
    model = model_from_field(ds, "se", field)
    with pytest.warns(UserWarning):
        pred = predict_volume(model, 1e4)
    assert pred.extrapolated
    np.testing.assert_allclose(pred.var_vol, math.exp(0.6), rtol=1e-12)
    np.testing.assert_allclose(pred.mean_vol, 0.0, atol=1e-12)


def test_prediction_reads_only_its_own_voxel():
    ds = toy_dataset(seed=7)
    model = fit_volume(ds, "se", CarConfig(sweeps=0))
    z = ds.zvols.copy()
    z[:, 0, 0, 0] += 5.0
    ds2 = VolumeDataset(ds.lattice, ds.scores, z, ds.score_map)
    model2 = model_from_field(ds2, "se", model.field)
    a, b = predict_volume(model, 21.0), predict_volume(model2, 21.0)
    other = np.ones(ds.lattice.dims, bool)
    other[0, 0, 0] = False
    np.testing.assert_array_equal(a.mean_vol[other], b.mean_vol[other])


def test_adding_a_subject_never_increases_variance():
    # rank-one update: with fixed hyperparameters, conditioning on more data shrinks variance
    rng = np.random.default_rng(8)
    for _ in range(50):
        ell = rng.uniform(-1.5, 0.5, 3)
        x = rng.uniform(0, 1, 5)
        y = rng.normal(size=5)
        x_new, y_new = rng.uniform(0, 1), rng.normal()
        before = predict("se", ell, GpDataset(x, y), x_new).variance
        after = predict("se", ell, GpDataset(np.append(x, x_new), np.append(y, y_new)), x_new).variance
        assert after <= before + 1e-12


# -- evidence and comparison -------------------------------------------------------------

def test_single_voxel_total_evidence():
    ds = toy_dataset(dims=(1, 1, 1))
    model = fit_volume(ds, "se")
    assert total_evidence(model) == model.report.lml[0]


def test_evidence_additivity_over_partition():
    ds = toy_dataset(seed=9)
    model = fit_volume(ds, "se", CarConfig(sweeps=1))
    region = np.zeros(ds.lattice.dims, bool)
    region[0] = True
    parts = total_evidence(model, region) + total_evidence(model, ~region)
    assert parts == pytest.approx(total_evidence(model), abs=1e-12)


def test_self_comparison_is_neutral():
    ds = toy_dataset()
    model = fit_volume(ds, "se", CarConfig(sweeps=1))
    cmp_ = compare_models(model, model)
    np.testing.assert_array_equal(cmp_.log_bf_vol, 0.0)
    np.testing.assert_array_equal(cmp_.p_linear_vol, 0.5)
    assert cmp_.per_voxel_log_diff == 0.0 and cmp_.per_voxel_odds == 1.0


def test_posterior_map_is_logistic_of_log_bf():
    ds = toy_dataset(seed=10)
    cmp_ = compare_models(fit_volume(ds, "se", CarConfig(sweeps=1)),
                          fit_volume(ds, "linear", CarConfig(sweeps=1)))
    np.testing.assert_allclose(cmp_.p_linear_vol, 1 / (1 + np.exp(cmp_.log_bf_vol)), atol=1e-12)
    assert np.all((cmp_.p_linear_vol >= 0) & (cmp_.p_linear_vol <= 1))


def test_prior_log_odds_shift():
    ds = toy_dataset(seed=10)
    a = fit_volume(ds, "se", CarConfig(sweeps=0))
    b = fit_volume(ds, "linear", CarConfig(sweeps=0))
    cmp_ = compare_models(a, b, prior_log_odds=1.5)
    np.testing.assert_allclose(cmp_.p_linear_vol, expit(-(cmp_.log_bf_vol + 1.5)), atol=1e-15)


def test_per_voxel_statistics_for_large_totals():
    # (903 - 789) thousand nats over 32783 voxels: a log difference, not an odds ratio
    from gpspectrum.volume_model import ModelComparisonMap

    m = ModelComparisonMap(None, None, -789e3, -903e3, 32783)
    assert m.per_voxel_log_diff == pytest.approx(3.48, abs=0.005)
    assert m.per_voxel_odds == pytest.approx(math.exp(m.per_voxel_log_diff))


def test_compare_rejects_different_masks():
    a = fit_volume(toy_dataset(), "se", CarConfig(sweeps=0))
    mask = np.ones((3, 2, 1), bool)
    mask[0, 0, 0] = False
    b = fit_volume(toy_dataset(mask=mask), "se", CarConfig(sweeps=0))
    with pytest.raises(MaskMismatch):
        compare_models(a, b)


# -- phantom-scale behaviour ---------------------------------------------------------

def test_active_region_output_scale_exceeds_background(phantom):
    from gpspectrum.phantom import PhantomConfig

    field = initialize_field(phantom, "se")
    labels = phantom.lattice.from_volume(PhantomConfig().label_volume())
    log_lam = field.values[:, 1]
    bg = np.median(log_lam[labels == 0])
    assert np.median(log_lam[labels == 1]) > bg
    assert np.median(log_lam[labels == 2]) > bg


def test_regularized_fit_bounded_evidence_loss(phantom, phantom_fit):
    init = fit_volume(phantom, "se", CarConfig(sweeps=0))
    delta = total_evidence(phantom_fit.model) - total_evidence(init)
    # the CAR prior trades evidence for smoothness; the loss stays modest
    per_voxel = delta / phantom.lattice.n_masked
    print(f"evidence change after ICM: total {delta:.3f}, per voxel {per_voxel:.4f}")
    assert per_voxel > -0.5
