import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mriv.dataset import Dataset
from mriv.estimators import (
    ClipConfig,
    EstimationError,
    NuisanceSet,
    cap_tau,
    clip_delta,
    clip_propensity,
    crossfit_folds,
    dr_pseudo_outcome,
    driv_pseudo_outcome,
    estimate_nuisances,
    fit_driv,
    fit_drlearner,
    fit_mriv,
    fit_mriv_crossfit,
    fit_tlearner,
    fit_wald,
    mr_pseudo_outcome,
    mr_pseudo_outcomes,
    plugin_wald,
)
from mriv.harness import oracle_nuisances
from mriv.regress import RegressorSpec
from mriv.simgen import SimConfig, semi_synthetic, simulate

RIDGE = RegressorSpec(variant="ridge")


def _const(v):
    return lambda X: np.full(np.asarray(X).shape[0], float(v))


@pytest.mark.parametrize("z, expected", [(1, 4.0), (0, -2.0)])
def test_pseudo_outcome_examples(z, expected):
    # residual 2 - (0 + 1 * (1 - 0.5)) = 1.5, weight 0.5, delta 1
    got = mr_pseudo_outcome(z, 1, 2.0, pi=0.5, mu0_y=0.0, mu0_a=0.5, delta_a=1.0, tau_init=1.0)
    assert got == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(
    z=st.sampled_from([0, 1]), a=st.sampled_from([0, 1]), tau=st.floats(-5, 5), mu0_y=st.floats(-5, 5),
    mu0_a=st.floats(0, 1), pi=st.floats(0.05, 0.95), delta=st.floats(0.1, 1),
)
def test_zero_residual_returns_initial_estimate(z, a, tau, mu0_y, mu0_a, pi, delta):
    y = mu0_y + tau * (a - mu0_a)
    assert mr_pseudo_outcome(z, a, y, pi, mu0_y, mu0_a, delta, tau) == pytest.approx(tau, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(z=st.sampled_from([0, 1]), pi=st.floats(0.05, 0.95), delta=st.floats(0.1, 1), y=st.floats(-10, 10))
def test_pseudo_outcome_is_affine_in_y(z, pi, delta, y):
    f = lambda v: mr_pseudo_outcome(z, 1, v, pi, 0.3, 0.2, delta, 0.7)  # noqa: E731
    slope = (2 * z - 1) / (delta * (z * pi + (1 - z) * (1 - pi)))
    assert f(y + 1.0) - f(y) == pytest.approx(slope, rel=1e-9)


def test_pseudo_outcome_clips_when_asked():
    clip = ClipConfig()
    raw = mr_pseudo_outcome(1, 1, 1.0, 0.001, 0.0, 0.0, 1e-9, 0.0, clip=clip)
    assert raw == pytest.approx(1.0 / (0.05 * 0.01))


@settings(max_examples=50, deadline=None)
@given(v=st.lists(st.floats(-3, 3), min_size=1, max_size=20), floor=st.floats(0.01, 1))
def test_clips_are_idempotent_and_bounded(v, floor):
    d = clip_delta(v, floor)
    np.testing.assert_array_equal(clip_delta(d, floor), d)
    assert np.all(np.abs(d) >= floor)
    assert np.all(np.sign(d) == np.where(np.asarray(v) >= 0, 1, -1))
    p = clip_propensity(np.asarray(v) / 3 + 0.5, 0.01)
    np.testing.assert_array_equal(clip_propensity(p, 0.01), p)
    np.testing.assert_array_equal(cap_tau(v, None), v)
    assert np.all(np.abs(cap_tau(v, 1.0)) <= 1.0)


def test_clip_delta_zero_keeps_positive_sign():
    assert clip_delta(0.0, 0.05) == 0.05


@pytest.mark.parametrize("kwargs", [dict(delta_floor=0.0), dict(propensity_eps=0.5), dict(tau_cap=-1.0)])
def test_clip_config_validation(kwargs):
    with pytest.raises(ValueError):
        ClipConfig(**kwargs)


def _constant_x_data(n=400, seed=0, tau=1.7, p1=0.8, p0=0.2, noise=0.0):
    rng = np.random.default_rng(seed)
    z = (rng.random(n) < 0.5).astype(float)
    z[:2] = [0, 1]
    a = np.where(z == 1, rng.random(n) < p1, rng.random(n) < p0).astype(float)
    y = 0.4 + tau * a + noise * rng.standard_normal(n)
    return Dataset(np.zeros((n, 1)), z, a, y)


def test_nuisances_on_constant_covariates_are_arm_means():
    d = _constant_x_data()
    nuis = estimate_nuisances(d, RIDGE)
    x = np.zeros((1, 1))
    z0, z1 = d.instrument == 0, d.instrument == 1
    assert nuis.mu0Y_hat(x)[0] == pytest.approx(d.outcome[z0].mean())
    assert nuis.mu1Y_hat(x)[0] == pytest.approx(d.outcome[z1].mean())
    assert nuis.mu0A_hat(x)[0] == pytest.approx(d.treatment[z0].mean(), abs=1e-4)
    assert nuis.pi_hat(x)[0] == pytest.approx(z1.mean(), abs=1e-4)


def test_propensity_near_half_for_fair_instrument():
    data, _ = semi_synthetic(2000, seed=1)
    pi = estimate_nuisances(data, RIDGE).pi_hat(data.covariates)
    assert np.mean(np.abs(pi - 0.5)) < 0.05 and np.median(np.abs(pi - 0.5)) < 0.05


def test_perfect_compliance_recovers_tau_exactly():
    # A = Z and noiseless Y: MRIV with ridge nuisances gives the constant effect
    rng = np.random.default_rng(0)
    z = (rng.random(200) < 0.5).astype(float)
    d = Dataset(np.zeros((200, 1)), z, z, 1.0 + 2.5 * z)
    est = fit_mriv(d, nuisance_spec=RIDGE, stage2_spec=RIDGE)
    assert est.predict(np.zeros((2, 1))) == pytest.approx([2.5, 2.5], abs=1e-3)


def test_oracle_nuisances_give_unbiased_pseudo_outcomes():
    data, truth = semi_synthetic(100_000, seed=2)
    nuis = oracle_nuisances(truth)
    po = mr_pseudo_outcomes(data, nuis, lambda X: np.zeros(X.shape[0]), ClipConfig())
    se = po.std(ddof=1) / np.sqrt(po.size)
    assert abs(po.mean() - truth.tau.mean()) < 4 * se


def test_mriv_with_oracle_nuisances_tracks_tau():
    data, truth = semi_synthetic(4000, seed=3, p=1)
    est = fit_mriv(data, nuisances=oracle_nuisances(truth), stage2_spec=RegressorSpec(variant="kernel-ridge"))
    grid = np.linspace(-1.5, 1.5, 31).reshape(-1, 1)
    err = est.predict(grid) - grid[:, 0] ** 2 / 0.7
    assert np.sqrt(np.mean(err**2)) < 0.3
    assert est.parts["pseudo_outcomes"].shape == (4000,)


def test_wald_hand_case_and_clip():
    nuis = NuisanceSet(_const(0.5), _const(1.0), _const(0.25), None, _const(2.0), _const(0.75))
    assert plugin_wald(nuis, 1).predict(np.zeros((1, 1)))[0] == pytest.approx(2.0)
    tiny = NuisanceSet(_const(0.5), _const(1.0), _const(0.25), None, _const(2.0), _const(0.25 + 1e-9))
    assert plugin_wald(tiny, 1).predict(np.zeros((1, 1)))[0] == pytest.approx(1.0 / 0.05)
    capped = plugin_wald(tiny, 1, ClipConfig(tau_cap=3.0))
    assert capped.predict(np.zeros((1, 1)))[0] == 3.0


def test_wald_with_oracle_components_is_exact():
    data, truth = simulate(SimConfig(n=300, seed=4))
    est = plugin_wald(oracle_nuisances(truth), data.p)
    np.testing.assert_allclose(est.predict(data.covariates), truth.tau, atol=1e-12)


def test_wald_needs_arm_one_models():
    nuis = NuisanceSet(_const(0.5), _const(1.0), _const(0.25), None)
    with pytest.raises(EstimationError, match="mu1Y_hat"):
        nuis.wald(ClipConfig())


def test_fitted_wald_on_constant_data():
    d = _constant_x_data(2000, noise=0.1)
    est = fit_wald(d, RIDGE)
    assert est.predict(np.zeros((1, 1)))[0] == pytest.approx(1.7, abs=0.1)


def test_tlearner_zero_effect():
    rng = np.random.default_rng(0)
    n = 300
    d = Dataset(rng.standard_normal((n, 2)), np.arange(n) % 2, (rng.random(n) < 0.5).astype(float), np.full(n, 3.0))
    np.testing.assert_allclose(fit_tlearner(d, RIDGE).predict(d.covariates), 0.0, atol=1e-9)


def test_tlearner_becomes_consistent_without_confounding():
    def err(n):
        data, truth = simulate(SimConfig(n=n, seed=5, alpha_u=0.0))
        return np.sqrt(np.mean((fit_tlearner(data, RegressorSpec(variant="kernel-ridge")).predict(data.covariates)
                                - truth.tau) ** 2))

    assert err(2000) < err(500)


@pytest.mark.parametrize("a, y, mu1, mu0, expected", [(1, 2.0, 2.0, 0.0, 2.0), (0, 0.0, 2.0, 0.0, 2.0),
                                                     (1, 0.0, 0.0, 2.0, -2.0), (0, 2.0, 0.0, 2.0, -2.0)])
def test_dr_pseudo_outcome_examples(a, y, mu1, mu0, expected):
    assert dr_pseudo_outcome(a, y, mu1, mu0, 0.5) == pytest.approx(expected)


def test_dr_pseudo_outcome_clips_propensity():
    assert dr_pseudo_outcome(1, 1.0, 0.0, 0.0, 1e-9, eps=0.01) == pytest.approx(100.0)


def test_driv_pseudo_outcome_examples():
    # exact nuisances and noiseless outcome: the correction term vanishes
    assert driv_pseudo_outcome(1, 1, 3.0, 2.0, 0.5, 0.5, 0.4, 2.0) == pytest.approx(2.0)
    # residual 1, (z - pi) = 0.5, covariance 0.4 - 0.25 = 0.15
    assert driv_pseudo_outcome(1, 1, 4.0, 2.0, 0.5, 0.5, 0.4, 2.0) == pytest.approx(2.0 + 0.5 / 0.15)
    # zero covariance is pushed to the floor
    assert driv_pseudo_outcome(0, 0, 1.0, 0.0, 0.5, 0.5, 0.25, 0.0, delta_floor=0.05) == pytest.approx(-10.0)


@pytest.mark.parametrize("fit", [fit_drlearner, fit_driv])
def test_other_learners_fit_and_predict(fit):
    data, truth = simulate(SimConfig(n=400, seed=6))
    est = fit(data, RIDGE, RIDGE)
    pred = est.predict(data.covariates)
    assert pred.shape == (400,) and np.all(np.isfinite(pred))


def test_dimension_mismatch_and_empty_predict():
    d = _constant_x_data()
    est = fit_mriv(d, nuisance_spec=RIDGE, stage2_spec=RIDGE)
    with pytest.raises(EstimationError, match="dimension mismatch"):
        est.predict(np.zeros((2, 3)))
    assert est.predict(np.empty((0, 1))).shape == (0,)


def test_duplicate_rows_are_fine():
    d = _constant_x_data(n=100)
    twice = Dataset(np.vstack([d.covariates] * 2), np.tile(d.instrument, 2), np.tile(d.treatment, 2),
                    np.tile(d.outcome, 2))
    a = fit_mriv(d, nuisance_spec=RIDGE, stage2_spec=RIDGE).predict(np.zeros((1, 1)))
    b = fit_mriv(twice, nuisance_spec=RIDGE, stage2_spec=RIDGE).predict(np.zeros((1, 1)))
    assert a == pytest.approx(b, abs=1e-3)


def test_missing_arm_is_an_error():
    d = Dataset(np.zeros((4, 1)), [0, 1, 1, 1], [0, 1, 1, 0], [0.0, 1, 1, 0])
    with pytest.raises(EstimationError, match="instrument=0 arm has 1 rows"):
        estimate_nuisances(d, RIDGE)


@pytest.mark.parametrize("n", [30, 31, 32, 100])
def test_crossfit_fold_structure(n):
    rotations = crossfit_folds(n, seed=0)
    assert len(rotations) == 3
    for rot in rotations:
        parts = [rot["regression"], rot["nuisance1"], rot["nuisance2"]]
        assert sorted(np.concatenate(parts).tolist()) == list(range(n))
        assert max(len(p) for p in parts) - min(len(p) for p in parts) <= 1
    # every fold plays every role once
    for role in ("regression", "nuisance1", "nuisance2"):
        assert sorted(np.concatenate([r[role] for r in rotations]).tolist()) == list(range(n))


def test_crossfit_estimator_members_and_determinism():
    d = _constant_x_data(300, noise=0.1)
    a = fit_mriv_crossfit(d, RIDGE, RIDGE, seed=2)
    b = fit_mriv_crossfit(d, RIDGE, RIDGE, seed=2)
    assert len(a.parts["members"]) == 3
    x = np.zeros((3, 1))
    np.testing.assert_array_equal(a.predict(x), b.predict(x))
    assert np.mean([m(x) for m in a.parts["members"]], axis=0) == pytest.approx(a.predict(x))
    with pytest.raises(EstimationError, match="n >= 30"):
        fit_mriv_crossfit(d.subset(np.arange(29)), RIDGE, RIDGE)


def test_mriv_is_deterministic():
    data, _ = simulate(SimConfig(n=300, seed=7))
    spec = RegressorSpec(variant="mlp", mlp_epochs=5)
    a = fit_mriv(data, nuisance_spec=spec, seed=3).predict(data.covariates)
    b = fit_mriv(data, nuisance_spec=spec, seed=3).predict(data.covariates)
    np.testing.assert_array_equal(a, b)


def test_given_initializer_is_used():
    d = _constant_x_data(noise=0.1)
    est = fit_mriv(d, init=lambda X: np.full(X.shape[0], 5.0), nuisance_spec=RIDGE, stage2_spec=RIDGE)
    assert est.provenance["init"] == "given"
    assert est.parts["init"](np.zeros((1, 1)))[0] == 5.0
