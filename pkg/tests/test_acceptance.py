"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints, then
asserts. Run just this file with ``pytest tests/test_acceptance.py -v``.
"""

import csv
import filecmp
import time
from dataclasses import replace

import numpy as np
import pytest

from mriv import cli
from mriv.config import ExperimentConfig
from mriv.dataset import Dataset, save_dataset
from mriv.estimators import ClipConfig, fit_mriv, fit_mriv_crossfit, mr_pseudo_outcome, plugin_wald
from mriv.harness import (
    emit_results,
    oracle_nuisances,
    run_experiment,
    sweep_confounding,
    sweep_smoothness,
)
from mriv.netlearn import MrivNetConfig, init_mrivnet, mrivnet_gradient_check
from mriv.oracle import NUISANCES, RobustnessScenario, oracle_second_stage, perturb, wald_identity_check
from mriv.regress import RegressorSpec, gradient_check
from mriv.simgen import (
    MaternParams,
    SimConfig,
    build_components,
    conditional_draws,
    matern_bessel,
    matern_from_distance,
    mc_verify,
    simulate,
)

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def gp_preset_runs():
    """GP preset (alpha=1.5, beta=50), n=3000, 5 seeds, MLP nuisances."""
    start = time.perf_counter()
    base = ExperimentConfig(n_values=(3000,), seeds=SEEDS, methods=("mriv", "wald"))
    mlp = run_experiment(base)
    ridge = run_experiment(replace(base, methods=("wald",), wald=RegressorSpec(variant="ridge")))
    return mlp, ridge, time.perf_counter() - start


def test_criterion_01_multiple_robustness(tmp_path, criterion):
    start = time.perf_counter()
    code = cli.main(["check-robustness", "--trials", "100", "--points", "50", "--seed", "0", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    with open(tmp_path / "robustness.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    cond = [r for r in rows if r["condition"] != "negative"]
    neg = [r for r in rows if r["condition"] == "negative"]
    worst = max(float(r["max_abs_error"]) for r in cond)
    detected = np.mean([float(r["max_abs_error"]) > 1e-3 for r in neg])
    ok = code == 0 and len(cond) == 300 and worst <= 1e-10 and detected >= 0.95 and elapsed < 10
    criterion(1, "multiple robustness, 100 trials x 50 points x 3 conditions", ok,
              f"max err {worst:.2e}, negatives detected {detected:.2f}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_pseudo_outcome_matches_closed_form(criterion):
    start = time.perf_counter()
    cfg = SimConfig(seed=11)
    truth = build_components(np.linspace(-1.5, 1.5, 5).reshape(-1, 1), cfg)
    # generic plug-ins: every nuisance perturbed, so the closed form differs from tau
    plugged = perturb(truth, RobustnessScenario(frozenset(NUISANCES), 0.3, seed=5))
    closed = oracle_second_stage(truth, plugged)
    z_scores = []
    for i in range(truth.n):
        z, a, y = conditional_draws(truth, i, 100_000, seed=100 + i, alpha_u=cfg.alpha_u)
        po = mr_pseudo_outcome(
            z, a, y, plugged.pi[i], plugged.mu0_y[i], plugged.mu0_a[i], plugged.delta_a[i], plugged.tau_init[i]
        )
        z_scores.append(abs(po.mean() - closed[i]) / (po.std(ddof=1) / np.sqrt(po.size)))
    elapsed = time.perf_counter() - start
    ok = max(z_scores) <= 3 and elapsed < 60
    criterion(2, "Monte-Carlo pseudo-outcome mean vs closed form", ok,
              f"max |z| {max(z_scores):.2f}, {elapsed:.1f}s")
    assert ok


def test_criterion_03_wald_identity(criterion):
    data, truth = simulate(SimConfig(n=500, seed=3))
    est = plugin_wald(oracle_nuisances(truth), data.p, ClipConfig())
    err = float(np.max(np.abs(est.predict(truth.points) - truth.tau)))
    ok = err <= 1e-10 and wald_identity_check(truth) <= 1e-10
    criterion(3, "Wald identity with oracle components", ok, f"max err {err:.2e}")
    assert ok


def test_criterion_04_mriv_beats_ridge_wald(gp_preset_runs, criterion):
    mlp, ridge, elapsed = gp_preset_runs
    m, w = mlp.mean("mriv"), ridge.mean("wald")
    ok = m <= 0.6 * w and elapsed < 15 * 60
    criterion(4, "MRIV vs ridge Wald at n=3000", ok, f"{m:.3f} vs {w:.3f}, ratio {m / w:.2f}, {elapsed:.0f}s")
    assert ok


def test_criterion_05_meta_learner_uplift(gp_preset_runs, criterion):
    mlp, _, _ = gp_preset_runs
    m, w = mlp.mean("mriv"), mlp.mean("wald")
    ok = m <= w
    criterion(5, "MRIV with Wald init vs the Wald base", ok, f"{m:.3f} vs {w:.3f}")
    assert ok


def test_criterion_06_confounding_sweep(criterion):
    start = time.perf_counter()
    cfg = ExperimentConfig(n_values=(2000,), seeds=SEEDS)
    res = sweep_confounding(cfg, [0.0, 0.5, 1.0, 2.0])
    tl, mr = res.series("t-learner"), res.series("mriv")
    elapsed = time.perf_counter() - start
    tl_ratio, mr_ratio = tl[-1] / tl[0], mr[-1] / mr[0]
    ok = tl_ratio >= 2 and mr_ratio <= 1.5 and elapsed < 20 * 60
    criterion(6, "confounding sweep", ok,
              f"t-learner ratio {tl_ratio:.2f}, MRIV ratio {mr_ratio:.2f}, {elapsed:.0f}s")
    assert ok


def test_criterion_07_smoothness_sweep(criterion):
    start = time.perf_counter()
    cfg = ExperimentConfig(n_values=(2000,), seeds=SEEDS)
    res = sweep_smoothness(cfg, [0.5, 1.5, 2.5])
    mr, wd = res.series("mriv"), res.series("wald")
    elapsed = time.perf_counter() - start
    ok = mr[0] < wd[0] and elapsed < 20 * 60
    criterion(7, "smoothness sweep, lowest alpha", ok, f"{mr[0]:.3f} vs {wd[0]:.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_08_semi_synthetic(criterion):
    start = time.perf_counter()
    cfg = ExperimentConfig(
        generator="semi-synthetic", n_values=(3000,), seeds=SEEDS, methods=("mriv", "t-learner"),
        mriv_nuisances="mrivnet",
    )
    t = run_experiment(cfg)
    m, tl = t.mean("mriv"), t.mean("t-learner")
    elapsed = time.perf_counter() - start
    ok = m <= 0.8 * tl and elapsed < 15 * 60
    criterion(8, "semi-synthetic MRIV vs T-learner", ok, f"{m:.3f} vs {tl:.3f}, ratio {m / tl:.2f}, {elapsed:.0f}s")
    assert ok


def test_criterion_09_simulator_self_check(criterion):
    start = time.perf_counter()
    report = mc_verify(SimConfig(seed=0), bins=10, m=100_000)
    elapsed = time.perf_counter() - start
    ok = report.passed and elapsed < 60
    criterion(9, "simulator self-verification", ok,
              f"A {report.pass_rate_a:.2f}, Y {report.pass_rate_y:.2f}, {elapsed:.1f}s")
    assert ok


def test_criterion_10_numerical_hygiene(tmp_path, criterion):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((32, 3))
    y = rng.standard_normal(32)
    labels = (rng.random(32) < 0.5).astype(float)
    spec = RegressorSpec(variant="mlp", mlp_hidden_sizes=(8, 6))
    g_reg = gradient_check(spec, X, y).max_relative_error
    g_cls = gradient_check(spec, X, labels, classify=True).max_relative_error
    data = Dataset(X, labels, (rng.random(32) < 0.5).astype(float), y)
    g_net = mrivnet_gradient_check(init_mrivnet(3, MrivNetConfig(hidden=8), X, y, labels), data).max_relative_error

    d = np.linspace(0, 6, 241)
    matern_err = max(
        float(np.max(np.abs(matern_from_distance(d, MaternParams(0.7, nu)) - matern_bessel(d, MaternParams(0.7, nu)))))
        for nu in (0.5, 1.5, 2.5)
    )

    for k in (1, 2):
        data_k, truth_k = simulate(SimConfig(n=300, seed=9))
        save_dataset(data_k, tmp_path / f"d{k}.csv")
        truth_k.to_csv(tmp_path / f"c{k}.csv")
        cfg = ExperimentConfig(n_values=(300,), seeds=(0, 1), methods=("mriv", "wald"), record_wall_time=False)
        emit_results(run_experiment(cfg), tmp_path / f"r{k}")
    same = all(
        filecmp.cmp(tmp_path / a, tmp_path / b, shallow=False)
        for a, b in (("d1.csv", "d2.csv"), ("c1.csv", "c2.csv"), ("r1/results.csv", "r2/results.csv"),
                     ("r1/summary.csv", "r2/summary.csv"))
    )
    ok = max(g_reg, g_cls, g_net) <= 1e-4 and matern_err <= 1e-12 and same
    criterion(10, "gradient checks, Matern closed forms, determinism", ok,
              f"grad {max(g_reg, g_cls, g_net):.1e}, matern {matern_err:.1e}, byte-identical {same}")
    assert ok


def test_criterion_11_crossfit_consistency(criterion):
    rng = np.random.default_rng(4)
    n, tau = 600, 1.7
    z = (rng.random(n) < 0.5).astype(float)
    a = np.where(z == 1, rng.random(n) < 0.8, rng.random(n) < 0.2).astype(float)
    y = 0.4 + tau * a
    d = Dataset(np.zeros((n, 1)), z, a, y)
    spec = RegressorSpec(variant="ridge")
    full = fit_mriv(d, nuisance_spec=spec, seed=1).predict(np.zeros((3, 1)))
    cross = fit_mriv_crossfit(d, nuisance_spec=spec, seed=1)
    gap = float(np.max(np.abs(full - cross.predict(np.zeros((3, 1))))))
    counts = np.zeros(n, dtype=int)
    for rot in cross.parts["rotations"]:
        counts[rot["regression"]] += 1
    ok = gap <= 1e-3 and np.all(counts == 1)
    criterion(11, "cross-fit vs full-sample on constant noiseless data", ok, f"gap {gap:.1e}")
    assert ok
