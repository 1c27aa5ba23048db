"""Experiment orchestration: data generation, 80/20 splits, fitting, RMSE tables, sweeps.

Every (n, seed) cell is self-contained: the data come from the generator
seeded with ``seed``, the split from a stream derived from ``seed``, and each
method fits with ``seed``. Cells can therefore run in any order, or in
parallel, without changing any result.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mriv._seeding import role_seed
from mriv.config import ExperimentConfig
from mriv.dataset import Dataset, DatasetError, load_dataset, split_train_test
from mriv.estimators import (
    CateEstimator,
    NuisanceSet,
    fit_driv,
    fit_drlearner,
    fit_mriv,
    fit_mriv_crossfit,
    fit_tlearner,
    fit_wald,
    plugin_wald,
)
from mriv.netlearn import fit_mriv_with_net
from mriv.oracle import RobustnessResult, RobustnessScenario, TrueComponents, check_robustness
from mriv.simgen import SimConfig, build_components, semi_synthetic, simulate

__all__ = [
    "HarnessError",
    "Record",
    "ResultsTable",
    "rmse",
    "generate",
    "run_cell",
    "run_experiment",
    "emit_results",
    "read_results",
    "SweepResult",
    "sweep_confounding",
    "sweep_smoothness",
    "emit_sweep",
    "RobustnessReport",
    "run_robustness_suite",
]

NEGATIVE_CONTROL_THRESHOLD = 1e-3
RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.csv"


class HarnessError(RuntimeError):
    pass


def rmse(estimates, oracle) -> float:
    est = np.asarray(estimates, dtype=float).reshape(-1)
    tru = np.asarray(oracle, dtype=float).reshape(-1)
    if est.shape != tru.shape:
        raise HarnessError(f"length mismatch: {est.size} estimates vs {tru.size} oracle values")
    if est.size == 0:
        raise HarnessError("rmse of empty vectors")
    return float(np.sqrt(np.mean((est - tru) ** 2)))


@dataclass(frozen=True)
class Record:
    method: str
    n: int
    seed: int
    rmse: float  # nan for a failed cell
    wall_time_s: float
    error: Optional[str] = field(default=None, compare=False)

    @property
    def failed(self) -> bool:
        return not math.isfinite(self.rmse)


def _sd(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class ResultsTable:
    records: List[Record] = field(default_factory=list)

    def keys(self) -> List[Tuple[str, int]]:
        """(method, n) pairs in first-appearance order."""
        seen: Dict[Tuple[str, int], None] = {}
        for r in self.records:
            seen.setdefault((r.method, r.n), None)
        return list(seen)

    def values(self, method: str, n: Optional[int] = None) -> List[float]:
        return [r.rmse for r in self.records if r.method == method and (n is None or r.n == n) and not r.failed]

    def mean(self, method: str, n: Optional[int] = None) -> float:
        v = self.values(method, n)
        return float(np.mean(v)) if v else float("nan")

    def summary(self) -> List[Tuple[str, int, float, float]]:
        """(method, n, mean, sd) over successful seeds; SD uses ddof=1 (0 for a single seed)."""
        out = []
        for method, n in self.keys():
            v = self.values(method, n)
            out.append((method, n, float(np.mean(v)) if v else float("nan"), _sd(v) if v else float("nan")))
        return out

    @property
    def all_failed(self) -> bool:
        return bool(self.records) and all(r.failed for r in self.records)


def generate(cfg: ExperimentConfig, n: int, seed: int) -> Tuple[Dataset, Optional[TrueComponents]]:
    if cfg.generator == "gp-sim":
        return simulate(replace(cfg.sim, n=n, seed=seed))
    if cfg.generator == "semi-synthetic":
        return semi_synthetic(n, seed, alpha_u=cfg.sim.alpha_u, p=cfg.semi_p)
    d = load_dataset(cfg.data_path)
    if d.oracle_cate is None:
        raise HarnessError(f"{cfg.data_path}: RMSE needs the oracle `tau` column")
    return d, None


def _row_lookup(points: np.ndarray, values: np.ndarray):
    table = {row.tobytes(): v for row, v in zip(np.ascontiguousarray(points), values)}

    def predict(X):
        X = np.ascontiguousarray(np.asarray(X, dtype=float))
        try:
            return np.array([table[row.tobytes()] for row in X])
        except KeyError:
            raise HarnessError("oracle lookup at a point outside the simulated grid") from None

    return predict


def oracle_nuisances(truth: TrueComponents) -> NuisanceSet:
    """True surfaces as predictors (defined on the simulated points only)."""
    f = {k: _row_lookup(truth.points, getattr(truth, k)) for k in ("pi", "mu0_y", "mu0_a", "delta_a", "mu1_y", "mu1_a")}
    return NuisanceSet(f["pi"], f["mu0_y"], f["mu0_a"], f["delta_a"], f["mu1_y"], f["mu1_a"])


def _fit(method: str, cfg: ExperimentConfig, train: Dataset, truth: Optional[TrueComponents], seed: int) -> CateEstimator:
    if method == "mriv":
        if cfg.mriv_nuisances == "mrivnet":
            return fit_mriv_with_net(train, cfg.mrivnet, cfg.stage2, cfg.clip, seed)
        return fit_mriv(train, nuisance_spec=cfg.nuisance, stage2_spec=cfg.stage2, clip=cfg.clip, seed=seed)
    if method == "mriv-crossfit":
        return fit_mriv_crossfit(train, cfg.nuisance, cfg.stage2, cfg.clip, seed)
    if method == "wald":
        if cfg.wald_oracle:
            if truth is None:
                raise HarnessError("wald.oracle needs a simulated generator")
            return plugin_wald(oracle_nuisances(truth), train.p, cfg.clip)
        return fit_wald(train, cfg.wald_spec, cfg.clip, seed)
    if method == "t-learner":
        return fit_tlearner(train, cfg.tlearner_spec, seed)
    if method == "dr-learner":
        return fit_drlearner(train, cfg.nuisance, cfg.stage2, cfg.clip, seed)
    if method == "driv":
        return fit_driv(train, cfg.nuisance, cfg.stage2, cfg.clip, seed)
    raise HarnessError(f"unknown method {method!r}")


def run_cell(cfg: ExperimentConfig, n: int, seed: int) -> List[Record]:
    """All methods on one (n, seed) data set; failures become NaN records."""
    try:
        data, truth = generate(cfg, n, seed)
        split = split_train_test(data, cfg.test_fraction, role_seed(seed, "split"))
        train, test = data.subset(split.train_indices), data.subset(split.test_indices)
    except (DatasetError, HarnessError, ValueError, RuntimeError, OSError) as exc:
        return [Record(m, n, seed, float("nan"), 0.0, f"data: {exc}") for m in cfg.methods]
    n_label = n if cfg.generator != "file" else data.n
    records = []
    for method in cfg.methods:
        start = time.perf_counter()
        try:
            est = _fit(method, cfg, train, truth, seed)
            pred = est.predict(test.covariates)
            if not np.all(np.isfinite(pred)):
                raise HarnessError("non-finite CATE predictions")
            value, err = rmse(pred, test.oracle_cate), None
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            value, err = float("nan"), f"{type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - start if cfg.record_wall_time else 0.0
        records.append(Record(method, n_label, seed, value, elapsed, err))
    return records


def run_experiment(cfg: ExperimentConfig) -> ResultsTable:
    cells = [(n, s) for n in cfg.n_values for s in cfg.seeds]
    if cfg.generator == "file":
        cells = [(0, s) for s in cfg.seeds]
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(run_cell, [cfg] * len(cells), *zip(*cells)))
    else:
        chunks = [run_cell(cfg, n, s) for n, s in cells]
    return ResultsTable([r for chunk in chunks for r in chunk])


def _fmt(v: float) -> str:
    return "NA" if not math.isfinite(v) else repr(float(v))


def _parse(v: str) -> float:
    return float("nan") if v == "NA" else float(v)


def _write(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_results(t: ResultsTable, out_dir) -> Tuple[Path, Path]:
    """Write ``results.csv`` (per cell) and ``summary.csv`` (per method and n)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    detail, summary = out / RESULTS_FILE, out / SUMMARY_FILE
    _write(
        detail,
        ["method", "n", "seed", "rmse", "wall_time_s"],
        ([r.method, r.n, r.seed, _fmt(r.rmse), _fmt(r.wall_time_s)] for r in t.records),
    )
    _write(
        summary,
        ["method", "n", "rmse_mean", "rmse_sd"],
        ([m, n, _fmt(mean), _fmt(sd)] for m, n, mean, sd in t.summary()),
    )
    return detail, summary


def read_results(path) -> ResultsTable:
    """Inverse of the detail CSV written by :func:`emit_results`."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return ResultsTable(
        [Record(r["method"], int(r["n"]), int(r["seed"]), _parse(r["rmse"]), _parse(r["wall_time_s"])) for r in rows]
    )


@dataclass
class SweepResult:
    param: str
    values: List[float]
    tables: List[ResultsTable]

    def series(self, method: str) -> List[float]:
        """Mean RMSE (over all n and seeds) per sweep value."""
        return [t.mean(method) for t in self.tables]


def _sweep(cfg: ExperimentConfig, param: str, values: Sequence[float], methods, field_name: str) -> SweepResult:
    if not values:
        raise HarnessError("sweep needs at least one value")
    base = replace(cfg, methods=tuple(methods))
    tables = [run_experiment(replace(base, sim=replace(cfg.sim, **{field_name: float(v)}))) for v in values]
    return SweepResult(param, [float(v) for v in values], tables)


def sweep_confounding(cfg: ExperimentConfig, alpha_u_values: Sequence[float]) -> SweepResult:
    """RMSE of MRIV and the T-learner as the unobserved confounding grows."""
    return _sweep(cfg, "alpha_u", alpha_u_values, ("mriv", "t-learner"), "alpha_u")


def sweep_smoothness(cfg: ExperimentConfig, alpha_values: Sequence[float]) -> SweepResult:
    """RMSE of MRIV and Wald as the smoothness of mu0_Y varies."""
    if cfg.generator != "gp-sim":
        raise HarnessError("the smoothness sweep needs generator = gp-sim")
    return _sweep(cfg, "nu_mu0_y", alpha_values, ("mriv", "wald"), "nu_mu0_y")


def emit_sweep(s: SweepResult, out_dir) -> Tuple[Path, Path]:
    """``sweep_<param>.csv`` (summary series) and ``sweep_<param>_records.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary, detail = out / f"sweep_{s.param}.csv", out / f"sweep_{s.param}_records.csv"
    _write(
        summary,
        [s.param, "method", "n", "rmse_mean", "rmse_sd"],
        ([repr(v), m, n, _fmt(mean), _fmt(sd)] for v, t in zip(s.values, s.tables) for m, n, mean, sd in t.summary()),
    )
    _write(
        detail,
        [s.param, "method", "n", "seed", "rmse", "wall_time_s"],
        (
            [repr(v), r.method, r.n, r.seed, _fmt(r.rmse), _fmt(r.wall_time_s)]
            for v, t in zip(s.values, s.tables)
            for r in t.records
        ),
    )
    return summary, detail


@dataclass
class RobustnessReport:
    results: List[RobustnessResult]

    def _of(self, negative: bool) -> List[RobustnessResult]:
        return [r for r in self.results if (r.scenario.condition == "negative") == negative]

    @property
    def conditions_pass(self) -> bool:
        return all(r.passed for r in self._of(False))

    @property
    def negative_detection_rate(self) -> float:
        neg = self._of(True)
        if not neg:
            return 1.0
        return float(np.mean([r.max_abs_error > NEGATIVE_CONTROL_THRESHOLD for r in neg]))

    @property
    def passed(self) -> bool:
        return self.conditions_pass and self.negative_detection_rate >= 0.95

    def write(self, path) -> None:
        """CSV ``scenario_id,condition,max_abs_error,pass`` (pass = within tolerance)."""
        _write(
            Path(path),
            ["scenario_id", "condition", "max_abs_error", "pass"],
            (
                [i, r.scenario.condition, repr(r.max_abs_error), "true" if r.passed else "false"]
                for i, r in enumerate(self.results)
            ),
        )


def run_robustness_suite(
    trials: int = 100,
    points: int = 50,
    seed: int = 0,
    magnitude: float = 0.1,
    tolerance: float = 1e-10,
    sim: SimConfig = SimConfig(),
) -> RobustnessReport:
    """Per trial: one GP draw of the true surfaces at ``points`` random covariates,
    each of the three robustness conditions and one all-perturbed negative control."""
    if trials < 0 or points < 1:
        raise HarnessError("trials must be >= 0 and points >= 1")
    results = []
    for t in range(trials):
        trial_seed = role_seed(seed, f"robustness-trial-{t}")
        X = np.random.default_rng(trial_seed).standard_normal((points, sim.p))
        truth = build_components(X, replace(sim, seed=trial_seed))
        for condition in (1, 2, 3, "negative"):
            scenario = RobustnessScenario.for_condition(condition, magnitude, role_seed(trial_seed, str(condition)))
            results.append(check_robustness(truth, scenario, tolerance))
    return RobustnessReport(results)
