"""Closed-form second-stage oracle and executable multiple-robustness checks.

Regressing the MRIV pseudo-outcome on X with infinite data gives, at each x,

    pi / (dA pi^) * (mu1_Y - mu1_A t) + (1 - pi) / (dA (1 - pi^)) * (mu0_A t - mu0_Y)
      + (mu0_A^ t - mu0_Y^) / dA * (pi / pi^ - (1 - pi) / (1 - pi^)) + t

where hats are the plugged-in nuisances, dA is the plugged delta_A and t the
initial CATE estimate. It equals tau(x) whenever one of three nuisance
groups is exact:

    1: mu0_Y, mu0_A and tau_init
    2: pi and delta_A
    3: pi and tau_init
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy.special import expit, logit

from mriv.estimators import ClipConfig, clip_delta

__all__ = [
    "NUISANCES",
    "CONDITIONS",
    "OracleError",
    "TrueComponents",
    "PluggedEstimates",
    "RobustnessScenario",
    "RobustnessResult",
    "oracle_second_stage",
    "perturb",
    "check_robustness",
    "wald_identity_check",
    "write_robustness_report",
]

NUISANCES = ("mu0_y", "mu0_a", "delta_a", "pi", "tau_init")

# nuisances that must stay exact under each condition
CONDITIONS = {
    1: frozenset({"mu0_y", "mu0_a", "tau_init"}),
    2: frozenset({"pi", "delta_a"}),
    3: frozenset({"pi", "tau_init"}),
    "negative": frozenset(),
}

MIN_ABS_DELTA_A = 1e-6


class OracleError(ValueError):
    pass


def _vec(v) -> np.ndarray:
    arr = np.array(v, dtype=float, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TrueComponents:
    """Population surfaces of a data-generating process at fixed points.

    ``tau`` defaults to delta_Y / delta_A. Generators with a closed-form CATE
    pass it explicitly, which makes :func:`wald_identity_check` a real check.
    """

    points: np.ndarray
    mu1_y: np.ndarray
    mu0_y: np.ndarray
    mu1_a: np.ndarray
    mu0_a: np.ndarray
    pi: np.ndarray
    tau: Optional[np.ndarray] = None
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        for name in ("mu1_y", "mu0_y", "mu1_a", "mu0_a", "pi"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        with np.errstate(divide="ignore", invalid="ignore"):
            tau = self.delta_y / self.delta_a if self.tau is None else self.tau
        object.__setattr__(self, "tau", _vec(tau))
        n = pts.shape[0]
        for name in ("mu1_y", "mu0_y", "mu1_a", "mu0_a", "pi", "tau"):
            if getattr(self, name).shape[0] != n:
                raise OracleError(f"{name} has {getattr(self, name).shape[0]} values for {n} points")
        if self.check:
            if np.any(np.abs(self.delta_a) < MIN_ABS_DELTA_A):
                raise OracleError("generation error: |delta_A| below 1e-6")
            if np.any((self.pi <= 0) | (self.pi >= 1)):
                raise OracleError("generation error: pi outside (0, 1)")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def delta_a(self) -> np.ndarray:
        return self.mu1_a - self.mu0_a

    @property
    def delta_y(self) -> np.ndarray:
        return self.mu1_y - self.mu0_y

    def subset(self, indices) -> "TrueComponents":
        idx = np.asarray(indices, dtype=np.intp)
        return TrueComponents(
            self.points[idx], self.mu1_y[idx], self.mu0_y[idx], self.mu1_a[idx], self.mu0_a[idx],
            self.pi[idx], self.tau[idx], check=self.check,
        )

    def to_csv(self, path) -> None:
        """Companion CSV: x_1..x_p, mu1_y, mu0_y, mu1_a, mu0_a, pi, delta_a, delta_y, tau."""
        names = ["mu1_y", "mu0_y", "mu1_a", "mu0_a", "pi", "delta_a", "delta_y", "tau"]
        cols = [getattr(self, k) for k in names]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x_{j + 1}" for j in range(self.points.shape[1])] + names)
            for i in range(self.n):
                w.writerow([repr(float(v)) for v in self.points[i]] + [repr(float(c[i])) for c in cols])


@dataclass(frozen=True, eq=False)
class PluggedEstimates:
    """Nuisance values plugged into the pseudo-outcome, at the truth's points."""

    mu0_y: np.ndarray
    mu0_a: np.ndarray
    delta_a: np.ndarray
    pi: np.ndarray
    tau_init: np.ndarray

    def __post_init__(self):
        for name in NUISANCES:
            object.__setattr__(self, name, _vec(getattr(self, name)))

    @classmethod
    def exact(cls, truth: TrueComponents) -> "PluggedEstimates":
        return cls(truth.mu0_y, truth.mu0_a, truth.delta_a, truth.pi, truth.tau)


def oracle_second_stage(
    truth: TrueComponents,
    plugged: PluggedEstimates,
    index: Union[int, slice, Sequence[int], None] = None,
    clip: Optional[ClipConfig] = None,
):
    """Population regression of the MRIV pseudo-outcome on X.

    Evaluated at all points (``index=None``) or the selected ones. Plugged
    delta_A must be non-zero and pi strictly inside (0, 1); with ``clip`` the
    tighter runtime bounds |delta_A| >= floor and pi in [eps, 1 - eps] apply.
    """
    sel = slice(None) if index is None else index
    pi, mu1_y, mu0_y = truth.pi[sel], truth.mu1_y[sel], truth.mu0_y[sel]
    mu1_a, mu0_a = truth.mu1_a[sel], truth.mu0_a[sel]
    pi_h, d_h, t = plugged.pi[sel], plugged.delta_a[sel], plugged.tau_init[sel]
    m0y_h, m0a_h = plugged.mu0_y[sel], plugged.mu0_a[sel]

    values = [np.asarray(v, dtype=float) for v in (pi_h, d_h, t, m0y_h, m0a_h)]
    if not all(np.all(np.isfinite(v)) for v in values):
        raise OracleError("plugged values must be finite")
    lo, floor = (0.0, 0.0) if clip is None else (clip.propensity_eps, clip.delta_floor)
    if np.any(np.abs(d_h) <= 0) or np.any(np.abs(d_h) < floor - 1e-15):
        raise OracleError("bound violation: plugged delta_A too close to zero")
    if np.any(pi_h <= 0) or np.any(pi_h >= 1) or np.any(pi_h < lo - 1e-15) or np.any(pi_h > 1 - lo + 1e-15):
        raise OracleError("bound violation: plugged pi outside its bounds")

    out = (
        pi / (d_h * pi_h) * (mu1_y - mu1_a * t)
        + (1 - pi) / (d_h * (1 - pi_h)) * (mu0_a * t - mu0_y)
        + (m0a_h * t - m0y_h) / d_h * (pi / pi_h - (1 - pi) / (1 - pi_h))
        + t
    )
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class RobustnessScenario:
    """Which plugged nuisances are perturbed, and how strongly."""

    perturbed: FrozenSet[str]
    magnitude: float = 0.1
    seed: int = 0
    condition: Union[int, str] = "custom"

    def __post_init__(self):
        object.__setattr__(self, "perturbed", frozenset(self.perturbed))
        unknown = self.perturbed - set(NUISANCES)
        if unknown:
            raise OracleError(f"unknown nuisance(s): {sorted(unknown)}")
        if self.magnitude < 0:
            raise OracleError("magnitude must be non-negative")

    @classmethod
    def for_condition(cls, condition, magnitude: float = 0.1, seed: int = 0) -> "RobustnessScenario":
        """Perturb everything outside the condition's exact set ('negative' perturbs all five)."""
        if condition not in CONDITIONS:
            raise OracleError(f"unknown condition {condition!r}")
        return cls(frozenset(NUISANCES) - CONDITIONS[condition], magnitude, seed, condition)

    @property
    def is_negative_control(self) -> bool:
        return not any(req.isdisjoint(self.perturbed) for c, req in CONDITIONS.items() if c != "negative")


def perturb(truth: TrueComponents, scenario: RobustnessScenario, clip: ClipConfig = ClipConfig()) -> PluggedEstimates:
    """Additive Gaussian noise (SD = magnitude) on the perturbed nuisances.

    pi is perturbed on the logit scale and clamped to [eps, 1 - eps]; delta_A
    is pushed away from zero to |.| >= delta_floor. Noise for each nuisance
    is drawn in a fixed order, so results do not depend on which flags are set.
    """
    exact = PluggedEstimates.exact(truth)
    if scenario.magnitude == 0:
        return exact
    rng = np.random.default_rng(scenario.seed)
    noise = {name: rng.standard_normal(truth.n) * scenario.magnitude for name in NUISANCES}
    values = {}
    for name in NUISANCES:
        v = getattr(exact, name)
        if name not in scenario.perturbed:
            values[name] = v
        elif name == "pi":
            eps = clip.propensity_eps
            values[name] = np.clip(expit(logit(v) + noise[name]), eps, 1 - eps)
        elif name == "delta_a":
            values[name] = clip_delta(v + noise[name], clip.delta_floor)
        else:
            values[name] = v + noise[name]
    return PluggedEstimates(**values)


@dataclass(frozen=True, eq=False)
class RobustnessResult:
    scenario: RobustnessScenario
    errors: np.ndarray
    tolerance: float

    @property
    def max_abs_error(self) -> float:
        return float(np.max(self.errors))

    @property
    def passed(self) -> bool:
        return self.max_abs_error <= self.tolerance

    @property
    def point_passed(self) -> np.ndarray:
        return self.errors <= self.tolerance


def check_robustness(
    truth: TrueComponents,
    scenario: RobustnessScenario,
    tolerance: float = 1e-10,
    clip: ClipConfig = ClipConfig(),
) -> RobustnessResult:
    """Perturb per ``scenario`` and compare the oracle second stage with tau."""
    plugged = perturb(truth, scenario, clip)
    errors = np.abs(oracle_second_stage(truth, plugged) - truth.tau)
    return RobustnessResult(scenario, errors, tolerance)


def wald_identity_check(truth: TrueComponents) -> float:
    """max |delta_Y / delta_A - tau| over the points."""
    return float(np.max(np.abs(truth.delta_y / truth.delta_a - truth.tau)))


def write_robustness_report(results: Iterable[RobustnessResult], path) -> List[list]:
    """CSV ``scenario_id,condition,max_abs_error,pass``; returns the rows written."""
    rows = []
    for i, r in enumerate(results):
        rows.append([i, r.scenario.condition, repr(r.max_abs_error), "true" if r.passed else "false"])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "condition", "max_abs_error", "pass"])
        w.writerows(rows)
    return rows
