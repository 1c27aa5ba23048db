"""Synthetic data: GP-based simulator, semi-synthetic generator, Monte-Carlo self-check.

GP simulator (one draw per seed, all surfaces on the same point set):

    delta_Y ~ GP(Matern nu_delta_y),  mu0_Y ~ GP(Matern nu_mu0_y),
    f1, f0, g ~ GP(Matern nu_treatment)
    mu1_Y = delta_Y + mu0_Y,  mu1_A = 0.3 sigmoid(f1) + 0.7,  mu0_A = 0.3 sigmoid(f0),
    pi = sigmoid(g),  tau = delta_Y / delta_A

Treatments follow a threshold model on U + eps_A whose thresholds are chosen
so that P(A=1 | Z=i, X) = mu_i^A(X); outcomes are built so that
E[Y | Z=i, X] = mu_i^Y(X) while U confounds A and Y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky
from scipy.spatial.distance import cdist
from scipy.special import expit, gammaln, kve, ndtri

from mriv._seeding import stream
from mriv.dataset import Dataset
from mriv.oracle import TrueComponents

__all__ = [
    "SE_LIMIT_NU",
    "JITTERS",
    "GpError",
    "MaternParams",
    "GpDraw",
    "SimConfig",
    "matern",
    "matern_kernel",
    "matern_from_distance",
    "matern_bessel",
    "sample_gp",
    "components_from_latents",
    "build_components",
    "treatment_thresholds",
    "gen_treatments",
    "gen_outcomes",
    "simulate",
    "semi_synthetic",
    "conditional_draws",
    "MCReport",
    "mc_verify",
]

# from this smoothness on the kernel is replaced by its squared-exponential limit
SE_LIMIT_NU = 25.0
JITTERS = (1e-8, 1e-7, 1e-6)


class GpError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaternParams:
    lengthscale: float = 1.0
    nu: float = 1.5

    def __post_init__(self):
        if not (self.lengthscale > 0 and math.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise ValueError(f"nu must be positive, got {self.nu}")


def matern_bessel(d, params: MaternParams) -> np.ndarray:
    """Matern kernel through the modified Bessel function, evaluated in log space.

    Valid for every nu; at d = 0 (and below underflow distances) returns 1.
    """
    d = np.asarray(d, dtype=float)
    nu = params.nu
    s = np.sqrt(2.0 * nu) * d / params.lengthscale
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        safe = np.where(s > 0, s, 1.0)
        log_k = (1.0 - nu) * math.log(2.0) - gammaln(nu) + nu * np.log(safe) + np.log(kve(nu, safe)) - safe
        k = np.exp(log_k)
    k = np.where(np.isfinite(k), k, 1.0)
    return np.where(s > 0, np.minimum(k, 1.0), 1.0)


def matern_from_distance(d, params: MaternParams) -> np.ndarray:
    """Kernel value as a function of Euclidean distance."""
    d = np.asarray(d, dtype=float)
    r = d / params.lengthscale
    nu = params.nu
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        s = math.sqrt(3.0) * r
        return (1.0 + s) * np.exp(-s)
    if nu == 2.5:
        s = math.sqrt(5.0) * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)
    if nu >= SE_LIMIT_NU:
        return np.exp(-0.5 * r * r)
    return matern_bessel(d, params)


def matern(x1, x2, params: MaternParams) -> float:
    d = float(np.linalg.norm(np.atleast_1d(np.asarray(x1, dtype=float)) - np.atleast_1d(np.asarray(x2, dtype=float))))
    return float(matern_from_distance(d, params))


def _points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return pts.reshape(-1, 1) if pts.ndim == 1 else pts


def matern_kernel(A, B, params: MaternParams) -> np.ndarray:
    return matern_from_distance(cdist(_points(A), _points(B)), params)


@dataclass(frozen=True, eq=False)
class GpDraw:
    points: np.ndarray
    values: np.ndarray
    jitter: float = JITTERS[0]


def sample_gp(points, params: MaternParams, seed) -> GpDraw:
    """One joint zero-mean GP draw at ``points``.

    ``seed`` is an int or a numpy Generator. Jitter starts at 1e-8 and is
    raised to 1e-7 and 1e-6 if the Cholesky factorization fails.
    """
    pts = _points(points)
    if pts.shape[0] < 1:
        raise GpError("sample_gp needs at least one point")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    K = matern_kernel(pts, pts, params)
    eye = np.eye(pts.shape[0])
    for jitter in JITTERS:
        try:
            L = cholesky(K + jitter * eye, lower=True, check_finite=False)
            break
        except LinAlgError:
            continue
    else:
        raise GpError(f"kernel factorization failed with jitter up to {JITTERS[-1]:g} ({pts.shape[0]} points)")
    values = L @ rng.standard_normal(pts.shape[0])
    return GpDraw(pts, values, jitter)


@dataclass(frozen=True)
class SimConfig:
    """GP simulator settings. ``nu_propensity=None`` uses ``nu_treatment`` for pi."""

    n: int = 3000
    p: int = 1
    nu_delta_y: float = 50.0
    nu_mu0_y: float = 1.5
    nu_treatment: float = 50.0
    nu_propensity: Optional[float] = None
    lengthscale: float = 1.0
    alpha_u: float = 1.0
    u_sd: float = 0.2
    eps_a_sd: float = 0.1
    eps_y_sd: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"n must be at least 2, got {self.n}")
        if self.p < 1:
            raise ValueError(f"p must be at least 1, got {self.p}")
        for name in ("nu_delta_y", "nu_mu0_y", "nu_treatment", "lengthscale", "u_sd", "eps_a_sd", "eps_y_sd"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.nu_propensity is not None and not self.nu_propensity > 0:
            raise ValueError("nu_propensity must be positive")
        if not self.alpha_u >= 0:
            raise ValueError(f"alpha_u must be non-negative, got {self.alpha_u}")

    def kernel(self, nu: float) -> MaternParams:
        return MaternParams(self.lengthscale, nu)


def components_from_latents(points, delta_y, mu0_y, f1, f0, g) -> TrueComponents:
    """Map the five latent surfaces to the nuisance functions."""
    mu0_y = np.asarray(mu0_y, dtype=float)
    return TrueComponents(
        points,
        mu1_y=np.asarray(delta_y, dtype=float) + mu0_y,
        mu0_y=mu0_y,
        mu1_a=0.3 * expit(f1) + 0.7,
        mu0_a=0.3 * expit(f0),
        pi=expit(g),
    )


def build_components(points, cfg: SimConfig) -> TrueComponents:
    """Draw all latent GPs jointly over ``points`` (seeded by ``cfg.seed``)."""
    pts = _points(points)
    nu_pi = cfg.nu_treatment if cfg.nu_propensity is None else cfg.nu_propensity
    draws = {
        role: sample_gp(pts, cfg.kernel(nu), stream(cfg.seed, "gp-" + role)).values
        for role, nu in (
            ("delta_y", cfg.nu_delta_y),
            ("mu0_y", cfg.nu_mu0_y),
            ("f1", cfg.nu_treatment),
            ("f0", cfg.nu_treatment),
            ("g", nu_pi),
        )
    }
    return components_from_latents(pts, **draws)


def treatment_thresholds(mu_a, u_sd: float = 0.2, eps_a_sd: float = 0.1) -> np.ndarray:
    """alpha with P(U + eps_A > alpha) = mu_a."""
    return ndtri(1.0 - np.asarray(mu_a, dtype=float)) * math.hypot(u_sd, eps_a_sd)


def gen_treatments(truth: TrueComponents, z, u, rng: np.random.Generator, eps_a_sd: float = 0.1, u_sd: float = 0.2):
    """A = 1{U + eps_A > alpha_Z(X)} with fresh eps_A ~ N(0, eps_a_sd^2) per row."""
    z = np.asarray(z)
    alpha = np.where(
        z == 1,
        treatment_thresholds(truth.mu1_a, u_sd, eps_a_sd),
        treatment_thresholds(truth.mu0_a, u_sd, eps_a_sd),
    )
    eps = rng.standard_normal(z.shape[0]) * eps_a_sd
    return (np.asarray(u) + eps > alpha).astype(float)


def gen_outcomes(truth: TrueComponents, u, a, alpha_u: float, rng: np.random.Generator, eps_y_sd: float = 0.3):
    """Outcomes whose instrument-arm means are mu_i^Y, confounded through alpha_u * U."""
    m1y, m0y, m1a, m0a = truth.mu1_y, truth.mu0_y, truth.mu1_a, truth.mu0_a
    da = truth.delta_a
    treated = ((m1a - 1.0) * m0y - m0a * m1y + m1y) / da
    untreated = (m1a * m0y - m0a * m1y) / da
    a = np.asarray(a, dtype=float)
    eps = rng.standard_normal(a.shape[0]) * eps_y_sd
    return a * treated + (1.0 - a) * untreated + alpha_u * np.asarray(u) + eps


TreatmentFn = Callable[..., np.ndarray]


def _draw_rows(truth: TrueComponents, seed: int, alpha_u: float, u_sd, eps_a_sd, eps_y_sd, z=None, treatment_fn=None):
    n = truth.n
    if z is None:
        z = (stream(seed, "z").random(n) < truth.pi).astype(float)
    u = stream(seed, "u").standard_normal(n) * u_sd
    a = (treatment_fn or gen_treatments)(truth, z, u, stream(seed, "eps-a"), eps_a_sd=eps_a_sd, u_sd=u_sd)
    y = gen_outcomes(truth, u, a, alpha_u, stream(seed, "eps-y"), eps_y_sd)
    return z, a, y


def simulate(cfg: SimConfig, test_points=None) -> Tuple[Dataset, TrueComponents]:
    """n observations with X ~ N(0, I_p) and the oracle surfaces.

    The returned TrueComponents cover the n sample points followed by any
    extra ``test_points`` (one joint GP draw over both).
    """
    X = stream(cfg.seed, "x").standard_normal((cfg.n, cfg.p))
    pts = X if test_points is None else np.vstack([X, _points(test_points)])
    truth = build_components(pts, cfg)
    sample = truth.subset(np.arange(cfg.n))
    z, a, y = _draw_rows(sample, cfg.seed, cfg.alpha_u, cfg.u_sd, cfg.eps_a_sd, cfg.eps_y_sd)
    return Dataset(X, z, a, y, sample.tau), truth


def semi_synthetic_components(X) -> TrueComponents:
    X = _points(X)
    x1 = X[:, 0]
    rest = np.sum(X[:, 1:] ** 2, axis=1)
    return TrueComponents(
        X,
        mu1_y=0.5 * x1**2 + rest,
        mu0_y=-0.5 * x1**2 + rest,
        mu1_a=0.3 * expit(x1) + 0.7,
        mu0_a=0.3 * expit(x1),
        pi=np.full(X.shape[0], 0.5),
        tau=x1**2 / 0.7,
    )


def semi_synthetic(n: int, seed: int, alpha_u: float = 1.0, p: int = 5) -> Tuple[Dataset, TrueComponents]:
    """Closed-form surfaces on standard-normal covariates with a fair-coin instrument."""
    if n < 10:
        raise ValueError(f"semi-synthetic generator needs n >= 10, got {n}")
    if p < 1:
        raise ValueError("p must be at least 1")
    X = stream(seed, "x").standard_normal((n, p))
    truth = semi_synthetic_components(X)
    z, a, y = _draw_rows(truth, seed, alpha_u, 0.2, 0.1, 0.3)
    return Dataset(X, z, a, y, truth.tau), truth


def conditional_draws(
    truth: TrueComponents,
    index: int,
    m: int,
    seed: int,
    alpha_u: float = 1.0,
    u_sd: float = 0.2,
    eps_a_sd: float = 0.1,
    eps_y_sd: float = 0.3,
    treatment_fn: Optional[TreatmentFn] = None,
):
    """m draws of (Z, A, Y) at the single covariate point ``truth.points[index]``."""
    at = truth.subset(np.full(m, index))
    return _draw_rows(at, seed, alpha_u, u_sd, eps_a_sd, eps_y_sd, treatment_fn=treatment_fn)


@dataclass(frozen=True)
class MCReport:
    """Per-bin, per-arm comparisons: (bin, arm, quantity, empirical, expected, se, within)."""

    rows: List[tuple] = field(repr=False)
    pass_rate_a: float
    pass_rate_y: float
    required: float = 0.95

    @property
    def passed(self) -> bool:
        return self.pass_rate_a >= self.required and self.pass_rate_y >= self.required


def mc_verify(cfg: SimConfig, bins: int = 10, m: int = 100_000, treatment_fn: Optional[TreatmentFn] = None) -> MCReport:
    """Check E[A | Z=i, X] = mu_i^A and E[Y | Z=i, X] = mu_i^Y by simulation.

    Bins are fixed covariate points at the standard-normal quantiles
    (k + 0.5) / bins along the first coordinate; each bin gets m conditional
    draws. ``treatment_fn`` replaces :func:`gen_treatments` (negative controls).
    """
    if m < 10_000:
        raise ValueError(f"mc_verify needs m >= 1e4, got {m}")
    if bins < 1:
        raise ValueError("bins must be positive")
    pts = np.zeros((bins, cfg.p))
    pts[:, 0] = ndtri((np.arange(bins) + 0.5) / bins)
    truth = build_components(pts, cfg)
    rows = []
    for b in range(bins):
        z, a, y = conditional_draws(
            truth, b, m, cfg.seed + 7919 * (b + 1), cfg.alpha_u, cfg.u_sd, cfg.eps_a_sd, cfg.eps_y_sd, treatment_fn
        )
        for arm, mu_a, mu_y in ((1, truth.mu1_a[b], truth.mu1_y[b]), (0, truth.mu0_a[b], truth.mu0_y[b])):
            sel = z == arm
            k = int(sel.sum())
            if k < 2:
                rows.append((b, arm, "A", float("nan"), mu_a, float("nan"), False))
                rows.append((b, arm, "Y", float("nan"), mu_y, float("nan"), False))
                continue
            for name, values, expected in (("A", a[sel], mu_a), ("Y", y[sel], mu_y)):
                mean = float(values.mean())
                se = float(values.std(ddof=1) / math.sqrt(k))
                # a degenerate arm (all A equal) has se 0; fall back to the binomial SE of the target
                if se == 0 and name == "A":
                    se = math.sqrt(expected * (1 - expected) / k)
                rows.append((b, arm, name, mean, float(expected), se, abs(mean - expected) <= 3 * se))
    rate = {q: float(np.mean([r[6] for r in rows if r[2] == q])) for q in ("A", "Y")}
    return MCReport(rows, rate["A"], rate["Y"])
