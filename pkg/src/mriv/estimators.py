"""CATE estimators for the binary-instrument setting.

The central piece is the multiply robust (MRIV) meta-learner: fit nuisance
functions, build the pseudo-outcome

    Y_MR = (2Z - 1) / delta_A(X)
           * (Y - mu0_Y(X) - tau_init(X) * (A - mu0_A(X))) / (Z pi(X) + (1 - Z)(1 - pi(X)))
           + tau_init(X)

and regress it on X. Baselines: plug-in Wald, T-learner, DR-learner and the
DRIV pseudo-outcome regression.

Nuisance fits draw their seeds from ``(seed, role)`` only, so two estimators
built with the same seed and spec share identical first-stage fits. The Wald
baseline therefore coincides with the Wald initialiser used inside MRIV.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Union

import numpy as np

from mriv._seeding import role_seed
from mriv.dataset import Dataset
from mriv.regress import RegressorSpec, fit_classifier, fit_regressor

__all__ = [
    "KINDS",
    "ClipConfig",
    "NuisanceSet",
    "CateEstimator",
    "EstimationError",
    "clip_delta",
    "clip_propensity",
    "estimate_nuisances",
    "mr_pseudo_outcome",
    "mr_pseudo_outcomes",
    "dr_pseudo_outcome",
    "driv_pseudo_outcome",
    "fit_mriv",
    "fit_mriv_crossfit",
    "crossfit_folds",
    "fit_wald",
    "plugin_wald",
    "fit_tlearner",
    "fit_drlearner",
    "fit_driv",
    "predict_cate",
    "role_seed",
]

KINDS = ("mriv", "mriv-crossfit", "wald", "t-learner", "dr-learner", "driv")

Predictor = Callable[[np.ndarray], np.ndarray]

DEFAULT_NUISANCE_SPEC = RegressorSpec(variant="mlp")
DEFAULT_STAGE2_SPEC = RegressorSpec(variant="kernel-ridge")


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClipConfig:
    """Runtime guards for the boundedness conditions on the nuisances.

    delta_floor: minimum |delta_A| (sign kept, sign(0) = +1).
    propensity_eps: pi is clamped to [eps, 1 - eps].
    tau_cap: optional bound on |tau_init|.
    """

    delta_floor: float = 0.05
    propensity_eps: float = 0.01
    tau_cap: Optional[float] = None

    def __post_init__(self):
        if not self.delta_floor > 0:
            raise ValueError("delta_floor must be positive")
        if not 0 < self.propensity_eps < 0.5:
            raise ValueError("propensity_eps must lie in (0, 0.5)")
        if self.tau_cap is not None and not self.tau_cap > 0:
            raise ValueError("tau_cap must be positive")


def clip_delta(v, floor: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    sign = np.where(v >= 0, 1.0, -1.0)
    return sign * np.maximum(np.abs(v), floor)


def clip_propensity(p, eps: float) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


def cap_tau(t, cap: Optional[float]) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return t if cap is None else np.clip(t, -cap, cap)


def _matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


@dataclass(frozen=True)
class NuisanceSet:
    """Stage-1 predictors. Each field maps an (m, p) matrix to m values."""

    pi_hat: Predictor
    mu0Y_hat: Predictor
    mu0A_hat: Predictor
    deltaA_hat: Predictor
    mu1Y_hat: Optional[Predictor] = None
    mu1A_hat: Optional[Predictor] = None

    def evaluate(self, X, clip: ClipConfig) -> Dict[str, np.ndarray]:
        X = _matrix(X)
        return {
            "pi": clip_propensity(self.pi_hat(X), clip.propensity_eps),
            "mu0_y": np.asarray(self.mu0Y_hat(X), dtype=float),
            "mu0_a": np.asarray(self.mu0A_hat(X), dtype=float),
            "delta_a": clip_delta(self.deltaA_hat(X), clip.delta_floor),
        }

    def wald(self, clip: ClipConfig) -> Predictor:
        if self.mu1Y_hat is None or self.mu1A_hat is None:
            raise EstimationError("Wald plug-in needs mu1Y_hat and mu1A_hat")

        def tau(X):
            X = _matrix(X)
            num = self.mu1Y_hat(X) - self.mu0Y_hat(X)
            den = clip_delta(self.mu1A_hat(X) - self.mu0A_hat(X), clip.delta_floor)
            return cap_tau(num / den, clip.tau_cap)

        return tau


@dataclass(frozen=True, eq=False)
class CateEstimator:
    kind: str
    p: int
    predictor: Predictor = field(repr=False)
    provenance: dict = field(default_factory=dict)
    # fitted sub-models kept for inspection (initial estimator, folds, ...)
    parts: dict = field(default_factory=dict, repr=False)

    def predict(self, X) -> np.ndarray:
        X = _matrix(X)
        if X.shape[1] != self.p:
            raise EstimationError(f"dimension mismatch: estimator fitted on p={self.p}, got {X.shape[1]}")
        if X.shape[0] == 0:
            return np.empty(0)
        return np.asarray(self.predictor(X), dtype=float)

    __call__ = predict


def predict_cate(e: CateEstimator, X) -> np.ndarray:
    return e.predict(X)


def _arm(d: Dataset, column: np.ndarray, value: int, what: str, minimum: int = 2):
    mask = column == value
    if mask.sum() < minimum:
        raise EstimationError(f"{what}={value} arm has {int(mask.sum())} rows, need at least {minimum}")
    return mask


def _fit_y(spec, seed, role, X, y):
    return fit_regressor(spec.with_seed(role_seed(seed, role)), X, y)


def _fit_p(spec, seed, role, X, labels):
    return fit_classifier(spec.with_seed(role_seed(seed, role)), X, labels, allow_constant=True)


def estimate_nuisances(
    train: Dataset,
    spec: RegressorSpec = DEFAULT_NUISANCE_SPEC,
    seed: int = 0,
    with_propensity: bool = True,
    with_arm1_outcome: bool = True,
) -> NuisanceSet:
    """Fit pi (X -> Z), the per-instrument-arm outcome and treatment regressions."""
    X, z = train.covariates, train.instrument
    minimum = max(2, spec.k_neighbors) if spec.variant == "k-nearest" else 2
    m0 = _arm(train, z, 0, "instrument", minimum)
    m1 = _arm(train, z, 1, "instrument", minimum)
    mu0_y = _fit_y(spec, seed, "mu0_y", X[m0], train.outcome[m0])
    mu0_a = _fit_p(spec, seed, "mu0_a", X[m0], train.treatment[m0])
    mu1_a = _fit_p(spec, seed, "mu1_a", X[m1], train.treatment[m1])
    mu1_y = _fit_y(spec, seed, "mu1_y", X[m1], train.outcome[m1]) if with_arm1_outcome else None
    if with_propensity:
        pi = _fit_p(spec, seed, "pi", X, z)
    else:
        def pi(Xq):
            raise EstimationError("propensity not fitted")

    def delta_a(Xq):
        return mu1_a(Xq) - mu0_a(Xq)

    return NuisanceSet(pi, mu0_y, mu0_a, delta_a, mu1_y, mu1_a)


def mr_pseudo_outcome(z, a, y, pi, mu0_y, mu0_a, delta_a, tau_init, clip: Optional[ClipConfig] = None):
    """Multiply robust pseudo-outcome, elementwise over arrays or scalars.

    With ``clip`` given, pi and delta_a are clipped first; otherwise the
    caller is responsible for keeping the denominators away from zero.
    """
    z, a, y = (np.asarray(v, dtype=float) for v in (z, a, y))
    if clip is not None:
        pi = clip_propensity(pi, clip.propensity_eps)
        delta_a = clip_delta(delta_a, clip.delta_floor)
    residual = y - (mu0_y + tau_init * (a - mu0_a))
    weight = z * pi + (1.0 - z) * (1.0 - pi)
    return (2.0 * z - 1.0) / delta_a * residual / weight + tau_init


def mr_pseudo_outcomes(d: Dataset, nuis: NuisanceSet, tau_init: Predictor, clip: ClipConfig) -> np.ndarray:
    v = nuis.evaluate(d.covariates, clip)
    t = cap_tau(tau_init(d.covariates), clip.tau_cap)
    return mr_pseudo_outcome(d.instrument, d.treatment, d.outcome, v["pi"], v["mu0_y"], v["mu0_a"], v["delta_a"], t)


def _as_predictor(init) -> Predictor:
    if isinstance(init, CateEstimator):
        return init.predict
    return init


def fit_mriv(
    train: Dataset,
    init: Union[CateEstimator, Predictor, None] = None,
    nuisance_spec: RegressorSpec = DEFAULT_NUISANCE_SPEC,
    stage2_spec: RegressorSpec = DEFAULT_STAGE2_SPEC,
    clip: ClipConfig = ClipConfig(),
    seed: int = 0,
    nuisances: Optional[NuisanceSet] = None,
) -> CateEstimator:
    """MRIV on the full training sample.

    ``nuisances`` overrides the stage-1 fits (e.g. oracle functions or the
    heads of a trained MRIV-Net); ``init`` defaults to the Wald plug-in built
    from the same stage-1 fits.
    """
    if nuisances is None:
        nuisances = estimate_nuisances(train, nuisance_spec, seed, with_arm1_outcome=init is None)
    tau_init = nuisances.wald(clip) if init is None else _as_predictor(init)
    pseudo = mr_pseudo_outcomes(train, nuisances, tau_init, clip)
    model = fit_regressor(stage2_spec.with_seed(role_seed(seed, "stage2")), train.covariates, pseudo)
    return CateEstimator(
        "mriv",
        train.p,
        model.predict,
        provenance={
            "nuisance_spec": nuisance_spec,
            "stage2_spec": stage2_spec,
            "clip": clip,
            "seed": seed,
            "init": "wald" if init is None else "given",
        },
        parts={"init": tau_init, "nuisances": nuisances, "pseudo_outcomes": pseudo, "stage2": model},
    )


def crossfit_folds(n: int, seed: int):
    """Three near-equal folds and the three rotations of their roles.

    Each rotation is a dict with index arrays ``regression``, ``nuisance1``
    (tau_init, mu0_Y, mu0_A) and ``nuisance2`` (delta_A, pi).
    """
    perm = np.random.default_rng(seed).permutation(n)
    folds = [np.sort(f) for f in np.array_split(perm, 3)]
    return [
        {"regression": folds[r], "nuisance1": folds[(r + 1) % 3], "nuisance2": folds[(r + 2) % 3]}
        for r in range(3)
    ]


def fit_mriv_crossfit(
    d: Dataset,
    nuisance_spec: RegressorSpec = DEFAULT_NUISANCE_SPEC,
    stage2_spec: RegressorSpec = DEFAULT_STAGE2_SPEC,
    clip: ClipConfig = ClipConfig(),
    seed: int = 0,
) -> CateEstimator:
    """Three-way cross-fitted MRIV; the final CATE averages the three rotations."""
    if d.n < 30:
        raise EstimationError(f"cross-fitting needs n >= 30, got {d.n}")
    rotations = crossfit_folds(d.n, role_seed(seed, "crossfit-folds"))
    members = []
    for r, roles in enumerate(rotations):
        s = role_seed(seed, f"crossfit-{r}")
        part1 = estimate_nuisances(d.subset(roles["nuisance1"]), nuisance_spec, role_seed(s, "n1"), with_propensity=False)
        part2 = estimate_nuisances(
            d.subset(roles["nuisance2"]), nuisance_spec, role_seed(s, "n2"), with_arm1_outcome=False
        )
        nuis = NuisanceSet(part2.pi_hat, part1.mu0Y_hat, part1.mu0A_hat, part2.deltaA_hat)
        tau_init = part1.wald(clip)
        reg = d.subset(roles["regression"])
        pseudo = mr_pseudo_outcomes(reg, nuis, tau_init, clip)
        model = fit_regressor(stage2_spec.with_seed(role_seed(s, "stage2")), reg.covariates, pseudo)
        members.append(model.predict)

    def average(X):
        return sum(m(X) for m in members) / len(members)

    return CateEstimator(
        "mriv-crossfit",
        d.p,
        average,
        provenance={"nuisance_spec": nuisance_spec, "stage2_spec": stage2_spec, "clip": clip, "seed": seed},
        parts={"members": members, "rotations": rotations},
    )


def plugin_wald(nuisances: NuisanceSet, p: int, clip: ClipConfig = ClipConfig()) -> CateEstimator:
    """Wald estimator from already-available components (fitted or oracle)."""
    return CateEstimator("wald", p, nuisances.wald(clip), provenance={"clip": clip}, parts={"nuisances": nuisances})


def fit_wald(
    train: Dataset, spec: RegressorSpec = DEFAULT_NUISANCE_SPEC, clip: ClipConfig = ClipConfig(), seed: int = 0
) -> CateEstimator:
    """(mu1_Y - mu0_Y) / clip(mu1_A - mu0_A) with separately fitted arm models."""
    nuis = estimate_nuisances(train, spec, seed, with_propensity=False)
    est = plugin_wald(nuis, train.p, clip)
    est.provenance.update(spec=spec, seed=seed)
    return est


def _treatment_arm_models(train: Dataset, spec: RegressorSpec, seed: int):
    X, a = train.covariates, train.treatment
    minimum = max(2, spec.k_neighbors) if spec.variant == "k-nearest" else 2
    m1 = _arm(train, a, 1, "treatment", minimum)
    m0 = _arm(train, a, 0, "treatment", minimum)
    mu1 = _fit_y(spec, seed, "t_mu1", X[m1], train.outcome[m1])
    mu0 = _fit_y(spec, seed, "t_mu0", X[m0], train.outcome[m0])
    return mu1, mu0


def fit_tlearner(train: Dataset, spec: RegressorSpec = DEFAULT_NUISANCE_SPEC, seed: int = 0) -> CateEstimator:
    """Difference of outcome regressions fit per treatment arm (ignores Z)."""
    mu1, mu0 = _treatment_arm_models(train, spec, seed)
    return CateEstimator(
        "t-learner",
        train.p,
        lambda X: mu1(X) - mu0(X),
        provenance={"spec": spec, "seed": seed},
        parts={"mu1": mu1, "mu0": mu0},
    )


def dr_pseudo_outcome(a, y, mu1, mu0, prop, eps: Optional[float] = None):
    """DR-learner pseudo-outcome with treatment propensity ``prop`` = P(A=1 | X)."""
    a, y = np.asarray(a, dtype=float), np.asarray(y, dtype=float)
    if eps is not None:
        prop = clip_propensity(prop, eps)
    w1, w0 = a / prop, (1.0 - a) / (1.0 - prop)
    return (w1 - w0) * y + (1.0 - w1) * mu1 - (1.0 - w0) * mu0


def fit_drlearner(
    train: Dataset,
    nuisance_spec: RegressorSpec = DEFAULT_NUISANCE_SPEC,
    stage2_spec: RegressorSpec = DEFAULT_STAGE2_SPEC,
    clip: ClipConfig = ClipConfig(),
    seed: int = 0,
) -> CateEstimator:
    X = train.covariates
    mu1, mu0 = _treatment_arm_models(train, nuisance_spec, seed)
    prop = _fit_p(nuisance_spec, seed, "a_propensity", X, train.treatment)
    pseudo = dr_pseudo_outcome(train.treatment, train.outcome, mu1(X), mu0(X), prop(X), clip.propensity_eps)
    model = fit_regressor(stage2_spec.with_seed(role_seed(seed, "stage2")), X, pseudo)
    return CateEstimator(
        "dr-learner",
        train.p,
        model.predict,
        provenance={"nuisance_spec": nuisance_spec, "stage2_spec": stage2_spec, "clip": clip, "seed": seed},
        parts={"pseudo_outcomes": pseudo},
    )


def driv_pseudo_outcome(z, a, y, q_hat, p_hat, pi_hat, f_hat, tau_init, delta_floor: Optional[float] = None):
    """DRIV pseudo-outcome, read as

        tau_init + (Y - q - tau_init (A - p)) (Z - pi) / (f - p pi)

    with the denominator (the conditional Z-A covariance) optionally clipped
    away from zero.
    """
    z, a, y = (np.asarray(v, dtype=float) for v in (z, a, y))
    den = f_hat - p_hat * pi_hat
    if delta_floor is not None:
        den = clip_delta(den, delta_floor)
    return tau_init + (y - q_hat - tau_init * (a - p_hat)) * (z - pi_hat) / den


def fit_driv(
    train: Dataset,
    nuisance_spec: RegressorSpec = DEFAULT_NUISANCE_SPEC,
    stage2_spec: RegressorSpec = DEFAULT_STAGE2_SPEC,
    clip: ClipConfig = ClipConfig(),
    seed: int = 0,
    init: Union[CateEstimator, Predictor, None] = None,
) -> CateEstimator:
    """DRIV regression with the Wald plug-in as default initial estimator.

    The covariance denominator f - p * pi is clipped at ``clip.delta_floor``.
    """
    X, z, a = train.covariates, train.instrument, train.treatment
    nuis = estimate_nuisances(train, nuisance_spec, seed, with_arm1_outcome=init is None)
    tau_init = nuis.wald(clip) if init is None else _as_predictor(init)
    q = _fit_y(nuisance_spec, seed, "driv_q", X, train.outcome)
    p = _fit_p(nuisance_spec, seed, "driv_p", X, a)
    f = _fit_p(nuisance_spec, seed, "driv_f", X, a * z)
    pi = clip_propensity(nuis.pi_hat(X), clip.propensity_eps)
    pseudo = driv_pseudo_outcome(
        z, a, train.outcome, q(X), p(X), pi, f(X), cap_tau(tau_init(X), clip.tau_cap), clip.delta_floor
    )
    model = fit_regressor(stage2_spec.with_seed(role_seed(seed, "stage2")), X, pseudo)
    return CateEstimator(
        "driv",
        train.p,
        model.predict,
        provenance={
            "nuisance_spec": nuisance_spec,
            "stage2_spec": stage2_spec,
            "clip": clip,
            "seed": seed,
            "note": "reference implementation, formula as interpreted",
        },
        parts={"init": tau_init, "pseudo_outcomes": pseudo},
    )
