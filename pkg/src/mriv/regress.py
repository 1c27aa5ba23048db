"""Pluggable regression and probability backends used by every estimator stage.

Four variants share one :class:`RegressorSpec`:

* ``ridge``: linear least squares with an unpenalized intercept (classifier:
  L2-penalized logistic regression fit by a quasi-Newton gradient method);
* ``kernel-ridge``: squared-exponential kernel ridge regression, length-scale
  fixed or set by the median heuristic;
* ``k-nearest``: neighbour averaging;
* ``mlp``: two ReLU hidden layers trained with Adam (squared loss, or BCE on a
  sigmoid head for classification).

All fits are deterministic given (spec, data).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.spatial.distance import cdist, pdist
from scipy.special import expit
from sklearn.neighbors import KNeighborsRegressor

from mriv import _nn
from mriv._nn import PROB_CLAMP, GradientCheck

__all__ = [
    "RegressorSpec",
    "FittedRegressor",
    "FittedClassifier",
    "RegressionError",
    "fit_regressor",
    "fit_classifier",
    "gradient_check",
    "median_heuristic",
    "default_hidden_sizes",
    "PROB_CLAMP",
]

VARIANTS = ("ridge", "kernel-ridge", "k-nearest", "mlp")
MEDIAN_HEURISTIC = "median-heuristic"
# pairwise distances grow quadratically; larger samples are subsampled
MEDIAN_HEURISTIC_MAX_POINTS = 2000


class RegressionError(RuntimeError):
    """Backend failure: singular system, non-finite loss, bad input shape."""


@dataclass(frozen=True)
class RegressorSpec:
    variant: str = "kernel-ridge"
    # None selects the variant default: 1e-3 * n for kernel-ridge, 1e-6 otherwise
    ridge_penalty: Optional[float] = None
    kernel_lengthscale: Union[float, str] = MEDIAN_HEURISTIC
    k_neighbors: int = 10
    # None selects (5 * max(p, 8), 5 * max(p, 8))
    mlp_hidden_sizes: Optional[Tuple[int, int]] = None
    mlp_learning_rate: float = 1e-3
    mlp_epochs: int = 100
    mlp_batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown regressor variant {self.variant!r}; expected one of {VARIANTS}")
        if self.ridge_penalty is not None and not self.ridge_penalty >= 0:
            raise ValueError("ridge_penalty must be non-negative")
        if isinstance(self.kernel_lengthscale, str):
            if self.kernel_lengthscale != MEDIAN_HEURISTIC:
                raise ValueError(f"kernel_lengthscale must be positive or {MEDIAN_HEURISTIC!r}")
        elif not self.kernel_lengthscale > 0:
            raise ValueError("kernel_lengthscale must be positive")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be a positive integer")
        if self.mlp_hidden_sizes is not None:
            hs = tuple(int(h) for h in self.mlp_hidden_sizes)
            if len(hs) != 2 or min(hs) < 1:
                raise ValueError("mlp_hidden_sizes must be a pair of positive integers")
            object.__setattr__(self, "mlp_hidden_sizes", hs)
        if not self.mlp_learning_rate > 0:
            raise ValueError("mlp_learning_rate must be positive")
        if self.mlp_epochs < 1 or self.mlp_batch_size < 1:
            raise ValueError("mlp_epochs and mlp_batch_size must be positive integers")

    def with_seed(self, seed: int) -> "RegressorSpec":
        return replace(self, seed=int(seed))

    def penalty(self, n: int) -> float:
        if self.ridge_penalty is not None:
            return float(self.ridge_penalty)
        return 1e-3 * n if self.variant == "kernel-ridge" else 1e-6

    def hidden_sizes(self, p: int) -> Tuple[int, int]:
        return self.mlp_hidden_sizes or default_hidden_sizes(p)

    def to_items(self) -> dict:
        """Flat ``key -> str`` mapping used by the harness config files."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out


def default_hidden_sizes(p: int) -> Tuple[int, int]:
    h = 5 * max(p, 8)
    return (h, h)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise RegressionError(f"expected a 2-D covariate matrix, got shape {X.shape}")
    return X


def _check_training(X, y, minimum: int):
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise RegressionError(f"{X.shape[0]} covariate rows but {y.shape[0]} targets")
    if X.shape[0] < minimum:
        raise RegressionError(f"need at least {minimum} rows to fit, got {X.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise RegressionError("non-finite training data")
    return X, y


class _Standardizer:
    def __init__(self, X: np.ndarray):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


# ---------------------------------------------------------------------------
# ridge


class _Ridge:
    def __init__(self, X, y, lam):
        self.x_mean = X.mean(axis=0)
        self.y_mean = y.mean()
        Xc = X - self.x_mean
        gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
        try:
            factor = scipy.linalg.cho_factor(gram)
        except np.linalg.LinAlgError:
            raise RegressionError("singular normal equations (use ridge_penalty > 0)") from None
        if lam == 0 and np.linalg.cond(gram) > 1e12:
            raise RegressionError("singular normal equations (use ridge_penalty > 0)")
        self.coef = scipy.linalg.cho_solve(factor, Xc.T @ (y - self.y_mean))
        self.intercept = self.y_mean - self.x_mean @ self.coef

    def __call__(self, X):
        return X @ self.coef + self.intercept


class _Logistic:
    def __init__(self, X, labels, lam):
        self.std = _Standardizer(X)
        Xs = self.std(X)
        n, p = Xs.shape

        def objective(theta):
            w, b = theta[:p], theta[p]
            s = Xs @ w + b
            # log(1 + e^s) - y s, stable
            loss = np.sum(np.logaddexp(0.0, s) - labels * s) + lam * w @ w
            r = expit(s) - labels
            return loss, np.concatenate([Xs.T @ r + 2 * lam * w, [r.sum()]])

        m = np.clip(labels.mean(), PROB_CLAMP, 1 - PROB_CLAMP)
        theta0 = np.concatenate([np.zeros(p), [np.log(m / (1 - m))]])
        res = scipy.optimize.minimize(
            objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": 1000, "gtol": 1e-10}
        )
        if not np.all(np.isfinite(res.x)):
            raise RegressionError("non-finite loss while fitting logistic regression")
        self.w, self.b = res.x[:p], res.x[p]

    def __call__(self, X):
        return expit(self.std(X) @ self.w + self.b)


# ---------------------------------------------------------------------------
# kernel ridge


def median_heuristic(X, rng: Optional[np.random.Generator] = None) -> float:
    """Median of the pairwise Euclidean distances between distinct rows."""
    X = _as_matrix(X)
    if X.shape[0] > MEDIAN_HEURISTIC_MAX_POINTS:
        rng = rng or np.random.default_rng(0)
        X = X[rng.choice(X.shape[0], MEDIAN_HEURISTIC_MAX_POINTS, replace=False)]
    d = pdist(X)
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def se_kernel(A: np.ndarray, B: np.ndarray, lengthscale: float) -> np.ndarray:
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * lengthscale**2))


class _KernelRidge:
    def __init__(self, X, y, lam, lengthscale):
        self.X = X
        self.lengthscale = lengthscale
        self.y_mean = y.mean()
        K = se_kernel(X, X, lengthscale)
        K[np.diag_indices_from(K)] += lam
        try:
            factor = scipy.linalg.cho_factor(K)
        except np.linalg.LinAlgError:
            raise RegressionError("kernel system not positive definite (increase ridge_penalty)") from None
        self.dual = scipy.linalg.cho_solve(factor, y - self.y_mean)

    def __call__(self, X):
        return self.y_mean + se_kernel(X, self.X, self.lengthscale) @ self.dual


# ---------------------------------------------------------------------------
# MLP


class _MLP:
    """Two hidden ReLU layers; squared loss or BCE on a sigmoid head."""

    def __init__(self, X, y, spec: RegressorSpec, classify: bool):
        self.classify = classify
        self.std = _Standardizer(X)
        if classify:
            self.y_shift, self.y_scale = 0.0, 1.0
        else:
            self.y_shift = y.mean()
            self.y_scale = y.std() if y.std() > 0 else 1.0
        Xs = self.std(X)
        ys = (y - self.y_shift) / self.y_scale
        rng = np.random.default_rng(spec.seed)
        sizes = [X.shape[1], *spec.hidden_sizes(X.shape[1]), 1]
        self.params = _nn.init_dense(rng, sizes)
        self.loss_trace = train_dense(self.params, Xs, ys, spec, classify, rng)

    def raw(self, X):
        out, _ = _nn.dense_forward(self.params, self.std(X))
        return out[:, 0]

    def __call__(self, X):
        r = self.raw(X)
        return expit(r) if self.classify else self.y_shift + self.y_scale * r


def dense_loss_and_grads(params, X, y, classify: bool, mean: bool = True):
    out, cache = _nn.dense_forward(params, X)
    s = out[:, 0]
    if classify:
        per_row, d = _nn.bce_from_logits(s, y)
    else:
        per_row, d = (s - y) ** 2, 2.0 * (s - y)
    scale = 1.0 / len(y) if mean else 1.0
    grads, _ = _nn.dense_backward(params, cache, (d * scale)[:, None])
    return per_row.sum() * scale, grads


def train_dense(params, X, y, spec: RegressorSpec, classify: bool, rng) -> list:
    opt = _nn.Adam(params, spec.mlp_learning_rate)
    n = X.shape[0]
    batch = min(spec.mlp_batch_size, n)
    trace = []
    for epoch in range(spec.mlp_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, grads = dense_loss_and_grads(params, X[idx], y[idx], classify)
            if not np.isfinite(loss):
                raise RegressionError(f"non-finite training loss at epoch {epoch}")
            total += loss * len(idx)
            opt.step(grads)
        trace.append(total / n)
    return trace


# ---------------------------------------------------------------------------
# public surface


class _Constant:
    def __init__(self, value):
        self.value = value

    def __call__(self, X):
        return np.full(X.shape[0], self.value)


@dataclass(frozen=True, eq=False)
class FittedRegressor:
    spec: RegressorSpec
    p: int
    model: object = field(repr=False)

    def predict(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.p:
            raise RegressionError(f"dimension mismatch: model fitted on p={self.p}, got {X.shape[1]} columns")
        if X.shape[0] == 0:
            return np.empty(0)
        return np.asarray(self.model(X), dtype=float)

    __call__ = predict


@dataclass(frozen=True, eq=False)
class FittedClassifier(FittedRegressor):
    """Probability predictor; outputs always lie in [1e-6, 1 - 1e-6]."""

    def predict(self, X) -> np.ndarray:
        return _nn.clamp_prob(super().predict(X))

    __call__ = predict


def fit_regressor(spec: RegressorSpec, X, y) -> FittedRegressor:
    minimum = max(2, spec.k_neighbors) if spec.variant == "k-nearest" else 2
    X, y = _check_training(X, y, minimum)
    return FittedRegressor(spec, X.shape[1], _build(spec, X, y, classify=False))


def fit_classifier(spec: RegressorSpec, X, labels, allow_constant: bool = False) -> FittedClassifier:
    """Fit P(label = 1 | X). Single-class labels yield a clamped constant if allowed."""
    minimum = max(2, spec.k_neighbors) if spec.variant == "k-nearest" else 1
    X, labels = _check_training(X, labels, minimum)
    if np.any((labels != 0) & (labels != 1)):
        raise RegressionError("classifier labels must be 0/1")
    if labels.min() == labels.max():
        if not allow_constant:
            raise RegressionError("only one class present in labels")
        return FittedClassifier(spec, X.shape[1], _Constant(float(labels[0])))
    return FittedClassifier(spec, X.shape[1], _build(spec, X, labels, classify=True))


def _build(spec: RegressorSpec, X, y, classify: bool):
    n = X.shape[0]
    if spec.variant == "ridge":
        return _Logistic(X, y, spec.penalty(n)) if classify else _Ridge(X, y, spec.penalty(n))
    if spec.variant == "kernel-ridge":
        ls = spec.kernel_lengthscale
        if ls == MEDIAN_HEURISTIC:
            ls = median_heuristic(X, np.random.default_rng(spec.seed))
        lam = spec.penalty(n)
        if lam <= 0:
            raise RegressionError("kernel-ridge needs ridge_penalty > 0")
        return _KernelRidge(X, y, lam, float(ls))
    if spec.variant == "k-nearest":
        knn = KNeighborsRegressor(n_neighbors=min(spec.k_neighbors, n)).fit(X, y)
        return knn.predict
    return _MLP(X, y, spec, classify)


def gradient_check(
    spec: RegressorSpec,
    X,
    y,
    tolerance: float = 1e-4,
    classify: bool = False,
    params=None,
    n_coords: int = 64,
    flip_sign_of: Optional[int] = None,
) -> GradientCheck:
    """Finite-difference check of the MLP's backpropagated gradients.

    Checks the summed loss of a freshly initialised network (or of ``params``
    if given) on ``(X, y)`` as-is, without standardisation.
    """
    if spec.variant != "mlp":
        raise ValueError("gradient_check needs an mlp spec")
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    rng = np.random.default_rng(spec.seed)
    if params is None:
        params = _nn.init_dense(rng, [X.shape[1], *spec.hidden_sizes(X.shape[1]), 1])
    params = [np.array(p, dtype=float) for p in params]
    _, grads = dense_loss_and_grads(params, X, y, classify, mean=False)

    def loss():
        return dense_loss_and_grads(params, X, y, classify, mean=False)[0]

    return _nn.finite_difference_check(
        loss, params, grads, rng, tolerance, n_coords=n_coords, flip_sign_of=flip_sign_of
    )
