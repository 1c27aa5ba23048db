"""MRIV-Net: two separate representations with multi-task heads, trained jointly.

Representation 1 (one ReLU layer) feeds four heads: mu1_Y, mu0_Y (identity)
and mu1_A, mu0_A (sigmoid). Representation 2 feeds three sigmoid heads: a
second pair of treatment heads and the instrument propensity pi. The loss
per row is

    (mu_{z}^Y - y)^2 + BCE(mu_{z}^A, a) + BCE(mu~_{z}^A, a) + BCE(pi, z)

where arm-indexed heads only contribute for the observed instrument arm.
After training, tau_init comes from representation 1 and delta_A from the
representation-2 treatment heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from mriv import _nn
from mriv._seeding import role_seed
from mriv.dataset import Dataset
from mriv.estimators import (
    DEFAULT_STAGE2_SPEC,
    CateEstimator,
    ClipConfig,
    NuisanceSet,
    cap_tau,
    clip_delta,
    fit_mriv,
)
from mriv.regress import RegressorSpec

__all__ = [
    "MrivNetConfig",
    "MrivNet",
    "MrivNetError",
    "init_mrivnet",
    "mrivnet_outputs",
    "mrivnet_loss",
    "mrivnet_loss_and_grads",
    "train_mrivnet",
    "extract_nuisances",
    "mrivnet_gradient_check",
    "fit_mriv_with_net",
]

REP1_HEADS = ("mu1_y", "mu0_y", "mu1_a", "mu0_a")
REP2_HEADS = ("mu1_a_tilde", "mu0_a_tilde", "pi")


class MrivNetError(RuntimeError):
    pass


@dataclass(frozen=True)
class MrivNetConfig:
    hidden: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("hidden and batch_size must be positive, epochs non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(eq=False)
class MrivNet:
    """Parameters of both representations and their heads.

    ``rep1`` = [W, b, H, c] with H producing the four representation-1 heads;
    ``rep2`` likewise with three heads. Inputs are standardized with the
    fixed ``x_mean``/``x_scale`` recorded at initialization.
    """

    rep1: List[np.ndarray]
    rep2: List[np.ndarray]
    x_mean: np.ndarray
    x_scale: np.ndarray
    seed: int = 0
    loss_trace: List[float] = field(default_factory=list)

    @property
    def params(self) -> List[np.ndarray]:
        return self.rep1 + self.rep2

    @property
    def p(self) -> int:
        return self.rep1[0].shape[0]

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 else X
        if X.shape[1] != self.p:
            raise MrivNetError(f"dimension mismatch: net expects p={self.p}, got {X.shape[1]}")
        return (X - self.x_mean) / self.x_scale

    def heads(self, X) -> Dict[str, np.ndarray]:
        """All seven head outputs; probability heads clamped to [1e-6, 1 - 1e-6]."""
        return mrivnet_outputs(self, self.standardize(X))[0]


def init_mrivnet(p: int, config: MrivNetConfig = MrivNetConfig(), X=None, y=None, z=None) -> MrivNet:
    """Fresh network. With training data given, inputs are standardized on X
    and the outcome head biases start at the per-arm outcome means."""
    rng = np.random.default_rng(config.seed)
    rep1 = _nn.init_dense(rng, [p, config.hidden, len(REP1_HEADS)])
    rep2 = _nn.init_dense(rng, [p, config.hidden, len(REP2_HEADS)])
    x_mean, x_scale = np.zeros(p), np.ones(p)
    if X is not None:
        X = np.asarray(X, dtype=float)
        x_mean = X.mean(axis=0)
        sd = X.std(axis=0)
        x_scale = np.where(sd > 0, sd, 1.0)
    if y is not None and z is not None:
        z = np.asarray(z)
        for k, arm in ((0, 1), (1, 0)):
            sel = z == arm
            if sel.any():
                rep1[3][k] = float(np.mean(np.asarray(y)[sel]))
    return MrivNet(rep1, rep2, x_mean, x_scale, config.seed)


def mrivnet_outputs(net: MrivNet, Xs: np.ndarray):
    """Forward pass on standardized inputs. Returns (heads, caches)."""
    out1, cache1 = _nn.dense_forward(net.rep1, Xs)
    out2, cache2 = _nn.dense_forward(net.rep2, Xs)
    heads = {
        "mu1_y": out1[:, 0],
        "mu0_y": out1[:, 1],
        "mu1_a": _nn.clamp_prob(expit(out1[:, 2])),
        "mu0_a": _nn.clamp_prob(expit(out1[:, 3])),
        "mu1_a_tilde": _nn.clamp_prob(expit(out2[:, 0])),
        "mu0_a_tilde": _nn.clamp_prob(expit(out2[:, 1])),
        "pi": _nn.clamp_prob(expit(out2[:, 2])),
    }
    return heads, (out1, cache1, out2, cache2)


def mrivnet_loss_and_grads(net: MrivNet, X, z, a, y, scale: float = 1.0) -> Tuple[float, List[np.ndarray]]:
    """Summed joint loss over the rows (times ``scale``) and its parameter gradients."""
    Xs = net.standardize(X)
    z, a, y = (np.asarray(v, dtype=float) for v in (z, a, y))
    if Xs.shape[0] == 0:
        raise MrivNetError("empty batch")
    _, (out1, cache1, out2, cache2) = mrivnet_outputs(net, Xs)
    on1, on0 = z, 1.0 - z

    y_hat = on1 * out1[:, 0] + on0 * out1[:, 1]
    resid = y_hat - y
    loss_a, g_a = _nn.bce_from_logits(on1 * out1[:, 2] + on0 * out1[:, 3], a)
    loss_at, g_at = _nn.bce_from_logits(on1 * out2[:, 0] + on0 * out2[:, 1], a)
    loss_pi, g_pi = _nn.bce_from_logits(out2[:, 2], z)
    total = float(np.sum(resid**2 + loss_a + loss_at + loss_pi)) * scale

    d1 = np.column_stack([2 * resid * on1, 2 * resid * on0, g_a * on1, g_a * on0]) * scale
    d2 = np.column_stack([g_at * on1, g_at * on0, g_pi]) * scale
    grads1, _ = _nn.dense_backward(net.rep1, cache1, d1)
    grads2, _ = _nn.dense_backward(net.rep2, cache2, d2)
    return total, grads1 + grads2


def mrivnet_loss(net: MrivNet, batch: Dataset) -> float:
    """Summed joint loss over the rows of ``batch``."""
    return mrivnet_loss_and_grads(net, batch.covariates, batch.instrument, batch.treatment, batch.outcome)[0]


def train_mrivnet(d: Dataset, config: MrivNetConfig = MrivNetConfig()) -> MrivNet:
    """Adam on minibatch-mean loss over the full training sample; records the per-epoch mean loss."""
    net = init_mrivnet(d.p, config, d.covariates, d.outcome, d.instrument)
    opt = _nn.Adam(net.params, config.learning_rate)
    rng = np.random.default_rng(role_seed(config.seed, "mrivnet-batches"))
    n = d.n
    batch = min(config.batch_size, n)
    X, z, a, y = d.covariates, d.instrument, d.treatment, d.outcome
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, grads = mrivnet_loss_and_grads(net, X[idx], z[idx], a[idx], y[idx], scale=1.0 / len(idx))
            if not np.isfinite(loss):
                raise MrivNetError(f"non-finite MRIV-Net loss at epoch {epoch}, batch starting {start}")
            total += loss * len(idx)
            opt.step(grads)
        net.loss_trace.append(total / n)
    return net


def extract_nuisances(net: MrivNet, clip: ClipConfig = ClipConfig()):
    """(NuisanceSet, tau_init) from a trained net; delta_A uses the representation-2 heads."""

    def head(name):
        return lambda X: net.heads(X)[name]

    def delta_a(X):
        h = net.heads(X)
        return h["mu1_a_tilde"] - h["mu0_a_tilde"]

    def tau_init(X):
        h = net.heads(X)
        return cap_tau((h["mu1_y"] - h["mu0_y"]) / clip_delta(h["mu1_a"] - h["mu0_a"], clip.delta_floor), clip.tau_cap)

    nuis = NuisanceSet(head("pi"), head("mu0_y"), head("mu0_a"), delta_a, head("mu1_y"), head("mu1_a"))
    return nuis, tau_init


def mrivnet_gradient_check(
    net: MrivNet,
    batch: Dataset,
    tolerance: float = 1e-4,
    n_coords: int = 64,
    seed: int = 0,
    flip_sign_of: Optional[int] = None,
) -> _nn.GradientCheck:
    """Central differences of the summed loss against the analytic gradients."""
    args = (batch.covariates, batch.instrument, batch.treatment, batch.outcome)
    _, grads = mrivnet_loss_and_grads(net, *args)
    params = net.params

    def loss():
        return mrivnet_loss_and_grads(net, *args)[0]

    return _nn.finite_difference_check(
        loss, params, grads, np.random.default_rng(seed), tolerance, n_coords, flip_sign_of=flip_sign_of
    )


def fit_mriv_with_net(
    train: Dataset,
    config: MrivNetConfig = MrivNetConfig(),
    stage2_spec: RegressorSpec = DEFAULT_STAGE2_SPEC,
    clip: ClipConfig = ClipConfig(),
    seed: int = 0,
) -> CateEstimator:
    """MRIV with every stage-1 quantity taken from a jointly trained MRIV-Net."""
    net = train_mrivnet(train, replace(config, seed=seed))
    nuis, tau_init = extract_nuisances(net, clip)
    est = fit_mriv(train, init=tau_init, stage2_spec=stage2_spec, clip=clip, seed=seed, nuisances=nuis)
    est.provenance.update(nuisances="mrivnet", mrivnet=config)
    est.parts["net"] = net
    return est
