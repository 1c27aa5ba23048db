"""Small numpy neural-network toolkit: ReLU dense stacks, Adam, clamped BCE.

Everything here is deliberately minimal: forward passes return the cache
needed by the matching backward pass, and parameters are plain lists of
arrays so that finite-difference checks can poke individual coordinates.
"""

from __future__ import annotations

from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit

PROB_CLAMP = 1e-6
HIDDEN_BIAS = 0.01


def init_dense(rng: np.random.Generator, sizes: Sequence[int]) -> List[np.ndarray]:
    """He-normal weights. Returns [W1, b1, W2, b2, ...].

    Hidden biases start at HIDDEN_BIAS rather than 0: with zero biases a row
    whose first-layer units are all inactive puts every later pre-activation
    exactly on the ReLU kink, where finite differences are meaningless.
    """
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        scale = np.sqrt((1.0 if last else 2.0) / fan_in)
        params.append(rng.standard_normal((fan_in, fan_out)) * scale)
        params.append(np.zeros(fan_out) if last else np.full(fan_out, HIDDEN_BIAS))
    return params


def dense_forward(params: Sequence[np.ndarray], X: np.ndarray):
    """ReLU on every layer except the last (linear). Returns (output, cache)."""
    acts = [X]
    pre = []
    h = X
    n_layers = len(params) // 2
    for i in range(n_layers):
        z = h @ params[2 * i] + params[2 * i + 1]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)
    return h, (acts, pre)


def dense_backward(params: Sequence[np.ndarray], cache, d_out: np.ndarray):
    """Gradients for every parameter plus the gradient w.r.t. the input."""
    acts, pre = cache
    n_layers = len(params) // 2
    grads: List[Optional[np.ndarray]] = [None] * len(params)
    g = d_out
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * (pre[i] > 0)
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params[2 * i].T
    return grads, g


def clamp_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_from_logits(logits: np.ndarray, labels: np.ndarray):
    """Per-row BCE of the clamped sigmoid and its derivative w.r.t. the logit.

    The derivative is zero where the clamp is active, which is the exact
    derivative of the clamped loss away from the clamp boundary.
    """
    raw = expit(logits)
    p = clamp_prob(raw)
    loss = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    inside = (raw > PROB_CLAMP) & (raw < 1.0 - PROB_CLAMP)
    return loss, (p - labels) * inside


class Adam:
    """Adam with the usual defaults (0.9, 0.999, 1e-8)."""

    def __init__(self, params: List[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class GradientCheck(NamedTuple):
    max_relative_error: float
    passed: bool
    n_coordinates: int


def relative_error(analytic: float, numeric: float) -> float:
    a, b = abs(analytic), abs(numeric)
    if a < 1e-12 and b < 1e-12:
        return 0.0
    return abs(analytic - numeric) / max(a, b)


def _central_difference(loss_fn, arr: np.ndarray, local, step: float) -> float:
    orig = arr[local]
    arr[local] = orig + step
    up = loss_fn()
    arr[local] = orig - step
    down = loss_fn()
    arr[local] = orig
    return (up - down) / (2.0 * step)


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: List[np.ndarray],
    analytic: Sequence[np.ndarray],
    rng: np.random.Generator,
    tolerance: float,
    n_coords: int = 64,
    step: float = 1e-5,
    flip_sign_of: Optional[int] = None,
) -> GradientCheck:
    """Compare analytic gradients with central differences on random coordinates.

    ``loss_fn`` re-evaluates the loss from the current contents of ``params``
    (which are perturbed in place and restored). Coordinates that disagree
    at ``step`` are re-measured at ``step / 100`` and keep the smaller error,
    so a kink within the stencil is not reported as a wrong gradient.
    ``flip_sign_of`` negates one
    analytic coordinate (flat index) as a negative control and guarantees it
    is among the checked coordinates.
    """
    sizes = [p.size for p in params]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    flat_analytic = np.concatenate([np.ravel(g) for g in analytic]).astype(float)
    if flip_sign_of is not None:
        flat_analytic[flip_sign_of] = -flat_analytic[flip_sign_of]
    k = min(max(n_coords, 50), total)
    coords = rng.choice(total, size=k, replace=False)
    if flip_sign_of is not None and flip_sign_of not in coords:
        coords[0] = flip_sign_of
    worst = 0.0
    for c in coords:
        which = int(np.searchsorted(offsets, c, side="right") - 1)
        local = np.unravel_index(int(c - offsets[which]), params[which].shape)
        err = relative_error(flat_analytic[c], _central_difference(loss_fn, params[which], local, step))
        if err > tolerance:
            # a ReLU kink inside the stencil spoils the difference; a real
            # gradient error survives the smaller step as well
            small = _central_difference(loss_fn, params[which], local, step / 100.0)
            err = min(err, relative_error(flat_analytic[c], small))
        worst = max(worst, err)
    return GradientCheck(float(worst), bool(worst <= tolerance), int(k))
