"""Adjust pooling: iterative softmax-weighted sum pooling with a squash.

All functions accept a single bag of instance embeddings ``(K, d)`` or a stack
of equally sized bags ``(B, K, d)``; the instance axis is always ``-2``.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, StateError

POOL_MODES = ("adjust", "mean", "max")


@dataclass
class InstanceBag:
    instances: np.ndarray
    bag_label: int = 0
    bag_id: object = None

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] == 0:
            raise DomainError("a bag needs at least one instance and a (K, d) layout")

    def __len__(self):
        return self.instances.shape[0]

    @property
    def dim(self):
        return self.instances.shape[1]


@dataclass
class PoolStep:
    temp_weights: np.ndarray
    weights: np.ndarray
    sigma: np.ndarray
    embedding: np.ndarray


@dataclass
class PoolState:
    features: np.ndarray
    mode: str = "adjust"
    history: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.history)

    @property
    def weights(self):
        return self.history[-1].weights

    @property
    def temp_weights(self):
        return self.history[-1].temp_weights

    @property
    def embedding(self):
        return self.history[-1].embedding


def _bag_array(feats):
    if isinstance(feats, InstanceBag):
        feats = feats.instances
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim < 2 or f.shape[-2] == 0:
        raise DomainError("cannot pool an empty bag")
    return f


def _weighted_sum(w, f):
    return (w[..., None, :] @ f)[..., 0, :]


def _project(f, v):
    # f . v per instance: (..., K, d) x (..., d) -> (..., K)
    return (f @ v[..., :, None])[..., 0]


def squash(sigma):
    """Scale ``sigma`` to norm |sigma|^2 / (1 + |sigma|^2), keeping its direction."""
    sigma = np.asarray(sigma, dtype=np.float64)
    n = np.sqrt((sigma * sigma).sum(axis=-1, keepdims=True))
    return sigma * (n / (1.0 + n * n))


def squash_backward(sigma, grad):
    # Jacobian of a(n) sigma with a(n) = n / (1 + n^2): a I + n a'(n) u u^T (symmetric).
    sigma = np.asarray(sigma, dtype=np.float64)
    n = np.sqrt((sigma * sigma).sum(axis=-1, keepdims=True))
    a = n / (1.0 + n * n)
    da = (1.0 - n * n) / (1.0 + n * n) ** 2
    safe = np.where(n > 0, n, 1.0)
    u = np.where(n > 0, sigma / safe, 0.0)
    return a * grad + (n * da) * (u * grad).sum(axis=-1, keepdims=True) * u


def adjust_pool(bag_embeddings, T=3):
    """Run ``T`` rounds of softmax reweighting; return the final squashed embedding."""
    f = _bag_array(bag_embeddings)
    if T < 1:
        raise DomainError(f"adjust pooling needs T >= 1, got {T}")
    state = PoolState(features=f, mode="adjust")
    b = np.zeros(f.shape[:-1])
    for t in range(T):
        e = np.exp(b - b.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
        sigma = _weighted_sum(w, f)
        s = squash(sigma)
        state.history.append(PoolStep(b, w, sigma, s))
        if t < T - 1:
            b = b + _project(f, s)
    return state.history[-1].embedding, state


def adjust_pool_backward(state, upstream_grad):
    """Gradient of the final embedding w.r.t. every instance embedding."""
    if state is None or not state.history:
        raise StateError("pool state carries no iteration history")
    f = state.features
    g_s = np.asarray(upstream_grad, dtype=np.float64)
    g_f = np.zeros_like(f)
    g_b = np.zeros(f.shape[:-1])
    for t in range(len(state.history) - 1, -1, -1):
        step = state.history[t]
        if t < len(state.history) - 1:
            # b_{t+1} = b_t + f . s_t
            g_f += g_b[..., :, None] * step.embedding[..., None, :]
            g_s = _weighted_sum(g_b, f)
        g_sigma = squash_backward(step.sigma, g_s)
        w = step.weights
        g_f += w[..., :, None] * g_sigma[..., None, :]
        g_w = _project(f, g_sigma)
        g_b = g_b + w * (g_w - (w * g_w).sum(axis=-1, keepdims=True))
    return g_f


def baseline_pool(bag_embeddings, mode="mean"):
    f = _bag_array(bag_embeddings)
    if mode == "mean":
        k = f.shape[-2]
        return _weighted_sum(np.full(f.shape[:-1], 1.0 / k), f)
    if mode == "max":
        return np.max(f, axis=-2)
    raise DomainError(f"unknown baseline pooling mode {mode!r}")


def baseline_pool_backward(bag_embeddings, mode, upstream_grad):
    f = _bag_array(bag_embeddings)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if mode == "mean":
        return np.broadcast_to(g[..., None, :] / f.shape[-2], f.shape).copy()
    if mode == "max":
        idx = np.argmax(f, axis=-2)
        mask = np.zeros_like(f)
        np.put_along_axis(mask, idx[..., None, :], 1.0, axis=-2)
        return mask * g[..., None, :]
    raise DomainError(f"unknown baseline pooling mode {mode!r}")


def pool(bag_embeddings, mode="adjust", T=3):
    """Dispatch to adjust pooling or a squashed mean/max baseline."""
    if mode == "adjust":
        return adjust_pool(bag_embeddings, T)
    f = _bag_array(bag_embeddings)
    sigma = baseline_pool(f, mode)
    s = squash(sigma)
    state = PoolState(features=f, mode=mode)
    state.history.append(PoolStep(None, None, sigma, s))
    return s, state


def pool_backward(state, upstream_grad):
    if state is None or not state.history:
        raise StateError("pool state carries no iteration history")
    if state.mode == "adjust":
        return adjust_pool_backward(state, upstream_grad)
    g_sigma = squash_backward(state.history[-1].sigma, upstream_grad)
    return baseline_pool_backward(state.features, state.mode, g_sigma)
