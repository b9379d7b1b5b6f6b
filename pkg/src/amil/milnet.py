"""Multi-instance residual network.

Each level transforms every instance with FC + ReLU, pools the bag, and adds
the pooled embedding to the running bag representation.  A per-level score
head produces instance scores; a shared output head maps the accumulated bag
representation at every level to that level's prediction.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, ShapeError, StateError
from .losses import (LossConfig, bag_prob_positive_grad, coupled_bag_loss_and_grad,
                     instance_prob_grad, margin_loss, margin_loss_grad)
from .pooling import POOL_MODES, InstanceBag, pool, pool_backward


@dataclass
class MilNetwork:
    params: dict
    input_dim: int
    out_dim: int
    hidden_size: int = 128
    level_count: int = 3
    score_dim: int = 1
    pool_iterations: int = 3
    pooling: str = "adjust"

    def copy(self):
        return MilNetwork({k: v.copy() for k, v in self.params.items()}, self.input_dim,
                          self.out_dim, self.hidden_size, self.level_count, self.score_dim,
                          self.pool_iterations, self.pooling)

    def param_names(self):
        return list(self.params)


def init_params(input_dim, out_dim, *, hidden_size=128, level_count=3, score_dim=1,
                pool_iterations=3, pooling="adjust", seed=0):
    """Normal(0, 1/fan_in) weights, zero biases."""
    for name, v in (("input_dim", input_dim), ("out_dim", out_dim), ("hidden_size", hidden_size),
                    ("level_count", level_count), ("score_dim", score_dim),
                    ("pool_iterations", pool_iterations)):
        if int(v) < 1:
            raise DomainError(f"{name} must be positive, got {v}")
    if pooling not in POOL_MODES:
        raise DomainError(f"unknown pooling {pooling!r}")
    rng = np.random.default_rng(seed)

    def dense(fan_out, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))

    params = {}
    fan_in = input_dim
    for l in range(1, level_count + 1):
        params[f"layer{l}.weight"] = dense(hidden_size, fan_in)
        params[f"layer{l}.bias"] = np.zeros(hidden_size)
        fan_in = hidden_size
    for l in range(1, level_count + 1):
        params[f"score{l}.weight"] = dense(score_dim, hidden_size)
        params[f"score{l}.bias"] = np.zeros(score_dim)
    params["out.weight"] = dense(out_dim, hidden_size)
    params["out.bias"] = np.zeros(out_dim)
    return MilNetwork(params, int(input_dim), int(out_dim), int(hidden_size), int(level_count),
                      int(score_dim), int(pool_iterations), pooling)


@dataclass
class LevelOutputs:
    per_level_embeddings: list
    per_level_scores: list
    accumulated: list
    instance_scores: list
    cache: dict = field(default=None, repr=False)

    @property
    def prediction(self):
        return mean_of_levels(self.per_level_scores)


def mean_of_levels(per_level):
    total = per_level[0]
    for s in per_level[1:]:
        total = total + s
    return total / len(per_level)


def _instances(bag):
    if isinstance(bag, InstanceBag):
        return bag.instances
    x = np.asarray(bag, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ShapeError(f"expected (K, d) or (B, K, d) instances, got shape {x.shape}")
    return x


def forward(net, bag):
    x = _instances(bag)
    if x.shape[-1] != net.input_dim:
        raise ShapeError(f"instance width {x.shape[-1]} != network input width {net.input_dim}")
    p = net.params
    h = x
    acc = None
    inputs, pre, states, score_pre = [], [], [], []
    embs, scores, accs, inst = [], [], [], []
    for l in range(1, net.level_count + 1):
        inputs.append(h)
        z = h @ p[f"layer{l}.weight"].T + p[f"layer{l}.bias"]
        pre.append(z)
        h = np.maximum(z, 0.0)
        s, st = pool(h, net.pooling, net.pool_iterations)
        states.append(st)
        acc = s if acc is None else s + acc
        zs = h @ p[f"score{l}.weight"].T + p[f"score{l}.bias"]
        score_pre.append(zs)
        embs.append(s)
        accs.append(acc)
        inst.append(np.maximum(zs, 0.0))
        scores.append(acc @ p["out.weight"].T + p["out.bias"])
    cache = {"inputs": inputs, "pre": pre, "states": states, "score_pre": score_pre}
    return LevelOutputs(embs, scores, accs, inst, cache)


def backward(net, outputs, score_grads=None, instance_grads=None, embedding_grads=None):
    """Chain rule through the whole network.

    Upstream gradients are per-level lists (``None`` entries mean zero) for the
    level predictions, the instance scores and the pooled level embeddings.
    Returns ``(param_grads, input_grad)``.
    """
    if outputs is None or outputs.cache is None:
        raise StateError("backward needs the cached forward pass")
    c = outputs.cache
    p = net.params
    L = net.level_count
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    def get(lst, l):
        return None if lst is None else lst[l]

    g_acc = None
    g_h_above = None
    for l in range(L - 1, -1, -1):
        n = l + 1
        g_pred = get(score_grads, l)
        if g_pred is not None:
            g_pred = np.asarray(g_pred, dtype=np.float64)
            grads["out.weight"] += np.tensordot(g_pred, outputs.accumulated[l],
                                                axes=(range(g_pred.ndim - 1), range(g_pred.ndim - 1)))
            grads["out.bias"] += g_pred.reshape(-1, g_pred.shape[-1]).sum(axis=0)
            contrib = g_pred @ p["out.weight"]
            g_acc = contrib if g_acc is None else g_acc + contrib
        g_s = g_acc
        g_e = get(embedding_grads, l)
        if g_e is not None:
            g_s = g_e if g_s is None else g_s + g_e
        h = np.maximum(c["pre"][l], 0.0)
        g_h = np.zeros_like(h) if g_h_above is None else g_h_above
        if g_s is not None:
            g_h = g_h + pool_backward(c["states"][l], g_s)
        g_i = get(instance_grads, l)
        if g_i is not None:
            g_zs = np.asarray(g_i, dtype=np.float64) * (c["score_pre"][l] > 0)
            grads[f"score{n}.weight"] += np.tensordot(g_zs, h, axes=(range(h.ndim - 1), range(h.ndim - 1)))
            grads[f"score{n}.bias"] += g_zs.reshape(-1, g_zs.shape[-1]).sum(axis=0)
            g_h = g_h + g_zs @ p[f"score{n}.weight"]
        g_z = g_h * (c["pre"][l] > 0)
        x = c["inputs"][l]
        grads[f"layer{n}.weight"] += np.tensordot(g_z, x, axes=(range(x.ndim - 1), range(x.ndim - 1)))
        grads[f"layer{n}.bias"] += g_z.reshape(-1, g_z.shape[-1]).sum(axis=0)
        g_h_above = g_z @ p[f"layer{n}.weight"]
    return grads, g_h_above


def infer_score(net, bag):
    """Unweighted mean of the per-level predictions."""
    return forward(net, bag).prediction


# -- MIL bag objectives ----------------------------------------------------------
# Per-level supervision: the same loss is attached to every level and summed.

def margin_objective(net, bag, label=None, cfg=LossConfig()):
    """Margin loss on each level's pooled embedding norm; returns (loss, grads)."""
    if label is None:
        label = bag.bag_label
    out = forward(net, bag)
    total = 0.0
    emb_grads = []
    for s in out.per_level_embeddings:
        n = float(np.sqrt(np.sum(s * s)))
        total += margin_loss(n, label, cfg)
        dn = margin_loss_grad(n, label, cfg)
        emb_grads.append(dn * s / n if n > 0 else np.zeros_like(s))
    grads, _ = backward(net, out, embedding_grads=emb_grads)
    return total, grads


def coupled_objective(net, bag, label=None, cfg=LossConfig()):
    """Coupled bag/instance loss on each level's instance scores, per class.

    Instance probabilities are 1 - exp(-lambda h) on the ReLU score-head
    outputs and the bag probability is their noisy-OR.
    """
    if label is None:
        label = bag.bag_label
    labels = np.atleast_1d(np.asarray(label)).astype(int)
    out = forward(net, bag)
    total = 0.0
    inst_grads = []
    for h in out.instance_scores:
        if h.ndim != 2:
            raise ShapeError("coupled_objective works on one bag at a time")
        q = -np.expm1(-cfg.prob_lambda * h)
        g_h = np.zeros_like(h)
        for ci in range(h.shape[1]):
            y = labels[ci] if labels.size > 1 else labels[0]
            qc = q[:, ci]
            pbag = 1.0 - float(np.prod(1.0 - qc))
            loss, d_p, d_q = coupled_bag_loss_and_grad(pbag, qc, int(y), cfg)
            total += loss
            d_q = d_q + d_p * bag_prob_positive_grad(qc)
            g_h[:, ci] = d_q * instance_prob_grad(h[:, ci], cfg.prob_lambda)
        inst_grads.append(g_h)
    grads, _ = backward(net, out, instance_grads=inst_grads)
    return total, grads


# -- flat parameter helpers (for optimizers and gradient audits) ------------------

def flatten(params, names=None):
    names = list(params) if names is None else names
    return np.concatenate([params[k].reshape(-1) for k in names])


def unflatten(vector, like, names=None):
    names = list(like) if names is None else names
    out, i = {}, 0
    for k in names:
        n = like[k].size
        out[k] = np.asarray(vector[i:i + n]).reshape(like[k].shape).copy()
        i += n
    return out


def with_params(net, params):
    return replace(net, params=params)
