"""Training objectives: margin loss, MIL probability model, coupled bag loss,
reconstruction-style adversarial losses and the balance controller."""
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 1.0  # weight of the squared bag/instance loss gap
    prob_lambda: float = 1.0  # rate in p = 1 - exp(-lambda h)
    gamma: float = 0.5
    omega_k: float = 0.001

    def __post_init__(self):
        if not 0.0 <= self.m_minus < self.m_plus <= 1.0:
            raise ConfigError(f"need 0 <= m_minus < m_plus <= 1, got {self.m_minus}, {self.m_plus}")
        if not self.lam > 0 or not self.prob_lambda > 0:
            raise ConfigError("lambda values must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.omega_k > 0:
            raise ConfigError(f"omega_k must be positive, got {self.omega_k}")


@dataclass(frozen=True)
class AdversarialState:
    k: float = 0.0
    step: int = 0
    last_l_real: float = 0.0
    last_l_fake: float = 0.0


# -- margin loss ---------------------------------------------------------------

def margin_loss(bag_norm, label, cfg=LossConfig()):
    n = float(bag_norm)
    if not 0.0 <= n < 1.0:
        raise DomainError(f"bag norm must lie in [0, 1), got {n}")
    if label == 1:
        return max(0.0, cfg.m_plus - n) ** 2
    return max(0.0, n - cfg.m_minus) ** 2


def margin_loss_grad(bag_norm, label, cfg=LossConfig()):
    """d loss / d |s|."""
    n = float(bag_norm)
    if label == 1:
        return -2.0 * max(0.0, cfg.m_plus - n)
    return 2.0 * max(0.0, n - cfg.m_minus)


# -- MIL probability model -----------------------------------------------------

def instance_prob(h, lam=1.0):
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise DomainError("instance score h must be nonnegative")
    p = -np.expm1(-lam * h)
    return float(p) if p.ndim == 0 else p


def instance_prob_grad(h, lam=1.0):
    return lam * np.exp(-lam * np.asarray(h, dtype=np.float64))


def _check_probs(p):
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise DomainError("empty probability list")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise DomainError("probabilities must lie in [0, 1]")
    return p


def bag_prob_negative(instance_probs):
    """Probability that no instance is positive: prod(1 - p_j)."""
    p = _check_probs(instance_probs)
    return float(np.prod(1.0 - p))


def bag_prob_positive(instance_probs):
    return 1.0 - bag_prob_negative(instance_probs)


def bag_prob_positive_grad(instance_probs):
    """d(1 - prod(1 - p)) / dp_j = prod_{k != j}(1 - p_k)."""
    one_minus = 1.0 - _check_probs(instance_probs)
    before = np.concatenate(([1.0], np.cumprod(one_minus)[:-1]))
    after = np.concatenate((np.cumprod(one_minus[::-1])[:-1][::-1], [1.0]))
    return before * after


def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _xent(label, p):
    pc = _clamp(p)
    return -label * np.log(pc) - (1.0 - label) * np.log1p(-pc)


def _xent_grad(label, p):
    pc = _clamp(p)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    return np.where(inside, -label / pc + (1.0 - label) / (1.0 - pc), 0.0)


def coupled_bag_loss(bag_prob, instance_probs, label, cfg=LossConfig()):
    """Bag cross-entropy coupled to the mean instance pseudo-label loss.

    Positive bags: loss_bag + lam * (loss_bag - mean instance loss)^2, with
    pseudo-labels u = 1(q >= 0.5).  Negative bags: mean instance loss with u = 0.
    """
    return coupled_bag_loss_and_grad(bag_prob, instance_probs, label, cfg)[0]


def coupled_bag_loss_and_grad(bag_prob, instance_probs, label, cfg=LossConfig()):
    q = np.asarray(instance_probs, dtype=np.float64)
    if q.size == 0:
        raise DomainError("coupled loss needs at least one instance")
    q = q.reshape(-1)
    p = float(bag_prob)
    n = q.size
    if label == 1:
        u = (q >= 0.5).astype(np.float64)
        inst = _xent(u, q)
        bag = float(_xent(1.0, p))
        gap = bag - float(np.mean(inst))
        loss = bag + cfg.lam * gap * gap
        d_bag = 1.0 + 2.0 * cfg.lam * gap
        d_inst = -2.0 * cfg.lam * gap / n
        return loss, d_bag * float(_xent_grad(1.0, p)), d_inst * _xent_grad(u, q)
    u = np.zeros_like(q)
    loss = float(np.mean(_xent(u, q)))
    return loss, 0.0, _xent_grad(u, q) / n


# -- adversarial losses --------------------------------------------------------

def _pair(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def squared_error(a, b):
    a, b = _pair(a, b, "squared error")
    d = a - b
    return float(np.sum(d * d))


def discriminator_losses(real_hm, real_recon, fake_hm, fake_recon, state):
    """Return (l_real, l_fake, l_D) as raw sums over the batch."""
    real_hm, real_recon = _pair(real_hm, real_recon, "real reconstruction")
    fake_hm, fake_recon = _pair(fake_hm, fake_recon, "fake reconstruction")
    l_real = squared_error(real_hm, real_recon)
    l_fake = squared_error(fake_hm, fake_recon)
    k = state.k if isinstance(state, AdversarialState) else float(state)
    return l_real, l_fake, l_real - k * l_fake


def update_k(state, l_real, l_fake, cfg=LossConfig()):
    k = state.k + cfg.omega_k * (cfg.gamma * l_real - l_fake)
    k = min(1.0, max(0.0, k))
    return replace(state, k=k, step=state.step + 1, last_l_real=float(l_real),
                   last_l_fake=float(l_fake))


def generator_loss(fake_hm, gt_hm, fake_recon):
    """Heatmap L2 plus the adversarial reconstruction gap."""
    return squared_error(fake_hm, gt_hm) + squared_error(fake_hm, fake_recon)
