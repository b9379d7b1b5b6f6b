"""Adversarial training of the heatmap generator against a reconstructing
discriminator, with Adam, step learning-rate decay and binary checkpoints."""
import math
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import milnet
from .errors import ConfigError, ParseError, ShapeError, TrainingDivergence, VersionError
from .losses import AdversarialState, LossConfig, update_k
from .posedomain import (PoseConfig, discriminator_instances, images_to_instances,
                         instance_features_to_heatmap)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
DIVERGENCE_LIMIT = 1e6
METRICS_HEADER = "iter,l_real,l_fake,l_D,gen_loss,k,lr"

# Alternative readings of the decay base for the two benchmark presets.
DECAY_PRESETS = {"desk": 0.5, "mpii": 0.01, "lsp": 0.005}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    total_iterations: int = 350
    decay_every: int = 20
    decay_base: float = 0.5
    batch_size: int = 16
    seed: int = 0
    loss_config: LossConfig = LossConfig()
    adversarial: bool = True
    freeze_discriminator: bool = False
    pooling: str = "adjust"
    hidden_size: int = 128
    level_count: int = 3
    pool_iterations: int = 3

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")


def lr_schedule(base_lr, iteration, cfg):
    return base_lr * cfg.decay_base ** (iteration // cfg.decay_every)


# -- Adam ---------------------------------------------------------------------------

@dataclass
class AdamMoments:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def copy(self):
        return AdamMoments({k: a.copy() for k, a in self.m.items()},
                           {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_update(params, grads, moments, lr, weight_decay=0.0):
    """One bias-corrected Adam step with decoupled weight decay; returns new (params, moments)."""
    t = moments.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = BETA1 * moments.m[k] + (1.0 - BETA1) * g
        v = BETA2 * moments.v[k] + (1.0 - BETA2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_p[k] = p - lr * step - (lr * weight_decay) * p
        new_m[k], new_v[k] = m, v
    return new_p, AdamMoments(new_m, new_v, t)


# -- models -------------------------------------------------------------------------

def build_models(pose_cfg, cfg):
    P, G, J = pose_cfg.patch_size, pose_cfg.grid, pose_cfg.joints
    gen_in = P * P + 2
    common = dict(hidden_size=cfg.hidden_size, level_count=cfg.level_count,
                  pool_iterations=cfg.pool_iterations, pooling=cfg.pooling)
    gen = milnet.init_params(gen_in, J * G * G, seed=[cfg.seed, 1], **common)
    disc = milnet.init_params(gen_in + J, J * G * G, seed=[cfg.seed, 2], **common)
    return gen, disc


def predict_heatmaps(gen, images, pose_cfg):
    """Generator heatmaps (mean of level predictions) for an image or stack of images."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    inst = images_to_instances(images, pose_cfg.patch_size)
    G, J = pose_cfg.grid, pose_cfg.joints
    hm = milnet.infer_score(gen, inst).reshape(-1, J, G, G)
    return hm[0] if single else hm


@dataclass
class TrainState:
    gen: milnet.MilNetwork
    disc: milnet.MilNetwork
    gen_opt: AdamMoments
    disc_opt: AdamMoments
    adv: AdversarialState = AdversarialState()
    iteration: int = 0
    seed: int = 0
    pose: PoseConfig = PoseConfig()

    @classmethod
    def fresh(cls, pose_cfg, cfg):
        gen, disc = build_models(pose_cfg, cfg)
        return cls(gen, disc, AdamMoments.zeros_like(gen.params), AdamMoments.zeros_like(disc.params),
                   AdversarialState(), 0, cfg.seed, pose_cfg)


@dataclass
class StepMetrics:
    iteration: int
    l_real: float
    l_fake: float
    l_D: float
    gen_loss: float
    k: float
    lr: float
    heatmap_l2: float = 0.0

    def csv_row(self):
        return ",".join([str(self.iteration)] + [repr(float(v)) for v in
                        (self.l_real, self.l_fake, self.l_D, self.gen_loss, self.k, self.lr)])


def _level_grads(total_grad, levels):
    return [total_grad / levels] * levels


def generator_forward(gen, inst, pose):
    B = inst.shape[0]
    G, J = pose.grid, pose.joints
    out = milnet.forward(gen, inst)
    levels = [s.reshape(B, J, G, G) for s in out.per_level_scores]
    return out, levels, milnet.mean_of_levels(levels)


def reconstruct(disc, inst, hm, pose):
    """Discriminator forward on (image patches, heatmaps); returns (outputs, recon)."""
    out = milnet.forward(disc, discriminator_instances(inst, hm))
    return out, out.prediction.reshape(hm.shape)


def sum_sq(a):
    return float(np.sum(a * a))


def compute_step(state, images, heatmaps, cfg):
    """Losses and parameter gradients at the current parameter snapshot."""
    pose = state.pose
    B = images.shape[0]
    G, J = pose.grid, pose.joints
    L_g, L_d = state.gen.level_count, state.disc.level_count
    inst = images_to_instances(images, pose.patch_size)
    gout, levels, fake = generator_forward(state.gen, inst, pose)
    real_out, recon_real = reconstruct(state.disc, inst, heatmaps, pose)
    fake_out, recon_fake = reconstruct(state.disc, inst, fake, pose)
    r_real = heatmaps - recon_real
    r_fake = fake - recon_fake
    l_real, l_fake = sum_sq(r_real), sum_sq(r_fake)
    k = state.adv.k
    l_d = l_real - k * l_fake

    use_adv = cfg.adversarial
    diffs = [lv - heatmaps for lv in levels]
    gen_loss = sum(sum_sq(d) for d in diffs) + (l_fake if use_adv else 0.0)

    # generator: per-level L2 plus adversarial gap through the discriminator
    g_fake = np.zeros_like(fake)
    if use_adv:
        g_recon = (-2.0 / B) * r_fake
        _, g_in = milnet.backward(state.disc, fake_out,
                                  score_grads=_level_grads(g_recon.reshape(B, -1), L_d))
        g_fake = (2.0 / B) * r_fake + instance_features_to_heatmap(g_in[..., -J:], G)
    g_levels = [((2.0 / B) * d + g_fake / L_g).reshape(B, -1) for d in diffs]
    g_gen, _ = milnet.backward(state.gen, gout, score_grads=g_levels)

    # discriminator: (l_real - k l_fake) / B with generated heatmaps held fixed
    g_disc = None
    if use_adv and not cfg.freeze_discriminator:
        g_disc, _ = milnet.backward(state.disc, real_out,
                                    score_grads=_level_grads((-2.0 / B) * r_real.reshape(B, -1), L_d))
        if k != 0.0:
            g_fake_d, _ = milnet.backward(state.disc, fake_out,
                                          score_grads=_level_grads((2.0 * k / B) * r_fake.reshape(B, -1), L_d))
            for name in g_disc:
                g_disc[name] += g_fake_d[name]

    losses = {"l_real": l_real, "l_fake": l_fake, "l_D": l_d, "gen_loss": gen_loss,
              "heatmap_l2": sum_sq(fake - heatmaps)}
    return losses, g_gen, g_disc


def train_step(state, images, heatmaps, cfg):
    """Advance one iteration; returns ``(new_state, StepMetrics)``."""
    images = np.asarray(images, dtype=np.float64)
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    losses, g_gen, g_disc = compute_step(state, images, heatmaps, cfg)
    for name in ("l_real", "l_fake", "l_D", "gen_loss"):
        v = losses[name]
        if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
            raise TrainingDivergence(state.iteration, losses)
    lr = lr_schedule(cfg.learning_rate, state.iteration, cfg)

    gen_params, gen_opt = adam_update(state.gen.params, g_gen, state.gen_opt, lr, cfg.weight_decay)
    gen = milnet.with_params(state.gen, gen_params)
    disc, disc_opt = state.disc, state.disc_opt
    if g_disc is not None:
        disc_params, disc_opt = adam_update(state.disc.params, g_disc, state.disc_opt, lr, cfg.weight_decay)
        disc = milnet.with_params(state.disc, disc_params)

    B = images.shape[0]
    if cfg.adversarial:
        adv = update_k(state.adv, losses["l_real"] / B, losses["l_fake"] / B, cfg.loss_config)
    else:
        adv = replace(state.adv, k=0.0, step=state.adv.step + 1,
                      last_l_real=losses["l_real"] / B, last_l_fake=losses["l_fake"] / B)
    new_state = replace(state, gen=gen, disc=disc, gen_opt=gen_opt, disc_opt=disc_opt, adv=adv,
                        iteration=state.iteration + 1)
    metrics = StepMetrics(state.iteration, losses["l_real"], losses["l_fake"], losses["l_D"],
                          losses["gen_loss"], adv.k, lr, losses["heatmap_l2"])
    return new_state, metrics


def batch_indices(seed, iteration, n, batch_size):
    rng = np.random.default_rng([seed, iteration, 7])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def train(state, data, cfg, iterations=None, on_step=None, checkpoint_every=0, checkpoint_fn=None):
    """Run until ``iterations`` total steps; batches depend only on (seed, iteration)."""
    stop = cfg.total_iterations if iterations is None else iterations
    history = []
    while state.iteration < stop:
        idx = batch_indices(state.seed, state.iteration, len(data), cfg.batch_size)
        state, m = train_step(state, data.images[idx], data.heatmaps[idx], cfg)
        history.append(m)
        if on_step is not None:
            on_step(m)
        if checkpoint_every and checkpoint_fn is not None and state.iteration % checkpoint_every == 0:
            checkpoint_fn(state)
    return state, history


# -- checkpoints --------------------------------------------------------------------

MAGIC = b"AMIL"
CHECKPOINT_VERSION = 1
CHECKSUM_MOD = 2 ** 64
POOL_CODES = {"adjust": 0, "mean": 1, "max": 2}


def _arch(net):
    return np.array([net.input_dim, net.out_dim, net.hidden_size, net.level_count, net.score_dim,
                     net.pool_iterations, POOL_CODES[net.pooling]], dtype=np.float64)


def _net_from(arch, params):
    code = {v: k for k, v in POOL_CODES.items()}[int(arch[6])]
    a = [int(x) for x in arch[:6]]
    return milnet.MilNetwork(params, a[0], a[1], a[2], a[3], a[4], a[5], code)


def state_to_tensors(state):
    t = {
        "meta.iteration": np.array(float(state.iteration)),
        "meta.seed": np.array(float(state.seed)),
        "meta.pose": np.array([state.pose.image_size, state.pose.joints, state.pose.patch_size,
                               state.pose.sigma_h], dtype=np.float64),
        "meta.gen_arch": _arch(state.gen),
        "meta.disc_arch": _arch(state.disc),
        "adv.state": np.array([state.adv.k, state.adv.step, state.adv.last_l_real,
                               state.adv.last_l_fake], dtype=np.float64),
        "opt.gen.t": np.array(float(state.gen_opt.t)),
        "opt.disc.t": np.array(float(state.disc_opt.t)),
    }
    for prefix, net, opt in (("gen", state.gen, state.gen_opt), ("disc", state.disc, state.disc_opt)):
        for name, p in net.params.items():
            t[f"{prefix}.{name}"] = p
            t[f"opt.{prefix}.m.{name}"] = opt.m[name]
            t[f"opt.{prefix}.v.{name}"] = opt.v[name]
    return t


def tensors_to_state(t):
    nets, opts = {}, {}
    for prefix in ("gen", "disc"):
        params = {k[len(prefix) + 1:]: v for k, v in t.items() if k.startswith(prefix + ".")}
        m = {k[len(f"opt.{prefix}.m."):]: v for k, v in t.items() if k.startswith(f"opt.{prefix}.m.")}
        v = {k[len(f"opt.{prefix}.v."):]: v for k, v in t.items() if k.startswith(f"opt.{prefix}.v.")}
        nets[prefix] = _net_from(t[f"meta.{prefix}_arch"], params)
        opts[prefix] = AdamMoments(m, v, int(t[f"opt.{prefix}.t"]))
    adv = t["adv.state"]
    S, J, P, sigma = t["meta.pose"]
    pose = PoseConfig(image_size=int(S), joints=int(J), patch_size=int(P), sigma_h=float(sigma))
    return TrainState(nets["gen"], nets["disc"], opts["gen"], opts["disc"],
                      AdversarialState(float(adv[0]), int(adv[1]), float(adv[2]), float(adv[3])),
                      int(t["meta.iteration"]), int(t["meta.seed"]), pose)


def encode_tensors(tensors):
    out = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    checksum = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")  # keeps rank 0, unlike ascontiguousarray
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        raw = a.tobytes()
        out.append(raw)
        checksum = (checksum + int(np.sum(np.frombuffer(raw, dtype="<u8"), dtype=np.uint64))) % CHECKSUM_MOD
    out.append(struct.pack("<Q", checksum))
    return b"".join(out)


def decode_tensors(buf):
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ParseError("not an AMIL checkpoint (bad magic)", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    pos = 8
    end = len(buf) - 8
    tensors = {}
    checksum = 0

    def need(n, what):
        if pos + n > end:
            raise ParseError(f"truncated checkpoint while reading {what}", pos)

    while pos < end:
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1, "name")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not valid UTF-8", pos) from None
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        need(8 * rank, "dimensions")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(8 * count, f"values of {name}")
        raw = buf[pos:pos + 8 * count]
        pos += 8 * count
        words = np.frombuffer(raw, dtype="<u8")
        checksum = (checksum + int(np.sum(words, dtype=np.uint64))) % CHECKSUM_MOD
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != end or len(buf) < 16:
        raise ParseError("truncated checkpoint (missing checksum)", pos)
    (stored,) = struct.unpack_from("<Q", buf, end)
    if stored != checksum:
        raise ParseError("checkpoint checksum mismatch", end)
    return tensors


def save_checkpoint(path, state):
    data = encode_tensors(state_to_tensors(state))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    tensors = decode_tensors(buf)
    try:
        return tensors_to_state(tensors)
    except KeyError as exc:
        raise ParseError(f"checkpoint lacks record {exc}", len(buf)) from None
