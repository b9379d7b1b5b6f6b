"""Finite-difference audits of every hand-written backward pass."""
from dataclasses import dataclass, replace

import numpy as np

from . import milnet, pooling
from .losses import AdversarialState, LossConfig
from .numkernel import finite_diff_check
from .posedomain import PoseConfig, images_to_instances
from .trainer import (TrainConfig, TrainState, compute_step, generator_forward, reconstruct,
                      sum_sq)

COMPONENTS = ("pooling", "milnet", "margin", "coupled", "adversarial_disc", "adversarial_gen")
TOLERANCE = 1e-4
# Objectives here reach O(100), so a 1e-5 step is rounding-limited; 1e-4 is
# used instead. The bag losses are sharply curved (log of clamped
# probabilities) and additionally get Richardson extrapolation; the
# sum-of-squares adversarial objectives do not need it.
STEP = 1e-4


def noise_floor(value, step=STEP, tol=TOLERANCE):
    """Gradient magnitude below which central differences of ``value`` are rounding noise.

    Entries smaller than this are judged on absolute error ``tol * floor``,
    i.e. a hundred times the unit-roundoff error of the difference quotient.
    """
    return max(100.0 * np.finfo(float).eps * abs(value) / (step * tol), 1e-8)
# Central differences are meaningless across a ReLU kink or the pseudo-label
# threshold; draws with any such point closer than this are redrawn.
KINK_MARGIN = 1e-3
MAX_DRAWS = 50


@dataclass
class AuditRow:
    component: str
    seed: int
    max_relative_error: float
    worst_index: int
    param_count: int
    redraws: int = 0

    def passed(self, tol=TOLERANCE):
        return self.max_relative_error < tol


def _corrupt(grad, enabled):
    if enabled:
        grad = grad.copy()
        i = int(np.argmax(np.abs(grad)))
        grad[i] = grad[i] * 1.01 + 1e-3
    return grad


def _row(name, seed, report, redraws=0):
    return AuditRow(name, seed, report.max_relative_error, report.worst_index, report.param_count,
                    redraws)


def kink_distance(outputs):
    """Smallest |pre-activation| over every ReLU of a cached forward pass."""
    zs = outputs.cache["pre"] + outputs.cache["score_pre"]
    return min(float(np.min(np.abs(z))) for z in zs)


def _draw(make, seed, tag):
    """Call ``make(rng)`` until it reports a draw clear of kinks."""
    for attempt in range(MAX_DRAWS):
        drawn = make(np.random.default_rng([seed, tag, attempt]))
        if drawn[-1] > KINK_MARGIN:
            return drawn[:-1], attempt
    raise RuntimeError(f"no kink-free draw for seed {seed} after {MAX_DRAWS} attempts")


def audit_pooling(seed, corrupt=False):
    rng = np.random.default_rng([seed, 11])
    K, d = int(rng.integers(1, 9)), int(rng.integers(1, 17))
    feats = rng.normal(size=(K, d))
    g = rng.normal(size=d)
    _, state = pooling.adjust_pool(feats, 3)
    analytic = _corrupt(pooling.adjust_pool_backward(state, g), corrupt)
    rep = finite_diff_check(lambda f: float(pooling.adjust_pool(f, 3)[0] @ g), feats, analytic)
    return _row("pooling", seed, rep)


def _jitter(net, rng):
    # Zero-initialised biases put ReLU pre-activations exactly on the kink for
    # dead instances; audit at a generic point instead.
    for p in net.params.values():
        p += rng.normal(0.0, 0.1, size=p.shape)
    return net


def _small_net(rng, seed, input_dim, out_dim, score_dim=1):
    net = milnet.init_params(input_dim, out_dim, hidden_size=int(rng.integers(4, 9)), level_count=3,
                             score_dim=score_dim, pool_iterations=3, seed=[seed, 5])
    return _jitter(net, rng)


def _param_fn(net, objective):
    names = net.param_names()

    def f(vec):
        return objective(milnet.with_params(net, milnet.unflatten(vec, net.params, names)))
    return f, milnet.flatten(net.params, names)


def audit_milnet(seed, corrupt=False):
    def make(rng):
        K, d = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        net = _small_net(rng, seed, d, 3, score_dim=2)
        x = rng.normal(size=(2, K, d))
        out = milnet.forward(net, x)
        return rng, net, x, out, kink_distance(out)

    (rng, net, x, out), redraws = _draw(make, seed, 12)
    weights = [[rng.normal(size=a.shape) for a in group]
               for group in (out.per_level_scores, out.instance_scores, out.per_level_embeddings)]

    def project(o):
        return sum(float(np.sum(w * a)) for ws, group in
                   zip(weights, (o.per_level_scores, o.instance_scores, o.per_level_embeddings))
                   for w, a in zip(ws, group))

    grads, _ = milnet.backward(net, out, *weights)
    f, vec = _param_fn(net, lambda n: project(milnet.forward(n, x)))
    rep = finite_diff_check(f, vec, _corrupt(milnet.flatten(grads), corrupt), STEP, richardson=True,
                            floor=noise_floor(f(vec)))
    return _row("milnet", seed, rep, redraws)


def _bag_objective_audit(name, objective, seed, corrupt):
    cfg = LossConfig()

    def make(rng):
        d = int(rng.integers(2, 7))
        net = _small_net(rng, seed, d, 1)
        bag = pooling.InstanceBag(rng.normal(size=(4, d)), int(rng.integers(0, 2)))
        out = milnet.forward(net, bag)
        margin = kink_distance(out)
        for h in out.instance_scores:
            q = -np.expm1(-cfg.prob_lambda * h)
            margin = min(margin, float(np.min(np.abs(q - 0.5))))
        return net, bag, margin

    (net, bag), redraws = _draw(make, seed, 13 if name == "margin" else 14)
    _, grads = objective(net, bag, cfg=cfg)
    f, vec = _param_fn(net, lambda n: objective(n, bag, cfg=cfg)[0])
    rep = finite_diff_check(f, vec, _corrupt(milnet.flatten(grads), corrupt), STEP, richardson=True,
                            floor=noise_floor(f(vec)))
    return _row(name, seed, rep, redraws)


def audit_margin(seed, corrupt=False):
    return _bag_objective_audit("margin", milnet.margin_objective, seed, corrupt)


def audit_coupled(seed, corrupt=False):
    return _bag_objective_audit("coupled", milnet.coupled_objective, seed, corrupt)


def _adversarial_setup(seed):
    pose = PoseConfig(image_size=8, patch_size=4)

    def make(rng):
        cfg = TrainConfig(hidden_size=int(rng.integers(4, 7)), seed=int(rng.integers(2**31)))
        state = TrainState.fresh(pose, cfg)
        state = replace(state, gen=_jitter(state.gen, rng), disc=_jitter(state.disc, rng),
                        adv=AdversarialState(k=float(rng.uniform(0.1, 0.9))))
        images = rng.uniform(size=(2, 8, 8))
        hms = rng.uniform(size=(2, pose.joints, pose.grid, pose.grid))
        inst = images_to_instances(images, pose.patch_size)
        gout, _, fake = generator_forward(state.gen, inst, pose)
        margin = min(kink_distance(gout), kink_distance(reconstruct(state.disc, inst, hms, pose)[0]),
                     kink_distance(reconstruct(state.disc, inst, fake, pose)[0]))
        return state, cfg, images, hms, margin

    return _draw(make, seed, 15)


def audit_adversarial_disc(seed, corrupt=False):
    """(l_real - k l_fake) / B w.r.t. discriminator parameters."""
    (state, cfg, images, hms), redraws = _adversarial_setup(seed)
    _, _, g_disc = compute_step(state, images, hms, cfg)
    B = images.shape[0]
    inst = images_to_instances(images, state.pose.patch_size)
    _, _, fake = generator_forward(state.gen, inst, state.pose)
    k = state.adv.k

    both_inst = np.concatenate([inst, inst])
    both_hm = np.concatenate([hms, fake])

    def objective(disc):
        # real and fake batches share one forward pass; rows are independent
        _, rec = reconstruct(disc, both_inst, both_hm, state.pose)
        return (sum_sq(hms - rec[:B]) - k * sum_sq(fake - rec[B:])) / B

    f, vec = _param_fn(state.disc, objective)
    rep = finite_diff_check(f, vec, _corrupt(milnet.flatten(g_disc), corrupt), STEP,
                            floor=noise_floor(f(vec)))
    return _row("adversarial_disc", seed, rep, redraws)


def audit_adversarial_gen(seed, corrupt=False):
    """(per-level L2 + reconstruction gap) / B w.r.t. generator parameters."""
    (state, cfg, images, hms), redraws = _adversarial_setup(seed)
    _, g_gen, _ = compute_step(state, images, hms, cfg)
    B = images.shape[0]
    inst = images_to_instances(images, state.pose.patch_size)

    def objective(gen):
        _, levels, fake = generator_forward(gen, inst, state.pose)
        _, rec_fake = reconstruct(state.disc, inst, fake, state.pose)
        return (sum(sum_sq(lv - hms) for lv in levels) + sum_sq(fake - rec_fake)) / B

    f, vec = _param_fn(state.gen, objective)
    rep = finite_diff_check(f, vec, _corrupt(milnet.flatten(g_gen), corrupt), STEP,
                            floor=noise_floor(f(vec)))
    return _row("adversarial_gen", seed, rep, redraws)


AUDITS = {
    "pooling": audit_pooling,
    "milnet": audit_milnet,
    "margin": audit_margin,
    "coupled": audit_coupled,
    "adversarial_disc": audit_adversarial_disc,
    "adversarial_gen": audit_adversarial_gen,
}


def run_audits(seeds, components=COMPONENTS, corrupt=None):
    """Run the selected audits for every seed; ``corrupt`` names a component to sabotage."""
    rows = []
    for name in components:
        for seed in seeds:
            rows.append(AUDITS[name](seed, corrupt=(corrupt == name)))
    return rows
