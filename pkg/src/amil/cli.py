"""Command-line entry point: ``amil gen-data|train|eval|gradcheck|pool-demo``.

Every command resolves its settings (defaults < ``--config`` file < flags),
archives them as ``config.txt`` in the output directory and only then starts
working. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import audit, pooling
from .errors import AmilError, ConfigError, TrainingDivergence, VersionError
from .evalmetrics import NORMALIZERS, confusion, confusion_to_csv, curve_to_csv, pck, pck_curve
from .losses import LossConfig
from .posedomain import (SPLITS, KeypointSet, PoseConfig, decode_pose, flip_averaged_heatmaps,
                         format_dataset, generate_split, keypoint_cells, read_dataset, stack_samples)
from .trainer import (DECAY_PRESETS, METRICS_HEADER, TrainConfig, TrainState, load_checkpoint,
                      predict_heatmaps, save_checkpoint, train)

DEFAULT_OUT = "amil_out"
EVAL_CHUNK = 32  # images per forward pass; fixed so results do not depend on --workers


class UsageError(Exception):
    pass


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text):
    return None if str(text).strip().lower() in ("", "none") else str(text)


@dataclass
class Param:
    name: str
    type: object
    default: object
    help: str = ""
    choices: tuple = None
    aliases: tuple = ()
    switch: bool = False  # boolean exposed as --name / --no-name


def _common():
    return [Param("out", str, None, "output directory (default: $AMIL_OUT or ./amil_out)"),
            Param("seed", int, 0, "random seed")]


def _pose_params():
    return [Param("image_size", int, 64), Param("joints", int, 7, choices=(7, 16)),
            Param("patch_size", int, 8), Param("limb_thickness", float, 2.0),
            Param("sigma_h", float, 1.0, "heatmap Gaussian width in cells"),
            Param("noise", float, 0.0, "background noise amplitude"),
            Param("occlusion", _bool, False, "mask a random rectangle", switch=True),
            Param("occlusion_prob", float, 0.5)]


COMMANDS = {
    "gen-data": _common() + _pose_params() + [
        Param("count", int, 1000, "samples in the train split"),
        Param("val_count", int, None, "samples in the val split (default: count // 5)"),
        Param("test_count", int, None, "samples in the test split (default: count // 5)"),
    ],
    "train": _common() + [
        Param("data", str, None, "training split file (default: <out>/train.amil)"),
        Param("sigma_h", float, 1.0),
        Param("learning_rate", float, 0.001), Param("weight_decay", float, 0.01),
        Param("total_iterations", int, 350, aliases=("--iterations",)),
        Param("decay_every", int, 20), Param("decay_base", float, 0.5),
        Param("decay_preset", _opt_str, None, "use a preset decay base", choices=(None,) + tuple(DECAY_PRESETS)),
        Param("batch_size", int, 16),
        Param("hidden_size", int, 128), Param("level_count", int, 3), Param("pool_iterations", int, 3),
        Param("pooling", str, "adjust", choices=pooling.POOL_MODES),
        Param("adversarial", _bool, True, "train against the discriminator", switch=True),
        Param("gamma", float, 0.5), Param("omega_k", float, 0.001),
        Param("checkpoint_every", int, 50, "0 disables intermediate checkpoints"),
        Param("resume", _opt_str, None, "checkpoint to continue from"),
    ],
    "eval": _common() + [
        Param("checkpoint", str, None, "default: <out>/checkpoint.amil"),
        Param("data", str, None, "evaluation split file (default: <out>/test.amil)"),
        Param("sigma_h", float, 1.0),
        Param("r", float, 0.2, "PCK tolerance"),
        Param("flip", _bool, True, "average with the mirrored image (on|off)"),
        Param("normalizer", str, "torso", choices=NORMALIZERS),
        Param("heatmaps", str, "model", "model predictions or ground-truth heatmaps", choices=("model", "gt")),
        Param("reference", str, "keypoints", "score against exact keypoints or their cell centres",
              choices=("keypoints", "grid")),
        Param("curve_points", int, 20), Param("curve_max", float, 1.0),
        Param("assignment_radius", float, 4.0, "confusion matrix radius in pixels"),
        Param("workers", int, 1),
    ],
    "gradcheck": _common() + [
        Param("component", str, "all", choices=("all",) + audit.COMPONENTS),
        Param("seeds", int, 20, "number of seeds, starting at --seed"),
        Param("corrupt", _opt_str, None, "test hook: sabotage one component's analytic gradient",
              choices=(None,) + audit.COMPONENTS),
    ],
    "pool-demo": _common() + [
        Param("bag", str, "1,0;0,1", "instances as 'a,b;c,d' (rows separated by ';')"),
        Param("iterations", int, 3),
        Param("mode", str, "adjust", choices=pooling.POOL_MODES),
    ],
}


def build_parser():
    parser = argparse.ArgumentParser(prog="amil", description="Adjust-pooling MIL pose toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, params in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat 'key = value' file; flags override it")
        for p in params:
            flags = ["--" + p.name.replace("_", "-"), *p.aliases]
            if p.switch:
                sp.add_argument(*flags, dest=p.name, action=argparse.BooleanOptionalAction,
                                default=argparse.SUPPRESS, help=p.help)
            else:
                sp.add_argument(*flags, dest=p.name, type=p.type, default=argparse.SUPPRESS,
                                help=p.help, metavar=p.name.upper())
    return parser


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def resolve(command, args, environ=None):
    """Merge defaults, config file and flags into one typed dict."""
    environ = os.environ if environ is None else environ
    params = {p.name: p for p in COMMANDS[command]}
    cfg = {name: p.default for name, p in params.items()}
    if getattr(args, "config", None):
        for key, text in read_config_file(args.config).items():
            if key not in params:
                raise UsageError(f"unknown config key {key!r} for {command}")
            try:
                cfg[key] = params[key].type(text)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None
    for name in params:
        if hasattr(args, name):
            cfg[name] = getattr(args, name)
    for name, p in params.items():
        if p.choices is not None and cfg[name] not in p.choices:
            raise UsageError(f"--{name.replace('_', '-')} must be one of {p.choices}, got {cfg[name]!r}")
    if cfg["out"] is None:
        cfg["out"] = environ.get("AMIL_OUT") or DEFAULT_OUT
    return cfg


def format_config(command, cfg):
    lines = [f"command = {command}"]
    lines += [f"{k} = {'none' if v is None else v}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


def _archive(command, cfg):
    os.makedirs(cfg["out"], exist_ok=True)
    _write_text(os.path.join(cfg["out"], "config.txt"), format_config(command, cfg))


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(cfg):
    pose = PoseConfig(image_size=cfg["image_size"], joints=cfg["joints"], patch_size=cfg["patch_size"],
                      limb_thickness=cfg["limb_thickness"], sigma_h=cfg["sigma_h"], noise=cfg["noise"],
                      occlusion=cfg["occlusion"], occlusion_prob=cfg["occlusion_prob"])
    counts = {"train": cfg["count"],
              "val": cfg["val_count"] if cfg["val_count"] is not None else cfg["count"] // 5,
              "test": cfg["test_count"] if cfg["test_count"] is not None else cfg["count"] // 5}
    if min(counts.values()) < 0:
        raise ConfigError("sample counts must be nonnegative")
    for split in SPLITS:
        path = os.path.join(cfg["out"], f"{split}.amil")
        samples = generate_split(counts[split], cfg["seed"], split, pose)
        _write_text(path, format_dataset(samples, pose))
        print(f"{split}: {counts[split]} samples -> {path}")
    print(f"seed {cfg['seed']}")
    return 0


def train_config(cfg):
    decay_base = cfg["decay_base"]
    if cfg["decay_preset"] is not None:
        decay_base = DECAY_PRESETS[cfg["decay_preset"]]
    adversarial = cfg["adversarial"]
    return TrainConfig(learning_rate=cfg["learning_rate"], weight_decay=cfg["weight_decay"],
                       total_iterations=cfg["total_iterations"], decay_every=cfg["decay_every"],
                       decay_base=decay_base, batch_size=cfg["batch_size"], seed=cfg["seed"],
                       loss_config=LossConfig(gamma=cfg["gamma"], omega_k=cfg["omega_k"]),
                       adversarial=adversarial, freeze_discriminator=not adversarial,
                       pooling=cfg["pooling"], hidden_size=cfg["hidden_size"],
                       level_count=cfg["level_count"], pool_iterations=cfg["pool_iterations"])


def _check_compatible(state, pose, tcfg=None):
    p = state.pose
    if (p.image_size, p.joints, p.patch_size) != (pose.image_size, pose.joints, pose.patch_size):
        raise VersionError(f"checkpoint expects S={p.image_size} J={p.joints} P={p.patch_size}, "
                          f"data has S={pose.image_size} J={pose.joints} P={pose.patch_size}")
    if tcfg is not None:
        g = state.gen
        want = (tcfg.pooling, tcfg.hidden_size, tcfg.level_count, tcfg.pool_iterations, tcfg.seed)
        have = (g.pooling, g.hidden_size, g.level_count, g.pool_iterations, state.seed)
        if want != have:
            raise VersionError(f"checkpoint architecture/seed {have} differs from the requested {want}")


def cmd_train(cfg):
    out = cfg["out"]
    data_path = cfg["data"] or os.path.join(out, "train.amil")
    pose, samples = read_dataset(data_path, cfg["sigma_h"])
    if not samples:
        raise ConfigError(f"{data_path} holds no samples")
    data = stack_samples(samples, pose)
    tcfg = train_config(cfg)
    metrics_path = os.path.join(out, "metrics.csv")
    ckpt_path = os.path.join(out, "checkpoint.amil")
    rows = []
    if cfg["resume"]:
        state = load_checkpoint(cfg["resume"])
        _check_compatible(state, pose, tcfg)
        state = _with_sigma(state, pose)
        if os.path.exists(metrics_path):
            # keep the rows logged before the checkpoint so the file matches an uninterrupted run
            with open(metrics_path, encoding="utf-8") as fh:
                rows = [l.rstrip("\n") for l in fh.readlines()[1:]
                        if l.strip() and int(l.split(",", 1)[0]) < state.iteration]
    else:
        state = TrainState.fresh(pose, tcfg)
    fh = open(metrics_path + ".tmp", "w", encoding="utf-8", newline="\n")
    try:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(r + "\n")

        def log(m):
            fh.write(m.csv_row() + "\n")

        def checkpoint(st):
            fh.flush()
            save_checkpoint(ckpt_path, st)

        start = time.time()
        try:
            state, history = train(state, data, tcfg, on_step=log,
                                   checkpoint_every=cfg["checkpoint_every"], checkpoint_fn=checkpoint)
        except TrainingDivergence as exc:
            _write_text(os.path.join(out, "divergence.json"),
                        json.dumps({"iteration": exc.iteration, "losses": exc.losses}, sort_keys=True) + "\n")
            raise
    finally:
        fh.close()
        os.replace(metrics_path + ".tmp", metrics_path)
    save_checkpoint(ckpt_path, state)
    last = history[-1] if history else None
    print(f"trained to iteration {state.iteration} in {time.time() - start:.1f}s")
    if last is not None:
        print(f"last: gen_loss={last.gen_loss:.4f} l_real={last.l_real:.4f} l_fake={last.l_fake:.4f} k={last.k:.4f}")
    print(f"metrics -> {metrics_path}\ncheckpoint -> {ckpt_path}")
    return 0


def _with_sigma(state, pose):
    return replace(state, pose=replace(state.pose, sigma_h=pose.sigma_h))


def _predict_chunk(args):
    gen, images, pose, flip = args
    if flip:
        return flip_averaged_heatmaps(lambda im: predict_heatmaps(gen, im, pose), images, pose.pairs)
    return predict_heatmaps(gen, images, pose)


def predict_all(gen, images, pose, flip, workers=1):
    """Heatmaps for every image, in fixed-size chunks (deterministic for any worker count)."""
    jobs = [(gen, images[i:i + EVAL_CHUNK], pose, flip) for i in range(0, len(images), EVAL_CHUNK)]
    if not jobs:
        return np.zeros((0, pose.joints, pose.grid, pose.grid))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_predict_chunk, jobs))
    else:
        parts = [_predict_chunk(j) for j in jobs]
    return np.concatenate(parts)


def grid_reference(kps, grid):
    """Ground truth snapped to heatmap cell centres, the resolution decoding can express."""
    S = kps.image_size
    row, col = keypoint_cells(kps, grid, grid)
    cell = S / grid
    xy = np.stack([(col + 0.5) * cell, (row + 0.5) * cell], axis=1)
    return KeypointSet(xy, kps.visible.copy(), S)


def cmd_eval(cfg):
    out = cfg["out"]
    data_path = cfg["data"] or os.path.join(out, "test.amil")
    pose, samples = read_dataset(data_path, cfg["sigma_h"])
    data = stack_samples(samples, pose)
    if cfg["heatmaps"] == "gt":
        hms = data.heatmaps
    else:
        state = load_checkpoint(cfg["checkpoint"] or os.path.join(out, "checkpoint.amil"))
        _check_compatible(state, pose)
        hms = predict_all(state.gen, data.images, pose, cfg["flip"], cfg["workers"])
    S = pose.image_size
    pred = [decode_pose(h, S) for h in hms]
    gt = data.keypoint_sets()
    if cfg["reference"] == "grid":
        gt = [grid_reference(k, pose.grid) for k in gt]
    names = list(pose.joint_names)
    res = pck(pred, gt, cfg["r"], cfg["normalizer"], names)
    rs = [cfg["curve_max"] * (i + 1) / cfg["curve_points"] for i in range(cfg["curve_points"])]
    curve = pck_curve(pred, gt, rs, cfg["normalizer"], names)
    mat = confusion(pred, gt, cfg["assignment_radius"])
    _write_text(os.path.join(out, "pck.csv"), res.to_csv())
    _write_text(os.path.join(out, "pck.json"), res.to_json() + "\n")
    _write_text(os.path.join(out, "curve.csv"), curve_to_csv(curve))
    _write_text(os.path.join(out, "confusion.csv"), confusion_to_csv(mat, names))
    label = "PCK" if cfg["normalizer"] == "torso" else "PCKh"
    print(f"{label}@{cfg['r']:g} on {len(samples)} samples (flip {'on' if cfg['flip'] else 'off'})")
    for j, rate in res.per_joint_rate.items():
        print(f"  {names[j]:<10s} {100 * rate:6.2f}")
    print(f"  {'mean':<10s} {100 * res.mean_rate:6.2f}")
    if res.skipped_samples:
        print(f"  skipped {res.skipped_samples} samples with a degenerate normalizing segment")
    return 0


def cmd_gradcheck(cfg):
    comps = audit.COMPONENTS if cfg["component"] == "all" else (cfg["component"],)
    seeds = range(cfg["seed"], cfg["seed"] + cfg["seeds"])
    start = time.time()
    rows = audit.run_audits(seeds, comps, corrupt=cfg["corrupt"])
    print(f"{'component':<18s} {'seeds':>5s} {'max_rel_err':>12s} {'worst_seed':>10s} {'worst_idx':>9s}  status")
    failed = []
    lines = ["component,seed,max_relative_error,worst_index,param_count,redraws"]
    for comp in comps:
        mine = [r for r in rows if r.component == comp]
        worst = max(mine, key=lambda r: r.max_relative_error)
        ok = all(r.passed() for r in mine)
        if not ok:
            failed.append(worst)
        print(f"{comp:<18s} {len(mine):>5d} {worst.max_relative_error:>12.3e} {worst.seed:>10d} "
              f"{worst.worst_index:>9d}  {'ok' if ok else 'FAIL'}")
        lines += [f"{r.component},{r.seed},{r.max_relative_error!r},{r.worst_index},{r.param_count},{r.redraws}"
                  for r in mine]
    _write_text(os.path.join(cfg["out"], "gradcheck.csv"), "\n".join(lines) + "\n")
    print(f"{len(rows)} audits in {time.time() - start:.1f}s, tolerance {audit.TOLERANCE:g}")
    for w in failed:
        print(f"gradient check failed: {w.component} (seed {w.seed}, worst index {w.worst_index}, "
              f"relative error {w.max_relative_error:.3e})", file=sys.stderr)
    return 1 if failed else 0


def parse_bag(text):
    try:
        rows = [[float(v) for v in row.split(",")] for row in text.split(";") if row.strip()]
        return np.array(rows, dtype=np.float64)
    except ValueError:
        raise UsageError(f"cannot parse bag {text!r}; expected 'a,b;c,d'") from None


def cmd_pool_demo(cfg):
    feats = parse_bag(cfg["bag"])
    if feats.ndim != 2 or feats.size == 0:
        raise UsageError("bag must hold at least one instance of equal width")
    np.set_printoptions(precision=6, suppress=True)
    if cfg["mode"] != "adjust":
        s, _ = pooling.pool(feats, cfg["mode"])
        print(f"{cfg['mode']} pooling: s={s}  |s|={np.linalg.norm(s):.6f}")
        return 0
    _, state = pooling.adjust_pool(feats, cfg["iterations"])
    for t, step in enumerate(state.history, 1):
        print(f"iter {t}: b={step.temp_weights}  w={step.weights}  |s|={np.linalg.norm(step.embedding):.6f}")
    print(f"s={state.embedding}")
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "pool-demo": cmd_pool_demo}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    try:
        cfg = resolve(args.command, args)
    except (UsageError, OSError) as exc:
        print(f"amil {args.command}: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command != "pool-demo":
            _archive(args.command, cfg)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"amil {args.command}: {exc}", file=sys.stderr)
        return 2
    except (AmilError, OSError) as exc:
        print(f"amil {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
