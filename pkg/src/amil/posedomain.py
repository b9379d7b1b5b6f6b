"""Synthetic stick-figure poses, heatmap targets, image bags and decoding.

Coordinates are continuous pixel positions ``(x, y)`` with ``x`` along columns
and ``y`` down the rows; pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``.
The figure faces the camera, so the person's left side is drawn on the image
right.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .pooling import InstanceBag

MPII_JOINTS = ("r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
               "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder",
               "l_elbow", "l_wrist")
MPII_PAIRS = ((0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13))

DESK_JOINTS = ("head", "neck", "pelvis", "l_hand", "r_hand", "l_foot", "r_foot")
DESK_FROM_MPII = (9, 8, 6, 15, 10, 5, 0)
DESK_PAIRS = ((3, 4), (5, 6))

# (a, b) endpoints of the normalising segments used by PCK / PCKh
TORSO_SEGMENT = {7: (1, 2), 16: (3, 12)}
HEAD_SEGMENT = {7: (0, 1), 16: (9, 8)}

LIMBS = ((9, 8), (8, 7), (7, 6), (7, 12), (7, 13), (12, 11), (11, 10), (13, 14), (14, 15),
         (6, 2), (6, 3), (2, 1), (1, 0), (3, 4), (4, 5))

INTENSITY_LEVELS = 64  # image values are multiples of 1/64 so text files round-trip exactly


@dataclass(frozen=True)
class PoseConfig:
    image_size: int = 64
    joints: int = 7
    patch_size: int = 8
    limb_thickness: float = 2.0
    sigma_h: float = 1.0
    torso_range: tuple = (10.0, 16.0)
    margin: float = 2.0
    noise: float = 0.0
    occlusion: bool = False
    occlusion_prob: float = 0.5

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image and patch sizes must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.joints not in (7, 16):
            raise ConfigError(f"joint layout must have 7 or 16 joints, got {self.joints}")
        if self.limb_thickness < np.sqrt(2.0):
            raise ConfigError("limb thickness below sqrt(2) can miss keypoint pixels")
        if not self.sigma_h > 0:
            raise ConfigError("heatmap sigma must be positive")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def pairs(self):
        return DESK_PAIRS if self.joints == 7 else MPII_PAIRS

    @property
    def joint_names(self):
        return DESK_JOINTS if self.joints == 7 else MPII_JOINTS


@dataclass
class KeypointSet:
    xy: np.ndarray
    visible: np.ndarray
    image_size: int = 64

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)

    def __len__(self):
        return self.xy.shape[0]


@dataclass
class PoseSample:
    image: np.ndarray
    keypoints: KeypointSet
    gt_heatmaps: np.ndarray = field(repr=False)


def _dir(deg):
    t = np.deg2rad(deg)
    return np.array([np.cos(t), np.sin(t)])


def _skeleton(rng, torso):
    """Sixteen joints of a front-facing figure, pelvis at the origin."""
    j = np.zeros((16, 2))
    t_ang = -90.0 + rng.uniform(-15, 15)
    up = _dir(t_ang)
    side = _dir(t_ang + 90.0)  # towards the person's left
    j[6] = 0.0
    j[7] = j[6] + torso * up
    neck_ang = t_ang + rng.uniform(-15, 15)
    j[8] = j[7] + 0.25 * torso * _dir(neck_ang)
    j[9] = j[8] + 0.4 * torso * _dir(neck_ang + rng.uniform(-10, 10))
    j[13] = j[7] + 0.35 * torso * side
    j[12] = j[7] - 0.35 * torso * side
    j[3] = j[6] + 0.25 * torso * side
    j[2] = j[6] - 0.25 * torso * side
    for sh, el, wr, mirror in ((13, 14, 15, False), (12, 11, 10, True)):
        ang = rng.uniform(-80, 100)
        bend = rng.uniform(-60, 60)
        if mirror:
            ang, bend = 180.0 - ang, -bend
        j[el] = j[sh] + 0.6 * torso * _dir(ang)
        j[wr] = j[el] + 0.55 * torso * _dir(ang + bend)
    for hp, kn, an, mirror in ((3, 4, 5, False), (2, 1, 0, True)):
        ang = rng.uniform(60, 110)
        bend = rng.uniform(-30, 30)
        if mirror:
            ang, bend = 180.0 - ang, -bend
        j[kn] = j[hp] + 0.7 * torso * _dir(ang)
        j[an] = j[kn] + 0.65 * torso * _dir(ang + bend)
    return j


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        t = 0.0
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def draw_skeleton(joints16, size, thickness):
    centers = np.arange(size) + 0.5
    px, py = np.meshgrid(centers, centers)
    radius = thickness / 2.0
    img = np.zeros((size, size))
    for a, b in LIMBS:
        img[_segment_distance(px, py, joints16[a], joints16[b]) <= radius] = 1.0
    return img


def generate_sample(rng_seed, config=PoseConfig()):
    """One deterministic synthetic sample for ``rng_seed`` (int or sequence)."""
    cfg = config
    rng = np.random.default_rng(rng_seed)
    S = cfg.image_size
    j = _skeleton(rng, rng.uniform(*cfg.torso_range))
    room = S - 2.0 * cfg.margin
    extent = j.max(axis=0) - j.min(axis=0)
    if extent.max() > room:
        j = j * (room / extent.max() * 0.999)
        extent = j.max(axis=0) - j.min(axis=0)
    lo = cfg.margin - j.min(axis=0)
    hi = S - cfg.margin - j.max(axis=0)
    j = j + lo + rng.uniform(0.0, 1.0, size=2) * (hi - lo)
    img = draw_skeleton(j, S, cfg.limb_thickness)
    if cfg.noise > 0:
        noise = np.floor(rng.uniform(0.0, cfg.noise, size=(S, S)) * INTENSITY_LEVELS) / INTENSITY_LEVELS
        img = np.maximum(img, noise)
    picked = np.array(DESK_FROM_MPII) if cfg.joints == 7 else np.arange(16)
    xy = j[picked]
    visible = np.ones(len(picked), dtype=bool)
    if cfg.occlusion and rng.uniform() < cfg.occlusion_prob:
        w, h = rng.integers(S // 6, S // 3 + 1, size=2)
        c0 = rng.integers(0, S - w + 1)
        r0 = rng.integers(0, S - h + 1)
        img[r0:r0 + h, c0:c0 + w] = 0.0
        cols = np.floor(xy[:, 0]).astype(int)
        rows = np.floor(xy[:, 1]).astype(int)
        inside = (cols >= c0) & (cols < c0 + w) & (rows >= r0) & (rows < r0 + h)
        visible &= ~inside
    kps = KeypointSet(xy, visible, S)
    hm = render_heatmap(kps, cfg.grid, cfg.grid, cfg.sigma_h)
    return PoseSample(img, kps, hm)


def generate_dataset(count, seed, config=PoseConfig()):
    return [generate_sample([seed, i], config) for i in range(count)]


SPLITS = ("train", "val", "test")


def generate_split(count, seed, split, config=PoseConfig()):
    """Samples of one split; each split draws from its own seed stream."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    code = SPLITS.index(split)
    return [generate_sample([seed, code, i], config) for i in range(count)]


def keypoint_cells(keypoints, H, W):
    S = keypoints.image_size
    col = np.clip(np.floor(keypoints.xy[:, 0] * W / S), 0, W - 1).astype(int)
    row = np.clip(np.floor(keypoints.xy[:, 1] * H / S), 0, H - 1).astype(int)
    return row, col


def render_heatmap(keypoints, H, W, sigma_h=1.0):
    """Gaussian per joint centred on the heatmap cell holding the keypoint."""
    row, col = keypoint_cells(keypoints, H, W)
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    d2 = (rr[None] - row[:, None, None]) ** 2 + (cc[None] - col[:, None, None]) ** 2
    hm = np.exp(-d2 / (2.0 * sigma_h ** 2))
    hm[~keypoints.visible] = 0.0
    return hm


def decode_pose(hm, original_size):
    """Per-channel argmax mapped to the cell centre in image pixels."""
    hm = np.asarray(hm, dtype=np.float64)
    J, H, W = hm.shape
    flat = np.argmax(hm.reshape(J, -1), axis=1)  # first maximum in row-major order
    row, col = np.divmod(flat, W)
    xy = np.stack([(col + 0.5) * original_size / W, (row + 0.5) * original_size / H], axis=1)
    return KeypointSet(xy, np.ones(J, dtype=bool), original_size)


def image_to_bag(image, patch_size, bag_label=0, bag_id=None):
    """Row-major grid of flattened patches, each with its normalised centre."""
    return InstanceBag(images_to_instances(image, patch_size), bag_label, bag_id)


def images_to_instances(images, patch_size):
    images = np.asarray(images, dtype=np.float64)
    S = images.shape[-1]
    if images.shape[-2] != S or S % patch_size:
        raise ConfigError(f"image of shape {images.shape[-2:]} cannot be tiled by {patch_size}-pixel patches")
    G = S // patch_size
    lead = images.shape[:-2]
    patches = images.reshape(*lead, G, patch_size, G, patch_size)
    patches = np.moveaxis(patches, -3, -2).reshape(*lead, G * G, patch_size * patch_size)
    centers = (np.arange(G) + 0.5) / G
    pos = np.stack(np.meshgrid(centers, centers, indexing="ij"), axis=-1).reshape(G * G, 2)
    pos = np.broadcast_to(pos, (*lead, G * G, 2))
    return np.concatenate([patches, pos], axis=-1)


def instances_to_image(instances, patch_size):
    """Inverse of ``images_to_instances`` (positional features dropped)."""
    inst = np.asarray(instances)
    K = inst.shape[-2]
    G = int(round(np.sqrt(K)))
    lead = inst.shape[:-2]
    p = inst[..., : patch_size * patch_size].reshape(*lead, G, G, patch_size, patch_size)
    return np.moveaxis(p, -3, -2).reshape(*lead, G * patch_size, G * patch_size)


def heatmap_to_instance_features(hm):
    """(..., J, G, G) heatmaps -> (..., G*G, J) per-cell values in instance order."""
    hm = np.asarray(hm, dtype=np.float64)
    J, G = hm.shape[-3], hm.shape[-1]
    return np.swapaxes(hm.reshape(*hm.shape[:-3], J, G * G), -1, -2)


def instance_features_to_heatmap(feats, G):
    feats = np.asarray(feats)
    J = feats.shape[-1]
    return np.swapaxes(feats, -1, -2).reshape(*feats.shape[:-2], J, G, G)


def discriminator_instances(image_instances, hm):
    """Concatenate each patch instance with the heatmap values of its cell."""
    return np.concatenate([image_instances, heatmap_to_instance_features(hm)], axis=-1)


def mirror_image(image):
    return np.asarray(image)[..., ::-1].copy()


def mirror_heatmap(hm, pairs):
    """Flip columns and swap left/right channels."""
    hm = np.asarray(hm)[..., ::-1].copy()
    out = hm.copy()
    for a, b in pairs:
        out[..., a, :, :] = hm[..., b, :, :]
        out[..., b, :, :] = hm[..., a, :, :]
    return out


def flip_averaged_heatmaps(net, image, pairs):
    """Average ``net(image)`` with the un-mirrored output on the mirrored image.

    ``net`` is any callable mapping an image (or stack of images) to heatmaps.
    """
    if pairs is None:
        raise ConfigError("flip averaging needs a left/right pairing table")
    direct = np.asarray(net(image), dtype=np.float64)
    flipped = mirror_heatmap(net(mirror_image(image)), pairs)
    return (direct + flipped) / 2.0


# -- dataset files --------------------------------------------------------------

HEADER_TAG = "AMIL-DATA"
FORMAT_VERSION = "v1"


def format_dataset(samples, config):
    S, J, P = config.image_size, config.joints, config.patch_size
    lines = [f"{HEADER_TAG} {FORMAT_VERSION} S={S} J={J} P={P} count={len(samples)}"]
    for s in samples:
        lines.append(" ".join(f"{v:.6g}" for v in s.image.reshape(-1)))
        lines.append(" ".join(f"{float(x)!r} {float(y)!r} {int(v)}"
                              for (x, y), v in zip(s.keypoints.xy, s.keypoints.visible)))
    return "\n".join(lines) + "\n"


def write_dataset(path, samples, config):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_dataset(samples, config))


def parse_dataset(text, sigma_h=1.0):
    """Parse dataset text; returns ``(PoseConfig, samples)``."""
    lines = text.split("\n")
    offsets = np.cumsum([0] + [len(l.encode("utf-8")) + 1 for l in lines])
    head = lines[0].split()
    if len(head) != 6 or head[0] != HEADER_TAG:
        raise ParseError("missing AMIL-DATA header", 0)
    if head[1] != FORMAT_VERSION:
        raise ParseError(f"unsupported dataset version {head[1]}", 0)
    try:
        fields = dict(item.split("=", 1) for item in head[2:])
        S, J, P, count = (int(fields[k]) for k in ("S", "J", "P", "count"))
    except (ValueError, KeyError) as exc:
        raise ParseError(f"malformed header: {exc}", 0) from None
    config = PoseConfig(image_size=S, joints=J, patch_size=P, sigma_h=sigma_h)
    samples = []
    for i in range(count):
        li = 1 + 2 * i
        if li + 1 >= len(lines):
            raise ParseError(f"file ends before sample {i}", int(offsets[min(li, len(lines) - 1)]))
        try:
            img = np.array(lines[li].split(), dtype=np.float64)
            kp = np.array(lines[li + 1].split(), dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"sample {i}: {exc}", int(offsets[li])) from None
        if img.size != S * S:
            raise ParseError(f"sample {i}: expected {S * S} pixel values, got {img.size}", int(offsets[li]))
        if kp.size != 3 * J:
            raise ParseError(f"sample {i}: expected {3 * J} keypoint values, got {kp.size}", int(offsets[li + 1]))
        kp = kp.reshape(J, 3)
        kps = KeypointSet(kp[:, :2], kp[:, 2] != 0, S)
        samples.append(PoseSample(img.reshape(S, S), kps,
                                  render_heatmap(kps, config.grid, config.grid, sigma_h)))
    return config, samples


def read_dataset(path, sigma_h=1.0):
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read(), sigma_h)


@dataclass
class PoseArrays:
    """Stacked samples, the layout the trainer works on."""
    images: np.ndarray
    keypoints: np.ndarray
    visible: np.ndarray
    heatmaps: np.ndarray
    config: PoseConfig

    def __len__(self):
        return self.images.shape[0]

    def keypoint_sets(self):
        S = self.config.image_size
        return [KeypointSet(k, v, S) for k, v in zip(self.keypoints, self.visible)]


def stack_samples(samples, config):
    J, G, S = config.joints, config.grid, config.image_size
    if not samples:
        return PoseArrays(np.zeros((0, S, S)), np.zeros((0, J, 2)), np.zeros((0, J), bool),
                          np.zeros((0, J, G, G)), config)
    return PoseArrays(np.stack([s.image for s in samples]),
                      np.stack([s.keypoints.xy for s in samples]),
                      np.stack([s.keypoints.visible for s in samples]),
                      np.stack([s.gt_heatmaps for s in samples]), config)
