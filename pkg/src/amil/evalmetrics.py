"""PCK / PCKh, tolerance sweeps and joint confusion matrices."""
import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError
from .posedomain import HEAD_SEGMENT, TORSO_SEGMENT

NORMALIZERS = ("torso", "head_segment")


@dataclass
class PckResult:
    per_joint_rate: dict
    mean_rate: float
    r: float
    normalizer: str
    joint_names: list = field(default_factory=list)
    skipped_samples: int = 0
    per_joint_count: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["joint", "rate"])
        for j, rate in self.per_joint_rate.items():
            name = self.joint_names[j] if j < len(self.joint_names) else str(j)
            w.writerow([name, repr(float(rate))])
        w.writerow(["mean", repr(float(self.mean_rate))])
        return buf.getvalue()


def _as_arrays(kps):
    xy = np.stack([np.asarray(k.xy, dtype=np.float64) for k in kps]) if kps else np.zeros((0, 0, 2))
    vis = np.stack([np.asarray(k.visible, dtype=bool) for k in kps]) if kps else np.zeros((0, 0), bool)
    return xy, vis


def _aligned(pred, gt):
    if len(pred) != len(gt):
        raise ShapeError(f"{len(pred)} predictions for {len(gt)} ground-truth sets")
    pxy, _ = _as_arrays(pred)
    gxy, gvis = _as_arrays(gt)
    if pxy.shape != gxy.shape:
        raise ShapeError(f"prediction shape {pxy.shape} != ground truth shape {gxy.shape}")
    return pxy, gxy, gvis


def normalized_errors(pred, gt, normalizer="torso", segment=None):
    """Per-joint error over segment length; NaN where excluded.

    Returns ``(errors (N, J), skipped_count)``; invisible ground-truth joints and
    samples with a degenerate or invisible normalising segment are NaN.
    """
    pxy, gxy, gvis = _aligned(pred, gt)
    N, J = gvis.shape
    if segment is None:
        table = TORSO_SEGMENT if normalizer == "torso" else HEAD_SEGMENT
        if normalizer not in NORMALIZERS:
            raise ValueError(f"unknown normalizer {normalizer!r}")
        segment = table[J]
    a, b = segment
    seg = np.linalg.norm(gxy[:, a] - gxy[:, b], axis=1) if N else np.zeros(0)
    usable = (seg > 0) & gvis[:, a] & gvis[:, b] if N else np.zeros(0, bool)
    err = np.linalg.norm(pxy - gxy, axis=2) / np.where(usable, seg, 1.0)[:, None]
    err[~gvis] = np.nan
    err[~usable] = np.nan
    return err, int(np.sum(~usable))


def pck(pred, gt, r=0.2, normalizer="torso", joint_names=None, segment=None):
    """Fraction of visible joints within ``r`` segment lengths, pooled per joint."""
    err, skipped = normalized_errors(pred, gt, normalizer, segment)
    counted = ~np.isnan(err)
    correct = counted & (np.nan_to_num(err, nan=np.inf) <= r)
    per_joint, counts = {}, {}
    for j in range(err.shape[1]):
        n = int(counted[:, j].sum())
        counts[j] = n
        if n:
            per_joint[j] = float(correct[:, j].sum()) / n
    mean = float(np.mean(list(per_joint.values()))) if per_joint else 0.0
    return PckResult(per_joint, mean, float(r), normalizer, list(joint_names or []), skipped, counts)


def pck_curve(pred, gt, r_values, normalizer="torso", joint_names=None, segment=None):
    return [pck(pred, gt, r, normalizer, joint_names, segment) for r in r_values]


def curve_to_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "mean"])
    for res in results:
        w.writerow([repr(res.r), repr(res.mean_rate)])
    return buf.getvalue()


def confusion(pred, gt, assignment_radius):
    """Rows: predicted joint; columns: nearest visible gt joint, last column = miss.

    Each prediction is assigned to the closest visible ground-truth joint of the
    same sample if it lies within ``assignment_radius`` pixels (ties go to the
    lower joint index).
    """
    pxy, gxy, gvis = _aligned(pred, gt)
    N, J = gvis.shape[0], pxy.shape[1] if pxy.ndim == 3 else 0
    mat = np.zeros((J, J + 1), dtype=np.int64)
    for n in range(N):
        d = np.linalg.norm(pxy[n][:, None, :] - gxy[n][None, :, :], axis=2)
        d[:, ~gvis[n]] = np.inf
        nearest = np.argmin(d, axis=1)
        for i in range(J):
            j = nearest[i]
            if d[i, j] <= assignment_radius:
                mat[i, j] += 1
            else:
                mat[i, J] += 1
    return mat


def confusion_to_csv(mat, joint_names):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pred"] + list(joint_names) + ["miss"])
    for name, row in zip(joint_names, mat):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()
