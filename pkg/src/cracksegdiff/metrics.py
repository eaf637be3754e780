"""Pixel and boundary segmentation scores.

Conventions: when prediction and ground truth are both empty every score is
1 (nothing to find, nothing found); when exactly one is empty, overlap scores
are 0.  Aggregates are unweighted means of per-image scores.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

SCORE_NAMES = ("f1", "iou", "bf_score", "precision", "recall", "accuracy")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary (0/1)")
        arr = arr.astype(bool)
    return arr


def confusion(pred, gt) -> ConfusionCounts:
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def scores(c: ConfusionCounts) -> dict[str, float]:
    """precision, recall, f1, iou and accuracy from confusion counts.

    A zero denominator scores 1.0 only when both masks are empty, else 0.0.
    """
    vacuous = 1.0 if c.tp + c.fp + c.fn == 0 else 0.0

    def ratio(num: int, den: int) -> float:
        return vacuous if den == 0 else num / den

    return {
        "precision": ratio(c.tp, c.tp + c.fp),
        "recall": ratio(c.tp, c.tp + c.fn),
        "f1": ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "iou": ratio(c.tp, c.tp + c.fp + c.fn),
        "accuracy": ratio(c.tp + c.tn, c.total),
    }


_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary(mask) -> np.ndarray:
    """Foreground pixels 4-adjacent to background; outside the image is background."""
    mask = _as_binary(mask, "mask")
    inner = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~inner


def bf_score(pred, gt, theta: float = 2.0) -> float:
    """Boundary F1 with a Euclidean distance tolerance of ``theta`` pixels."""
    if theta < 0:
        raise ValueError("theta must be >= 0")
    pb, gb = boundary(pred), boundary(gt)
    n_p, n_g = int(pb.sum()), int(gb.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    to_gt = ndimage.distance_transform_edt(~gb)
    to_pred = ndimage.distance_transform_edt(~pb)
    precision = float(np.mean(to_gt[pb] <= theta))
    recall = float(np.mean(to_pred[gb] <= theta))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= threshold


def image_scores(pred, gt, theta: float = 2.0) -> dict[str, float]:
    out = scores(confusion(pred, gt))
    out["bf_score"] = bf_score(pred, gt, theta)
    return out


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    theta: float = 2.0
    meta: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.rows)

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {k: float("nan") for k in SCORE_NAMES}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in SCORE_NAMES}

    def to_json(self) -> dict:
        return {
            "aggregate": self.aggregate(),
            "bf_theta": self.theta,
            "count": self.count,
            "averaging": "mean of per-image scores",
            **self.meta,
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "metrics.csv", out_dir / "metrics.json"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", *SCORE_NAMES], lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({"id": r["id"], **{k: repr(float(r[k])) for k in SCORE_NAMES}})
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    @classmethod
    def read(cls, out_dir) -> "MetricsReport":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "metrics.json").read_text())
        with open(out_dir / "metrics.csv", newline="") as fh:
            rows = [{"id": r["id"], **{k: float(r[k]) for k in SCORE_NAMES}} for r in csv.DictReader(fh)]
        extra = {k: v for k, v in meta.items() if k not in ("aggregate", "bf_theta", "count", "averaging")}
        return cls(rows=rows, theta=meta["bf_theta"], meta=extra)


def evaluate_masks(ids, preds, gts, theta: float = 2.0, meta: dict | None = None) -> MetricsReport:
    rows = []
    for sid, p, g in zip(ids, preds, gts, strict=True):
        rows.append({"id": sid, **image_scores(p, g, theta)})
    rows.sort(key=lambda r: r["id"])
    return MetricsReport(rows=rows, theta=theta, meta=dict(meta or {}))


__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "bf_score",
    "binarize",
    "boundary",
    "confusion",
    "evaluate_masks",
    "image_scores",
    "scores",
]
