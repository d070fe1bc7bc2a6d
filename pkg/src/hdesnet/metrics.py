"""Depth and segmentation metrics and the two training losses (forward only).

Depth ground truth of 0 marks an ignored pixel; every depth metric and loss
takes a :class:`ValidMask` and never looks at masked pixels.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, LabelError, ShapeError

PERSON = 1
DELTA1_THRESHOLD = 1.25
PRED_FLOOR_M = 1e-3
CSV_FIELDS = ("frame_id", "rmse", "delta1", "people_iou", "valid_pixels")


@dataclass(frozen=True)
class ValidMask:
    flags: np.ndarray

    @property
    def h(self) -> int:
        return self.flags.shape[0]

    @property
    def w(self) -> int:
        return self.flags.shape[1]

    @property
    def count(self) -> int:
        return int(self.flags.sum())


@dataclass
class MetricsReport:
    rmse: float
    delta1: float
    people_iou: float
    valid_pixel_count: int
    frame_id: str = ""

    def row(self) -> dict:
        return {"frame_id": self.frame_id, "rmse": f"{self.rmse:.10g}", "delta1": f"{self.delta1:.10g}",
                "people_iou": f"{self.people_iou:.10g}", "valid_pixels": self.valid_pixel_count}


def _plane(t) -> np.ndarray:
    a = np.asarray(t)
    if a.ndim == 4:
        if a.shape[:2] != (1, 1):
            raise ShapeError(f"expected a (1,1,h,w) map, got {a.shape}")
        a = a[0, 0]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {a.shape}")
    return a


def valid_mask(gt_depth) -> ValidMask:
    return ValidMask(_plane(gt_depth) > 0)


def _valid_pairs(pred, gt, mask: ValidMask):
    p, g = _plane(pred).astype(np.float64), _plane(gt).astype(np.float64)
    if p.shape != g.shape or mask.flags.shape != g.shape:
        raise ShapeError(f"shape mismatch: pred {p.shape}, gt {g.shape}, mask {mask.flags.shape}")
    if not mask.flags.any():
        raise EmptyMaskError("mask has no valid pixels")
    return p[mask.flags], g[mask.flags]


def rmse(pred, gt, mask: ValidMask) -> float:
    p, g = _valid_pairs(pred, gt, mask)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def delta1(pred, gt, mask: ValidMask, mode: str = "ratio") -> float:
    """Fraction of valid pixels within the 1.25 accuracy threshold.

    ``mode="ratio"`` uses max(pred/gt, gt/pred) < 1.25; ``mode="relative"``
    uses |pred - gt| / gt < 0.25 instead.
    """
    p, g = _valid_pairs(pred, gt, mask)
    p = np.maximum(p, PRED_FLOOR_M)
    if mode == "ratio":
        hit = np.maximum(p / g, g / p) < DELTA1_THRESHOLD
    elif mode == "relative":
        hit = np.abs(p - g) / g < DELTA1_THRESHOLD - 1
    else:
        raise ValueError(f"unknown delta1 mode {mode!r}")
    return float(hit.mean())


def person_mask(pred_logits) -> np.ndarray:
    a = np.asarray(pred_logits)
    if a.ndim != 4 or a.shape[0] != 1 or a.shape[1] < 2:
        raise ShapeError(f"expected (1,S>=2,h,w) logits, got {a.shape}")
    return np.argmax(a[0], axis=0) == PERSON


def _check_labels(gt_labels, n_classes, shape):
    lab = np.asarray(gt_labels)
    lab = lab.reshape(lab.shape[-2:]) if lab.ndim > 2 else lab
    if lab.shape != shape:
        raise ShapeError(f"label grid {lab.shape} does not match logits {shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise LabelError(f"labels must lie in 0..{n_classes - 1}")
    return lab


def iou_counts(pred_logits, gt_labels) -> tuple[int, int]:
    """(intersection, union) pixel counts of the person class."""
    pm = person_mask(pred_logits)
    lab = _check_labels(gt_labels, np.shape(pred_logits)[1], pm.shape)
    gm = lab == PERSON
    return int((pm & gm).sum()), int((pm | gm).sum())


def people_iou(pred_logits, gt_labels) -> float:
    inter, union = iou_counts(pred_logits, gt_labels)
    return 1.0 if union == 0 else inter / union


def smooth_l1(pred, gt, mask: ValidMask) -> float:
    p, g = _valid_pairs(pred, gt, mask)
    d = np.abs(p - g)
    return float(np.mean(np.where(d < 1, 0.5 * d * d, d - 0.5)))


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels, mask: ValidMask | None = None) -> float:
    lg = np.asarray(logits, dtype=np.float64)
    if lg.ndim != 4 or lg.shape[0] != 1:
        raise ShapeError(f"expected (1,S,h,w) logits, got {lg.shape}")
    lab = _check_labels(labels, lg.shape[1], lg.shape[2:]).astype(np.intp)
    flags = np.ones(lab.shape, bool) if mask is None else mask.flags
    if flags.shape != lab.shape:
        raise ShapeError(f"mask {flags.shape} does not match labels {lab.shape}")
    if not flags.any():
        raise EmptyMaskError("mask has no valid pixels")
    lsm = log_softmax(lg)[0]
    picked = np.take_along_axis(lsm, lab[None], axis=0)[0]
    return float(-picked[flags].mean())


def evaluate_frame(depth_pred, depth_gt, seg_logits, gt_labels, frame_id: str = "",
                   delta_mode: str = "ratio") -> MetricsReport:
    m = valid_mask(depth_gt)
    return MetricsReport(rmse(depth_pred, depth_gt, m), delta1(depth_pred, depth_gt, m, delta_mode),
                         people_iou(seg_logits, gt_labels), m.count, frame_id)


def nearest_resize(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D grid: out[i, j] = a[i*H//h, j*W//w]."""
    a = np.asarray(a)
    ys = (np.arange(h) * a.shape[0]) // h
    xs = (np.arange(w) * a.shape[1]) // w
    return a[ys[:, None], xs[None, :]]


def reports_to_csv(reports: list[MetricsReport], aggregate: MetricsReport | None = None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    if aggregate is not None:
        writer.writerow(aggregate.row())
    return buf.getvalue()


def aggregate(reports: list[MetricsReport], ious: list[tuple[int, int]], iou_mode: str = "per-frame") -> MetricsReport:
    """Mean of per-frame rmse/delta1; IoU averaged per frame or pooled over all pixels."""
    if not reports:
        raise ValueError("no frames to aggregate")
    if iou_mode == "per-frame":
        iou = float(np.mean([r.people_iou for r in reports]))
    elif iou_mode == "pooled":
        inter = sum(i for i, _ in ious)
        union = sum(u for _, u in ious)
        iou = 1.0 if union == 0 else inter / union
    else:
        raise ValueError(f"unknown iou mode {iou_mode!r}")
    return MetricsReport(float(np.mean([r.rmse for r in reports])), float(np.mean([r.delta1 for r in reports])),
                         iou, sum(r.valid_pixel_count for r in reports), "aggregate")
