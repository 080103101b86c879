"""Localization evaluation: per-sample IoU, CIoU and threshold-sweep AUC.

Conventions: maps are binarized at the midpoint of the normalized range
(cosine >= 0 counts as positive, ties positive), CIoU is the percentage of
samples reaching IoU >= 0.5, and AUC is the trapezoidal area under the
success-rate curve over IoU thresholds 0.00, 0.05, ..., 1.00, as a
percentage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .pseudolabel import normalize_map

CIOU_THRESHOLD = 0.5
AUC_STEPS = 20  # thresholds i / AUC_STEPS for i = 0..AUC_STEPS
BINARIZE_THRESHOLD = 0.5  # on the normalized (0, 1) scale


@dataclass
class EvalReport:
    """Aggregate localization metrics over one evaluation split."""

    ciou: float
    auc: float
    per_sample_iou: list[float] = field(default_factory=list)
    n_samples: int = 0
    binarization_threshold: float = BINARIZE_THRESHOLD


def binarize(map_values) -> np.ndarray:
    """Positive pixels of a cosine map: normalized value >= 0.5, ties positive."""
    return normalize_map(map_values) >= BINARIZE_THRESHOLD


def iou(pred, gt) -> float:
    """Intersection over union of two binary masks.

    Both masks empty is degenerate; it returns 0 and warns rather than raise,
    so a fully-negative prediction against an (invalid) empty ground truth
    cannot crash an evaluation sweep.
    """
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"iou: shape mismatch {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        warnings.warn("iou of two empty masks defined as 0", stacklevel=2)
        return 0.0
    return float(np.logical_and(p, g).sum()) / float(union)


def evaluate(maps, gts) -> EvalReport:
    """CIoU and AUC over aligned lists of prediction maps and ground-truth masks.

    ``maps`` items may be raw (H, W) arrays or objects with a ``values``
    attribute (PredictionMap).
    """
    if len(maps) != len(gts):
        raise ValueError(f"evaluate: {len(maps)} maps vs {len(gts)} masks")
    if not maps:
        raise ValueError("evaluate: empty sample list")
    ious = []
    for m, g in zip(maps, gts):
        values = getattr(m, "values", m)
        ious.append(iou(binarize(values), g))
    arr = np.array(ious)
    ciou = 100.0 * float(np.mean(arr >= CIOU_THRESHOLD))
    thresholds = [i / AUC_STEPS for i in range(AUC_STEPS + 1)]
    success = [float(np.mean(arr >= th)) for th in thresholds]
    area = 0.0
    for k in range(AUC_STEPS):
        area += 0.5 * (success[k] + success[k + 1]) * (thresholds[k + 1] - thresholds[k])
    return EvalReport(
        ciou=ciou,
        auc=100.0 * area,
        per_sample_iou=[float(v) for v in ious],
        n_samples=len(ious),
    )
