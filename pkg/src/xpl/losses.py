"""Training objectives: pseudo-label cross-entropy, supervised cross-entropy,
symmetric audio-visual InfoNCE, and the combined two-model objective.

All loss functions are dual-mode (see ``tensor``): called on plain arrays they
return a scalar ``Tensor``, called on traced values they extend the tape.
Supervision targets (pseudo-labels, ground-truth masks) always enter as
constants, so no gradient can flow into the label side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pseudolabel import NORMALIZE_EPS

DEFAULT_LAMBDA_U = 0.5
DEFAULT_TAU = 0.07


def _raw(x):
    if isinstance(x, T.TracedTensor):
        return x.value.data
    if isinstance(x, T.Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def normalized_prediction(map_values):
    """Differentiable bridge from cosine maps to (0, 1): clamp((x + 1) / 2)."""
    half = T.mul(T.add(map_values, 1.0), 0.5)
    return T.clip(half, NORMALIZE_EPS, 1.0 - NORMALIZE_EPS)


def bce_pixelwise(target, pred):
    """Mean over pixels of -[p log q + (1-p) log(1-q)] with soft targets p."""
    p = _raw(target)
    q = _raw(pred)
    if p.shape != q.shape:
        raise ValueError(f"bce_pixelwise: shape mismatch {p.shape} vs {q.shape}")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("bce_pixelwise: target values must lie in [0, 1]")
    if q.min() <= 0.0 or q.max() >= 1.0:
        raise ValueError("bce_pixelwise: predictions must lie strictly inside (0, 1)")
    pos = T.mul(p, T.log(pred))
    neg = T.mul(1.0 - p, T.log(T.sub(1.0, pred)))
    return T.mul(T.mean(T.add(pos, neg)), -1.0)


def pseudo_supervision_loss(pl_values, map_values):
    """Pixel-wise cross-entropy of a (stack of) map(s) against pseudo-label targets.

    ``pl_values`` is treated as a constant; ``map_values`` may be traced. Both
    (H, W) and stacked (B, H, W) inputs work; the batch mean equals the mean
    over all pixels.
    """
    return bce_pixelwise(_raw(pl_values), normalized_prediction(map_values))


def cross_loss(pl_values, map_values, *, pl_from: str, map_from: str):
    """Cross pseudo-labeling loss: a model learns from the other model's labels.

    Refuses same-model tags; consuming one's own pseudo-labels is self-training
    and must go through ``pseudo_supervision_loss`` explicitly.
    """
    if pl_from == map_from:
        raise ValueError(
            f"cross_loss requires pseudo-labels from the other model, got both from {map_from!r}"
        )
    return pseudo_supervision_loss(pl_values, map_values)


def sup_loss(gt_mask, map_values):
    """Supervised pixel-wise cross-entropy against a binary ground-truth mask."""
    gt = _raw(gt_mask)
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("sup_loss: ground-truth mask must be binary")
    return bce_pixelwise(gt, normalized_prediction(map_values))


def infonce_loss(audio_embs, visual_embs_gmp, tau: float = DEFAULT_TAU):
    """Symmetric InfoNCE over in-batch pairs of audio and pooled visual embeddings.

    Row i of each input is one sample; similarities are cosine, scaled by the
    temperature. Loss per sample is the sum of the audio->visual and
    visual->audio terms, averaged over the batch. Non-negative; exactly zero
    for a single pair.
    """
    if tau <= 0:
        raise ValueError("infonce temperature tau must be > 0")
    a = _raw(audio_embs)
    v = _raw(visual_embs_gmp)
    if a.ndim != 2 or a.shape != v.shape:
        raise ValueError(f"infonce_loss requires matching (n, d) inputs, got {a.shape} and {v.shape}")
    n = a.shape[0]
    sims = T.mul(T.cosine_matrix(audio_embs, visual_embs_gmp), 1.0 / tau)
    lse_audio = T.log_sum_exp(sims, axis=1)
    lse_visual = T.log_sum_exp(sims, axis=0)
    matched = T.diagonal(sims)
    per_sample = T.sub(T.add(lse_audio, lse_visual), T.mul(matched, 2.0))
    return T.mul(T.tensor_sum(per_sample), 1.0 / n)


@dataclass(frozen=True)
class ModelLossTerms:
    """One model's loss components and its weighted subtotal."""

    cross: float
    sup: float
    unsup: float
    subtotal: float


@dataclass(frozen=True)
class LossBreakdown:
    """Per-model and summed loss components for one optimization step/epoch."""

    per_model: dict
    cross: float
    sup: float
    unsup: float
    total: float
    lambda_u: float


def total_loss(parts: dict[str, tuple[float, float, float]], lambda_u: float = DEFAULT_LAMBDA_U) -> LossBreakdown:
    """Combine (cross, sup, unsup) triples per model into the full objective."""
    per_model = {}
    for tag, (cross, sup, unsup) in parts.items():
        for name, value in (("cross", cross), ("sup", sup), ("unsup", unsup)):
            if not np.isfinite(value):
                raise ValueError(f"non-finite {name} loss for model {tag}")
        if cross < 0 or sup < 0:
            raise ValueError(f"negative cross-entropy for model {tag}")
        per_model[tag] = ModelLossTerms(
            cross=float(cross),
            sup=float(sup),
            unsup=float(unsup),
            subtotal=float(cross + sup + lambda_u * unsup),
        )
    return LossBreakdown(
        per_model=per_model,
        cross=sum(m.cross for m in per_model.values()),
        sup=sum(m.sup for m in per_model.values()),
        unsup=sum(m.unsup for m in per_model.values()),
        total=sum(m.subtotal for m in per_model.values()),
        lambda_u=lambda_u,
    )
