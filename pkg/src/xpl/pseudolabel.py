"""Soft pseudo-label machinery: normalization, sharpening, EMA bank,
inter-model consensus and curriculum data selection.

Everything here operates on plain numpy arrays: pseudo-labels are supervision
targets and must never carry gradients back into the model that produced them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NORMALIZE_EPS = 1e-6

# Samples whose inter-model consensus is at or below this value are always
# rejected, regardless of the configured delta: low-consensus pseudo-labels
# destabilize training.
HARD_FLOOR = 0.8


class ConstantMapError(ValueError):
    """A prediction map with zero spatial variance has no defined consensus."""


def normalize_map(values) -> np.ndarray:
    """Affine bridge from cosine range [-1, 1] to (0, 1): x -> clamp((x+1)/2).

    The epsilon clamp keeps downstream cross-entropy finite.
    """
    arr = np.asarray(values, dtype=np.float64)
    return np.clip((arr + 1.0) / 2.0, NORMALIZE_EPS, 1.0 - NORMALIZE_EPS)


def sharpen(p, a: float) -> np.ndarray:
    """Logistic squashing about 0.5: phi(x) = 1 / (1 + exp(-a (x - 0.5))).

    Pushes scores above 0.5 toward 1 and below 0.5 toward 0; ``a`` controls
    how hard. phi(0.5) = 0.5 and phi(x) + phi(1-x) = 1 for every ``a``.
    """
    if a <= 0:
        raise ValueError("sharpen smoothness a must be > 0")
    arr = np.asarray(p, dtype=np.float64)
    z = a * (arr - 0.5)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def make_instant_pl(map_values, a: float) -> np.ndarray:
    """Instantaneous soft pseudo-label: sharpen the normalized map."""
    return sharpen(normalize_map(map_values), a)


def hard_pl(map_values) -> np.ndarray:
    """Vanilla hard pseudo-label: 0/1 threshold of the normalized map at 0.5."""
    return (normalize_map(map_values) >= 0.5).astype(np.float64)


@dataclass
class PseudoLabel:
    """H x W soft target in [0, 1] plus the step of its last EMA update."""

    values: np.ndarray
    step: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("pseudo-label values must lie in [0, 1]")


class PseudoLabelBank:
    """Per-(model, sample) store of historical pseudo-labels."""

    def __init__(self):
        self.entries: dict[tuple[str, int], PseudoLabel] = {}

    def get(self, model_tag: str, sample_id: int) -> PseudoLabel | None:
        return self.entries.get((model_tag, sample_id))

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        from .model import format_floats  # shared exact float formatting

        lines = ["# xpl-plbank v1"]
        for (tag, sid) in sorted(self.entries):
            pl = self.entries[(tag, sid)]
            hh, ww = pl.values.shape
            lines.append(f"entry {tag} {sid} {pl.step} {hh} {ww}")
            lines.append(format_floats(pl.values))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PseudoLabelBank":
        bank = cls()
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "# xpl-plbank v1":
            raise ValueError(f"not a pseudo-label bank file: {path}")
        i = 1
        while i < len(lines):
            if not lines[i].strip():
                i += 1
                continue
            _, tag, sid, step, hh, ww = lines[i].split()
            values = np.array([float(tok) for tok in lines[i + 1].split()])
            bank.entries[(tag, int(sid))] = PseudoLabel(
                values=values.reshape(int(hh), int(ww)), step=int(step)
            )
            i += 2
        return bank


def ema_update(
    bank: PseudoLabelBank,
    model_tag: str,
    sample_id: int,
    instant: np.ndarray,
    beta: float,
    step: int,
) -> PseudoLabel:
    """Exponential moving average over a sample's pseudo-label history.

    First selected appearance seeds the bank with the instant label; afterwards
    PL_t = beta * PL_{t-1} + (1 - beta) * instant.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError("EMA rate beta must lie in [0, 1)")
    instant = np.asarray(instant, dtype=np.float64)
    if instant.min() < 0.0 or instant.max() > 1.0:
        raise ValueError("instant pseudo-label values must lie in [0, 1]")
    prev = bank.entries.get((model_tag, sample_id))
    if prev is None:
        updated = PseudoLabel(values=instant.copy(), step=step)
    else:
        if step <= prev.step:
            raise ValueError(
                f"pseudo-label step must increase: got {step} after {prev.step} "
                f"for ({model_tag}, {sample_id})"
            )
        updated = PseudoLabel(values=beta * prev.values + (1.0 - beta) * instant, step=step)
    bank.entries[(model_tag, sample_id)] = updated
    return updated


def pearson(map_a, map_b) -> float:
    """Pearson correlation of two maps over their flattened spatial values."""
    a = np.asarray(map_a, dtype=np.float64).ravel()
    b = np.asarray(map_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"pearson: map shapes differ ({a.size} vs {b.size} values)")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    if sa == 0.0 or sb == 0.0:
        raise ConstantMapError("constant prediction map: consensus undefined")
    return float(da @ db) / (sa * sb)


@dataclass
class SelectionSchedule:
    """Reliability threshold plus the ramp-up of how much eligible data to admit.

    ``ramp_fraction(epoch)`` grows linearly from ``ramp_start`` at epoch 0 to
    1.0 at ``ramp_full_epoch`` and stays there; epochs count from the end of
    warmup. The hard floor is fixed: candidates need consensus strictly above
    max(delta, HARD_FLOOR).
    """

    delta: float = 0.8
    ramp_start: float = 0.1
    ramp_full_epoch: int = 1

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if not 0.0 <= self.ramp_start <= 1.0:
            raise ValueError("ramp_start must lie in [0, 1]")

    def ramp_fraction(self, epoch: int) -> float:
        if epoch < 0:
            return 0.0
        if self.ramp_full_epoch <= 0 or epoch >= self.ramp_full_epoch:
            return 1.0
        return self.ramp_start + (1.0 - self.ramp_start) * epoch / self.ramp_full_epoch


def curriculum_select(
    rhos: dict[int, float],
    labeled: set[int] | frozenset[int] | list[int],
    epoch: int,
    schedule: SelectionSchedule,
) -> set[int]:
    """Labeled ids plus the top ramp fraction of sufficiently-consensual samples.

    Eligible samples have consensus strictly above max(delta, hard floor); they
    are admitted in descending consensus order (ties broken by sample id), with
    the admitted count ramping up across epochs.
    """
    threshold = max(schedule.delta, HARD_FLOOR)
    eligible = sorted(
        ((sid, rho) for sid, rho in rhos.items() if rho > threshold),
        key=lambda item: (-item[1], item[0]),
    )
    k = math.ceil(schedule.ramp_fraction(epoch) * len(eligible))
    return set(labeled) | {sid for sid, _ in eligible[:k]}
