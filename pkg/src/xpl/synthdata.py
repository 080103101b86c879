"""Synthetic audio-visual scenes with exact ground truth.

A scene is an H x W grid of visual feature vectors plus one audio feature
vector. Every category owns a latent signature; fixed random projections map
that signature into visual feature space (added on the object's cells) and
into audio feature space. Background cells are pure noise, so the
audio-visual correspondence is learnable and the rectangular object mask is
the exact ground truth.

Generation is a pure function of the config: identical configs serialize to
identical bytes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

SPLIT_LABELED = "labeled"
SPLIT_UNLABELED = "unlabeled"
SPLIT_TEST = "test"
SPLIT_OPENSET = "openset_test"

SPLITS_WITH_MASK = (SPLIT_LABELED, SPLIT_TEST, SPLIT_OPENSET)

# Feature-space augmentation ranges (per-channel affine jitter + noise).
JITTER_SCALE_LO = 0.9
JITTER_SCALE_HI = 1.1
JITTER_SHIFT = 0.05
JITTER_NOISE_STD = 0.02

_PARTITION_STREAM = 101

# Per-channel std of the projected category signal on object cells and audio.
PROJECTION_STD = 0.45


@dataclass(frozen=True)
class GenConfig:
    """Everything that determines a generated dataset."""

    seed: int
    height: int = 8
    width: int = 8
    c_visual: int = 12
    c_audio: int = 16
    d_latent: int = 6
    n_categories: int = 10
    n_openset_categories: int = 2
    n_labeled: int = 25
    n_unlabeled: int = 1425
    n_test: int = 200
    n_openset: int = 100
    obj_min_side: int = 2
    obj_max_side: int = 5
    noise_std: float = 0.5

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.height * self.width < 2:
            raise ValueError("grid must have at least 2 cells")
        if min(self.c_visual, self.c_audio, self.d_latent) < 1:
            raise ValueError("feature dims must be positive")
        if self.n_labeled < 1 or self.n_unlabeled < 1 or self.n_test < 1:
            raise ValueError("labeled/unlabeled/test splits need at least one sample each")
        if self.n_openset < 0:
            raise ValueError("n_openset must be >= 0")
        if self.n_categories < 2:
            raise ValueError("need at least 2 categories")
        if not 1 <= self.n_openset_categories < self.n_categories:
            raise ValueError("openset categories must leave at least one training category")
        if not 1 <= self.obj_min_side <= self.obj_max_side:
            raise ValueError("invalid object side range")
        if self.obj_min_side > self.height or self.obj_min_side > self.width:
            raise ValueError("object larger than grid")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class AVPair:
    """One audio-visual sample: feature grid, audio vector, optional mask."""

    sample_id: int
    category: int
    visual_grid: np.ndarray
    audio: np.ndarray
    gt_mask: np.ndarray | None
    split: str

    def __post_init__(self):
        self.visual_grid = np.asarray(self.visual_grid, dtype=np.float64)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        has_mask = self.gt_mask is not None
        if has_mask != (self.split in SPLITS_WITH_MASK):
            raise ValueError(f"split {self.split!r} and mask presence disagree")
        if has_mask:
            self.gt_mask = np.asarray(self.gt_mask, dtype=np.int64)
            n_pos = int(self.gt_mask.sum())
            if not 1 <= n_pos <= self.gt_mask.size - 1:
                raise ValueError("mask must leave both object and background nonempty")


@dataclass
class Dataset:
    config: GenConfig
    train_categories: tuple[int, ...]
    openset_categories: tuple[int, ...]
    pairs: list[AVPair] = field(default_factory=list)

    def by_split(self, split: str) -> list[AVPair]:
        return [p for p in self.pairs if p.split == split]

    def has_openset(self) -> bool:
        return any(p.split == SPLIT_OPENSET for p in self.pairs)


def split_openset(cfg: GenConfig) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Deterministic category partition: (training categories, held-out categories)."""
    rng = np.random.default_rng([cfg.seed, _PARTITION_STREAM])
    perm = rng.permutation(cfg.n_categories)
    held = cfg.n_openset_categories
    return tuple(sorted(int(c) for c in perm[:-held])), tuple(sorted(int(c) for c in perm[-held:]))


def _draw_mask(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    hi_h = min(cfg.obj_max_side, cfg.height)
    hi_w = min(cfg.obj_max_side, cfg.width)
    h = int(rng.integers(cfg.obj_min_side, hi_h + 1))
    w = int(rng.integers(cfg.obj_min_side, hi_w + 1))
    if h == cfg.height and w == cfg.width:
        # Background must stay nonempty.
        if w > 1:
            w -= 1
        else:
            h -= 1
    r0 = int(rng.integers(0, cfg.height - h + 1))
    c0 = int(rng.integers(0, cfg.width - w + 1))
    mask = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    mask[r0 : r0 + h, c0 : c0 + w] = 1
    return mask


def generate_dataset(cfg: GenConfig) -> Dataset:
    """All splits of one synthetic dataset; deterministic given cfg."""
    train_cats, openset_cats = split_openset(cfg)
    rng = np.random.default_rng(cfg.seed)

    # Unit signatures + fixed projection scale: per-channel object signal has
    # std PROJECTION_STD regardless of d_latent, so noise_std alone sets the
    # SNR while d_latent controls how crowded (confusable) categories are.
    raw = rng.normal(0.0, 1.0, size=(cfg.n_categories, cfg.d_latent))
    signatures = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    w_visual = rng.normal(0.0, PROJECTION_STD, size=(cfg.d_latent, cfg.c_visual))
    w_audio = rng.normal(0.0, PROJECTION_STD, size=(cfg.d_latent, cfg.c_audio))

    plan = (
        (SPLIT_LABELED, cfg.n_labeled, train_cats),
        (SPLIT_UNLABELED, cfg.n_unlabeled, train_cats),
        (SPLIT_TEST, cfg.n_test, train_cats),
        (SPLIT_OPENSET, cfg.n_openset, openset_cats),
    )
    pairs: list[AVPair] = []
    sample_id = 0
    for split, count, cats in plan:
        for _ in range(count):
            cat = int(cats[rng.integers(0, len(cats))])
            mask = _draw_mask(rng, cfg)
            grid = rng.normal(0.0, cfg.noise_std, size=(cfg.height, cfg.width, cfg.c_visual))
            grid[mask == 1] += signatures[cat] @ w_visual
            audio = signatures[cat] @ w_audio + rng.normal(0.0, cfg.noise_std, size=cfg.c_audio)
            pairs.append(
                AVPair(
                    sample_id=sample_id,
                    category=cat,
                    visual_grid=grid,
                    audio=audio,
                    gt_mask=mask if split in SPLITS_WITH_MASK else None,
                    split=split,
                )
            )
            sample_id += 1
    return Dataset(
        config=cfg,
        train_categories=train_cats,
        openset_categories=openset_cats,
        pairs=pairs,
    )


def augment(pair: AVPair, pipeline_seed) -> AVPair:
    """Per-channel affine jitter plus feature noise; mask and audio untouched.

    Deterministic per (pipeline seed, sample id): two pipelines with different
    seeds see different views of the same sample.
    """
    entropy = list(pipeline_seed) if isinstance(pipeline_seed, (tuple, list)) else [int(pipeline_seed)]
    rng = np.random.default_rng(entropy + [int(pair.sample_id)])
    c = pair.visual_grid.shape[-1]
    scale = rng.uniform(JITTER_SCALE_LO, JITTER_SCALE_HI, size=c)
    shift = rng.uniform(-JITTER_SHIFT, JITTER_SHIFT, size=c)
    noise = rng.normal(0.0, JITTER_NOISE_STD, size=pair.visual_grid.shape)
    return replace(pair, visual_grid=pair.visual_grid * scale + shift + noise)


# ---------------------------------------------------------------------------
# Dataset file format (textual, line oriented, exact round-trip):
#
#   # xpl-dataset v1
#   config <field> <value>           one line per GenConfig field
#   train_categories <c> <c> ...
#   openset_categories <c> <c> ...
#   sample <id> <category> <split>
#   mask <H*W row-major 0/1 string, or ->
#   visual <H*W*C_v row-major repr floats>
#   audio <C_a repr floats>
# ---------------------------------------------------------------------------

DATASET_HEADER = "# xpl-dataset v1"


def save_dataset(path, ds: Dataset) -> None:
    from .model import format_floats

    lines = [DATASET_HEADER]
    for f in dataclasses.fields(GenConfig):
        lines.append(f"config {f.name} {getattr(ds.config, f.name)!r}")
    lines.append("train_categories " + " ".join(str(c) for c in ds.train_categories))
    lines.append("openset_categories " + " ".join(str(c) for c in ds.openset_categories))
    for p in ds.pairs:
        lines.append(f"sample {p.sample_id} {p.category} {p.split}")
        if p.gt_mask is None:
            lines.append("mask -")
        else:
            lines.append("mask " + "".join(str(int(v)) for v in p.gt_mask.ravel()))
        lines.append("visual " + format_floats(p.visual_grid))
        lines.append("audio " + format_floats(p.audio))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DATASET_HEADER:
        raise ValueError(f"not a dataset file: {path}")
    field_types = {f.name: f.type for f in dataclasses.fields(GenConfig)}
    cfg_kwargs: dict = {}
    cfg: GenConfig | None = None
    train_cats: tuple[int, ...] = ()
    openset_cats: tuple[int, ...] = ()
    pairs: list[AVPair] = []
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        kind, _, rest = line.partition(" ")
        if kind == "config":
            name, _, value = rest.partition(" ")
            if name not in field_types:
                raise ValueError(f"unknown config field {name!r}")
            caster = float if field_types[name] in ("float", float) else int
            cfg_kwargs[name] = caster(value)
            i += 1
        elif kind == "train_categories":
            train_cats = tuple(int(tok) for tok in rest.split())
            i += 1
        elif kind == "openset_categories":
            openset_cats = tuple(int(tok) for tok in rest.split())
            i += 1
        elif kind == "sample":
            if cfg is None:
                cfg = GenConfig(**cfg_kwargs)
            sid, cat, split = rest.split()
            mask_line = lines[i + 1].removeprefix("mask ")
            if mask_line == "-":
                mask = None
            else:
                bits = np.array([int(ch) for ch in mask_line], dtype=np.int64)
                mask = bits.reshape(cfg.height, cfg.width)
            visual = np.array([float(tok) for tok in lines[i + 2].removeprefix("visual ").split()])
            audio = np.array([float(tok) for tok in lines[i + 3].removeprefix("audio ").split()])
            pairs.append(
                AVPair(
                    sample_id=int(sid),
                    category=int(cat),
                    visual_grid=visual.reshape(cfg.height, cfg.width, cfg.c_visual),
                    audio=audio,
                    gt_mask=mask,
                    split=split,
                )
            )
            i += 4
        else:
            raise ValueError(f"unrecognized dataset line {i + 1}: {line[:40]!r}")
    if cfg is None:
        cfg = GenConfig(**cfg_kwargs)
    return Dataset(
        config=cfg,
        train_categories=train_cats,
        openset_categories=openset_cats,
        pairs=pairs,
    )
