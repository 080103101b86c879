"""Audio-visual encoder pairs producing per-cell cosine similarity maps.

Each model is a pair of small MLPs: a visual encoder applied identically to
every cell of a precomputed H x W x C_v feature grid, and an audio encoder
mapping a C_a feature vector to the same embedding space. The prediction map
is the cosine similarity between the audio embedding and every cell embedding.

Two models in one experiment must differ in architecture or init seed; the
co-training mechanism depends on them seeing the data from different
perspectives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor, TracedTensor


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture + init seed of one encoder pair.

    ``in_visual`` / ``in_audio`` are the input feature channel counts; they are
    normally resolved from the dataset config (see ``resolve``).
    """

    hidden_widths: tuple[int, ...] = (32, 16)
    embed_dim: int = 8
    init_seed: int = 1
    in_visual: int | None = None
    in_audio: int | None = None

    def resolve(self, c_visual: int, c_audio: int) -> "BackboneSpec":
        return replace(self, in_visual=int(c_visual), in_audio=int(c_audio))

    def identity(self) -> tuple:
        """The (hidden_widths, init_seed) pair that must differ between models."""
        return (tuple(self.hidden_widths), self.init_seed)


def check_distinct(spec_a: BackboneSpec, spec_b: BackboneSpec) -> None:
    if spec_a.identity() == spec_b.identity():
        raise ValueError(
            "models A and B must have distinct backbones: "
            "unequal (hidden_widths, init_seed) required"
        )


class EncoderParams:
    """Ordered named weight tensors for one encoder pair.

    Names follow ``visual.<i>.weight`` / ``visual.<i>.bias`` and likewise for
    ``audio``. Layer dims must chain (output width of layer i equals input
    width of layer i+1) and the two branches must end in the same embed dim.
    """

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        for name, arr in self.tensors.items():
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in parameter {name}")
        va = self._chain("visual")
        au = self._chain("audio")
        if va != au:
            raise ValueError(f"visual and audio embed dims differ: {va} vs {au}")

    def _chain(self, prefix: str) -> int:
        layers = self.layers(prefix)
        if not layers:
            raise ValueError(f"no {prefix} layers")
        out_dim = None
        for w, b in layers:
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise ValueError(f"malformed layer shapes in {prefix}: {w.shape}, {b.shape}")
            if out_dim is not None and w.shape[0] != out_dim:
                raise ValueError(f"{prefix} layer dims do not chain: {out_dim} -> {w.shape}")
            out_dim = w.shape[1]
        return out_dim

    def n_layers(self, prefix: str) -> int:
        i = 0
        while f"{prefix}.{i}.weight" in self.tensors:
            i += 1
        return i

    def layers(self, prefix: str):
        return [
            (self.tensors[f"{prefix}.{i}.weight"], self.tensors[f"{prefix}.{i}.bias"])
            for i in range(self.n_layers(prefix))
        ]

    @property
    def embed_dim(self) -> int:
        return self.layers("visual")[-1][0].shape[1]

    @property
    def in_visual(self) -> int:
        return self.layers("visual")[0][0].shape[0]

    @property
    def in_audio(self) -> int:
        return self.layers("audio")[0][0].shape[0]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()})


BIAS_INIT = 0.01


def init_params(spec: BackboneSpec) -> EncoderParams:
    """Xavier-uniform weights; deterministic given init_seed.

    Biases start at a small positive constant rather than zero: a grid cell
    whose hidden ReLU layer goes fully dead then still maps to a well-defined
    (bias-only) embedding instead of the zero vector, whose cosine similarity
    would be a hard error.
    """
    if spec.in_visual is None or spec.in_audio is None:
        raise ValueError("BackboneSpec input dims unresolved; call spec.resolve(c_visual, c_audio)")
    widths = tuple(int(w) for w in spec.hidden_widths)
    if any(w <= 0 for w in widths) or spec.embed_dim <= 0:
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(spec.init_seed)
    tensors: dict[str, np.ndarray] = {}
    for prefix, in_dim in (("visual", spec.in_visual), ("audio", spec.in_audio)):
        dims = (in_dim, *widths, spec.embed_dim)
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            s = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[f"{prefix}.{i}.weight"] = rng.uniform(-s, s, size=(fan_in, fan_out))
            tensors[f"{prefix}.{i}.bias"] = np.full(fan_out, BIAS_INIT)
    return EncoderParams(tensors)


# ---------------------------------------------------------------------------
# Forward passes. All functions below are dual-mode: given plain arrays they
# evaluate eagerly, given a traced parameter mapping they build tape nodes.
# ---------------------------------------------------------------------------


def _param_layers(params, prefix: str):
    if isinstance(params, EncoderParams):
        return params.layers(prefix)
    # Mapping of name -> Tensor/TracedTensor (e.g. a traced parameter set).
    layers = []
    i = 0
    while f"{prefix}.{i}.weight" in params:
        layers.append((params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"]))
        i += 1
    if not layers:
        raise ValueError(f"no {prefix} layers in params")
    return layers


def _mlp_rows(layers, rows):
    """Shared-weight MLP over the rows of an (m, c) matrix; final layer linear."""
    m = rows.shape[0] if isinstance(rows, (Tensor, TracedTensor)) else np.asarray(rows).shape[0]
    h = rows
    for li, (w, b) in enumerate(layers):
        h = T.add(T.matmul(h, w), T.tile_rows(b, m))
        if li < len(layers) - 1:
            h = T.relu(h)
    return h


def encode_visual(params, grid):
    """Per-cell embeddings for one (H, W, C_v) grid -> (H, W, d)."""
    arr = grid if isinstance(grid, (Tensor, TracedTensor)) else Tensor(grid)
    hh, ww, c = arr.shape
    rows = T.reshape(arr, (hh * ww, c))
    emb = _mlp_rows(_param_layers(params, "visual"), rows)
    d = emb.shape[1]
    return T.reshape(emb, (hh, ww, d))


def encode_audio(params, audio):
    """Embedding of one (C_a,) audio feature vector -> (d,)."""
    arr = audio if isinstance(audio, (Tensor, TracedTensor)) else Tensor(audio)
    (c,) = arr.shape
    emb = _mlp_rows(_param_layers(params, "audio"), T.reshape(arr, (1, c)))
    return T.reshape(emb, (emb.shape[1],))


def encode_visual_batch(params, grids):
    """(B, H, W, C_v) -> (B, H*W, d) cell embeddings."""
    arr = grids if isinstance(grids, (Tensor, TracedTensor)) else Tensor(grids)
    bsz, hh, ww, c = arr.shape
    rows = T.reshape(arr, (bsz * hh * ww, c))
    emb = _mlp_rows(_param_layers(params, "visual"), rows)
    return T.reshape(emb, (bsz, hh * ww, emb.shape[1]))


def encode_audio_batch(params, audios):
    """(B, C_a) -> (B, d) audio embeddings."""
    arr = audios if isinstance(audios, (Tensor, TracedTensor)) else Tensor(audios)
    return _mlp_rows(_param_layers(params, "audio"), arr)


def map_values(params, grid, audio):
    """Cosine similarity map for one sample -> (H, W), values in [-1, 1]."""
    arr = grid if isinstance(grid, (Tensor, TracedTensor)) else Tensor(grid)
    hh, ww, _ = arr.shape
    cells = T.reshape(encode_visual(params, arr), (hh * ww, _embed_dim(params)))
    a = encode_audio(params, audio)
    sims = T.cosine_matrix(cells, T.reshape(a, (1, a.shape[0])))
    return T.reshape(sims, (hh, ww))


def map_values_batch(params, grids, audios):
    """Cosine similarity maps for a batch -> (B, H, W)."""
    arr = grids if isinstance(grids, (Tensor, TracedTensor)) else Tensor(grids)
    bsz, hh, ww, _ = arr.shape
    cells = encode_visual_batch(params, arr)
    aud = encode_audio_batch(params, audios)
    sims = T.cosine_grid(cells, aud)
    return T.reshape(sims, (bsz, hh, ww))


def _embed_dim(params) -> int:
    w, _ = _param_layers(params, "visual")[-1]
    if isinstance(w, (Tensor, TracedTensor)):
        return w.shape[1]
    return np.asarray(w).shape[1]


@dataclass
class PredictionMap:
    """H x W cosine-similarity map produced by one model for one sample."""

    values: np.ndarray
    model_tag: str
    sample_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"prediction map must be 2-D, got shape {self.values.shape}")
        if np.abs(self.values).max() > 1.0:
            raise ValueError("prediction map values must lie in [-1, 1]")


def prediction_map(params, pair, model_tag: str) -> PredictionMap:
    """Eager prediction map for one AVPair."""
    values = map_values(params, pair.visual_grid, pair.audio)
    return PredictionMap(values=values.data, model_tag=model_tag, sample_id=pair.sample_id)


# ---------------------------------------------------------------------------
# Tracing and flattening helpers.
# ---------------------------------------------------------------------------


def trace_params(tape: T.Tape, params: EncoderParams):
    """Register every parameter tensor as a leaf; returns (traced dict, name -> node id)."""
    traced: dict[str, TracedTensor] = {}
    idx_of: dict[str, int] = {}
    for name, arr in params.tensors.items():
        leaf = tape.leaf(arr)
        traced[name] = leaf
        idx_of[name] = leaf.idx
    return traced, idx_of


def params_vector(params: EncoderParams) -> np.ndarray:
    """All parameters concatenated into one flat vector (name order)."""
    return np.concatenate([params.tensors[n].ravel() for n in params.names()])


def params_from_vector(theta, template: EncoderParams) -> dict:
    """Rebuild a named parameter mapping from one (possibly traced) flat vector.

    Used by the finite-difference oracle: slicing the single leaf vector keeps
    every encoder weight differentiable through one parameter tensor.
    """
    out: dict[str, object] = {}
    off = 0
    for name in template.names():
        shape = template.tensors[name].shape
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = T.reshape(T.narrow(theta, off, size), shape)
        off += size
    return out


# ---------------------------------------------------------------------------
# Checkpoint file format: textual named tensors, exact round-trip.
#
#   # xpl-checkpoint v1
#   tensor <tag>/<name> <dim0> <dim1> ...
#   <row-major values, repr floats, space separated>
# ---------------------------------------------------------------------------

CHECKPOINT_HEADER = "# xpl-checkpoint v1"


def format_floats(arr: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(arr).ravel())


def save_checkpoint(path, models: Mapping[str, EncoderParams]) -> None:
    lines = [CHECKPOINT_HEADER]
    for tag in sorted(models):
        params = models[tag]
        for name in params.names():
            arr = params.tensors[name]
            dims = " ".join(str(d) for d in arr.shape)
            lines.append(f"tensor {tag}/{name} {dims}")
            lines.append(format_floats(arr))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, EncoderParams]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"not a checkpoint file: {path}")
    raw: dict[str, dict[str, np.ndarray]] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if head[0] != "tensor" or len(head) < 2:
            raise ValueError(f"malformed checkpoint line {i + 1}")
        tag, name = head[1].split("/", 1)
        shape = tuple(int(d) for d in head[2:])
        values = np.array([float(tok) for tok in lines[i + 1].split()], dtype=np.float64)
        raw.setdefault(tag, {})[name] = values.reshape(shape)
        i += 2
    return {tag: EncoderParams(tensors) for tag, tensors in raw.items()}
