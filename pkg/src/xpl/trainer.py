"""Training orchestration: warmup on labels, per-epoch consensus scoring,
curriculum selection, pseudo-label refresh and cross-supervised updates.

The main entry point is ``run_experiment(cfg, dataset)``. It is a pure
function of its arguments: identical configs on identical datasets produce
bit-identical metric histories.

Modes
-----
* ``xpl``             full method: soft sharpened pseudo-labels, EMA bank,
                      consensus-based curriculum selection, cross supervision.
* ``sup_only``        labeled data only, every epoch.
* ``vanilla_hard_pl`` self-training baseline: hard 0/1 pseudo-labels on all
                      unlabeled data, no EMA, no sharpening, no selection.

Ablation flags (xpl mode only) switch off one mechanism each; see TrainConfig.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses, metrics, model, pseudolabel
from . import tensor as T
from .model import BackboneSpec, EncoderParams, check_distinct, init_params
from .pseudolabel import PseudoLabelBank, SelectionSchedule
from .synthdata import SPLIT_LABELED, SPLIT_OPENSET, SPLIT_TEST, SPLIT_UNLABELED, Dataset, augment

MODE_XPL = "xpl"
MODE_SUP_ONLY = "sup_only"
MODE_VANILLA = "vanilla_hard_pl"
MODES = (MODE_XPL, MODE_SUP_ONLY, MODE_VANILLA)

MODEL_TAGS = ("A", "B")

# Named sub-streams of the experiment seed.
_BATCH_STREAM = 7
_AUG_STREAM = {"A": 11, "B": 12}
_INIT_MIX = 1_000_003


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters of one experiment."""

    seed: int
    mode: str = MODE_XPL
    total_epochs: int = 20
    warmup_epochs: int | None = None  # None: 20% of total, at least 1
    batch_size: int = 16
    learning_rate: float = 0.3
    momentum: float = 0.9
    beta: float = 0.7  # PL-EMA rate
    lambda_u: float = losses.DEFAULT_LAMBDA_U
    sharpen_a: float = 10.0
    delta: float = 0.8  # consensus threshold (hard floor 0.8 applies regardless)
    tau: float = losses.DEFAULT_TAU
    no_plema: bool = False
    no_sharpen: bool = False
    no_cross_refine: bool = False
    no_data_selection: bool = False
    ramp_start: float = 0.1
    ramp_full_frac: float = 0.6  # selection admits all eligible data from this point
    backbone_a: BackboneSpec = field(default_factory=lambda: BackboneSpec((32, 16), 8, 1))
    backbone_b: BackboneSpec = field(default_factory=lambda: BackboneSpec((24, 24), 8, 2))

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return max(1, round(0.2 * self.total_epochs))

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.sharpen_a <= 0:
            raise ValueError("sharpen_a must be > 0")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.total_epochs < 1 or self.batch_size < 1:
            raise ValueError("total_epochs and batch_size must be >= 1")
        if self.resolved_warmup >= self.total_epochs:
            raise ValueError("warmup_epochs must be < total_epochs")
        if self.mode != MODE_SUP_ONLY and self.resolved_warmup < 1:
            raise ValueError(f"mode {self.mode} requires at least one warmup epoch")
        if self.learning_rate < 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("invalid optimizer settings")  # lr 0 freezes params (diagnostics)
        if not 0.0 <= self.ramp_start <= 1.0 or not 0.0 < self.ramp_full_frac <= 1.0:
            raise ValueError("invalid ramp settings")
        check_distinct(self.backbone_a, self.backbone_b)


@dataclass
class EpochRecord:
    """Test metrics and training diagnostics for one completed epoch."""

    epoch: int
    ciou_a: float
    auc_a: float
    ciou_b: float
    auc_b: float
    ciou_avg: float
    auc_avg: float
    loss_cross: float
    loss_sup: float
    loss_unsup: float
    loss_total: float
    n_selected: int
    mean_rho: float


@dataclass
class MetricsHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def final(self) -> EpochRecord:
        if not self.records:
            raise ValueError("empty history")
        return self.records[-1]

    def ciou_series(self, which: str = "a") -> list[float]:
        return [getattr(r, f"ciou_{which}") for r in self.records]

    def stability_std(self, which: str = "a", tail_frac: float = 0.2) -> float:
        """Population std of test CIoU over the final ``tail_frac`` of epochs."""
        series = self.ciou_series(which)
        k = max(1, math.ceil(tail_frac * len(series)))
        return float(np.std(np.array(series[-k:])))


@dataclass
class ModelState:
    tag: str
    params: EncoderParams
    velocity: dict[str, np.ndarray]


@dataclass
class TrainResult:
    config: TrainConfig
    history: MetricsHistory
    params: dict[str, EncoderParams]
    bank: PseudoLabelBank


def sgd_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[EncoderParams, dict[str, np.ndarray]]:
    """One SGD-with-momentum update: v <- momentum v + g; theta <- theta - lr v."""
    new_tensors: dict[str, np.ndarray] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, theta in params.tensors.items():
        g = grads.get(name)
        v = momentum * velocity[name] + (g if g is not None else 0.0)
        new_tensors[name] = theta - lr * v
        new_velocity[name] = v
    return EncoderParams(new_tensors), new_velocity


def _zero_velocity(params: EncoderParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.tensors.items()}


@dataclass
class Pool:
    """A split's samples with pre-stacked feature arrays."""

    pairs: list
    ids: list[int]
    grids: np.ndarray
    audios: np.ndarray
    masks: np.ndarray | None

    @classmethod
    def build(cls, pairs, with_masks: bool) -> "Pool":
        return cls(
            pairs=pairs,
            ids=[p.sample_id for p in pairs],
            grids=np.stack([p.visual_grid for p in pairs]),
            audios=np.stack([p.audio for p in pairs]),
            masks=np.stack([p.gt_mask for p in pairs]) if with_masks else None,
        )


def eager_maps(params: EncoderParams, grids: np.ndarray, audios: np.ndarray) -> np.ndarray:
    """(B, H, W) prediction maps without tracing."""
    return model.map_values_batch(params, grids, audios).data


def evaluate_models(params_a: EncoderParams, params_b: EncoderParams, pool: Pool):
    """Per-model and averaged-map localization reports for one masked pool."""
    maps_a = eager_maps(params_a, pool.grids, pool.audios)
    maps_b = eager_maps(params_b, pool.grids, pool.audios)
    gts = list(pool.masks)
    return {
        "A": metrics.evaluate(list(maps_a), gts),
        "B": metrics.evaluate(list(maps_b), gts),
        "avg": metrics.evaluate(list((maps_a + maps_b) / 2.0), gts),
    }


def consensus_scores(maps_a: dict[int, np.ndarray], maps_b: dict[int, np.ndarray], ids) -> dict[int, float]:
    """Pearson consensus per sample; degenerate (constant) maps are excluded."""
    rhos: dict[int, float] = {}
    for sid in ids:
        try:
            rhos[sid] = pseudolabel.pearson(maps_a[sid], maps_b[sid])
        except pseudolabel.ConstantMapError:
            continue  # no defined consensus: treated as unreliable
    return rhos


class TrainContext:
    """Mutable state of one experiment run."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        ds_cfg = dataset.config

        labeled = dataset.by_split(SPLIT_LABELED)
        unlabeled = dataset.by_split(SPLIT_UNLABELED)
        test = dataset.by_split(SPLIT_TEST)
        if not labeled:
            raise ValueError("dataset has no labeled samples")
        if not test:
            raise ValueError("dataset has no test samples")
        self.labeled = Pool.build(labeled, with_masks=True)
        self.unlabeled = Pool.build(unlabeled, with_masks=False)
        self.test = Pool.build(test, with_masks=True)
        openset = dataset.by_split(SPLIT_OPENSET)
        self.openset = Pool.build(openset, with_masks=True) if openset else None

        self.pair_of = {p.sample_id: p for p in labeled + unlabeled}
        self.labeled_ids = set(self.labeled.ids)
        self.mask_of = {p.sample_id: p.gt_mask for p in labeled}

        specs = {
            "A": cfg.backbone_a.resolve(ds_cfg.c_visual, ds_cfg.c_audio),
            "B": cfg.backbone_b.resolve(ds_cfg.c_visual, ds_cfg.c_audio),
        }
        self.states: dict[str, ModelState] = {}
        for tag in MODEL_TAGS:
            spec = replace(specs[tag], init_seed=cfg.seed * _INIT_MIX + specs[tag].init_seed)
            params = init_params(spec)
            self.states[tag] = ModelState(tag=tag, params=params, velocity=_zero_velocity(params))

        self.bank = PseudoLabelBank()
        full_at = max(1, round(cfg.ramp_full_frac * cfg.total_epochs) - cfg.resolved_warmup)
        self.schedule = SelectionSchedule(
            delta=cfg.delta, ramp_start=cfg.ramp_start, ramp_full_epoch=full_at
        )
        self.history = MetricsHistory()

    # -- helpers -----------------------------------------------------------

    def _batch_order(self, ids: list[int], epoch: int) -> list[int]:
        rng = np.random.default_rng([self.cfg.seed, _BATCH_STREAM, epoch])
        order = rng.permutation(len(ids))
        return [ids[i] for i in order]

    def _augmented_arrays(self, batch_ids: list[int], tag: str, epoch: int):
        seed = (self.cfg.seed, _AUG_STREAM[tag], epoch)
        views = [augment(self.pair_of[sid], seed) for sid in batch_ids]
        return (
            np.stack([v.visual_grid for v in views]),
            np.stack([v.audio for v in views]),
        )

    def _gradient_step(self, batch_ids: list[int], epoch: int, targets: dict[str, np.ndarray] | None):
        """One minibatch update of both models; returns the loss breakdown.

        ``targets`` maps each model tag to its stacked pseudo-label targets
        (already resolved to the supervising source); None during warmup /
        sup_only epochs.
        """
        cfg = self.cfg
        n_lab = sum(1 for sid in batch_ids if sid in self.labeled_ids)
        tape = T.Tape()
        parts: dict[str, tuple[float, float, float]] = {}
        objective = None
        grad_index: dict[str, dict[str, int]] = {}

        for tag in MODEL_TAGS:
            traced, idx_of = model.trace_params(tape, self.states[tag].params)
            grad_index[tag] = idx_of
            grids, audios = self._augmented_arrays(batch_ids, tag, epoch)
            bsz, hh, ww, _ = grids.shape

            cells = model.encode_visual_batch(traced, grids)  # (B, H*W, d)
            aud = model.encode_audio_batch(traced, audios)  # (B, d)
            maps_t = T.reshape(T.cosine_grid(cells, aud), (bsz, hh, ww))

            terms = []
            cross_val = 0.0
            if targets is not None:
                tgt = targets[tag]
                source = ("B" if tag == "A" else "A") if not cfg.no_cross_refine else tag
                if source == tag:
                    cross = losses.pseudo_supervision_loss(tgt, maps_t)
                else:
                    cross = losses.cross_loss(tgt, maps_t, pl_from=source, map_from=tag)
                terms.append(cross)
                cross_val = cross.item()

            sup_val = 0.0
            if n_lab > 0:
                gt = np.stack([self.mask_of[sid] for sid in batch_ids[:n_lab]])
                sup = losses.sup_loss(gt, T.narrow(maps_t, 0, n_lab))
                terms.append(sup)
                sup_val = sup.item()

            unsup = losses.infonce_loss(aud, T.reduce_max(cells, axis=1), cfg.tau)
            terms.append(T.mul(unsup, cfg.lambda_u))
            parts[tag] = (cross_val, sup_val, unsup.item())

            model_obj = terms[0]
            for t in terms[1:]:
                model_obj = T.add(model_obj, t)
            objective = model_obj if objective is None else T.add(objective, model_obj)

        grads = T.backward(tape, objective)
        for tag in MODEL_TAGS:
            state = self.states[tag]
            named = {}
            for name, idx in grad_index[tag].items():
                g = grads.get(idx)
                if g is not None:
                    named[name] = g.data
            state.params, state.velocity = sgd_step(
                state.params, named, state.velocity, cfg.learning_rate, cfg.momentum
            )
        return losses.total_loss(parts, cfg.lambda_u)

    def _batches(self, ids: list[int], epoch: int):
        """Shuffled minibatches with each batch's labeled members first."""
        order = self._batch_order(ids, epoch)
        for start in range(0, len(order), self.cfg.batch_size):
            chunk = order[start : start + self.cfg.batch_size]
            lab = [sid for sid in chunk if sid in self.labeled_ids]
            unl = [sid for sid in chunk if sid not in self.labeled_ids]
            yield lab + unl

    def _record_epoch(self, epoch, breakdowns, n_selected, mean_rho) -> EpochRecord:
        reports = evaluate_models(self.states["A"].params, self.states["B"].params, self.test)
        n = max(1, len(breakdowns))
        rec = EpochRecord(
            epoch=epoch,
            ciou_a=reports["A"].ciou,
            auc_a=reports["A"].auc,
            ciou_b=reports["B"].ciou,
            auc_b=reports["B"].auc,
            ciou_avg=reports["avg"].ciou,
            auc_avg=reports["avg"].auc,
            loss_cross=sum(b.cross for b in breakdowns) / n,
            loss_sup=sum(b.sup for b in breakdowns) / n,
            loss_unsup=sum(b.unsup for b in breakdowns) / n,
            loss_total=sum(b.total for b in breakdowns) / n,
            n_selected=n_selected,
            mean_rho=mean_rho,
        )
        self.history.records.append(rec)
        return rec

    # -- epochs ------------------------------------------------------------

    def labeled_epoch(self, epoch: int) -> EpochRecord:
        """Supervised + contrastive training on the labeled set only."""
        breakdowns = [
            self._gradient_step(batch, epoch, targets=None)
            for batch in self._batches(list(self.labeled.ids), epoch)
        ]
        return self._record_epoch(epoch, breakdowns, len(self.labeled.ids), float("nan"))

    def pseudo_label_refresh(self, epoch: int):
        """Steps 1-4 of one epoch: clean maps, consensus, selection, PL update.

        Returns (selected id list, per-model pseudo-label dict, consensus dict,
        mean consensus of the selected unlabeled samples).
        """
        cfg = self.cfg
        pool_ids = self.labeled.ids + self.unlabeled.ids
        grids = np.concatenate([self.labeled.grids, self.unlabeled.grids])
        audios = np.concatenate([self.labeled.audios, self.unlabeled.audios])
        clean_maps = {}
        for tag in MODEL_TAGS:
            stacked = eager_maps(self.states[tag].params, grids, audios)
            clean_maps[tag] = {sid: stacked[i] for i, sid in enumerate(pool_ids)}

        rhos = consensus_scores(clean_maps["A"], clean_maps["B"], self.unlabeled.ids)
        if cfg.mode == MODE_VANILLA or cfg.no_data_selection:
            d_all = sorted(pool_ids)
        else:
            d_all = sorted(
                pseudolabel.curriculum_select(
                    rhos, self.labeled_ids, epoch - cfg.resolved_warmup, self.schedule
                )
            )
        with_rho = [rhos[sid] for sid in d_all if sid not in self.labeled_ids and sid in rhos]
        mean_rho = float(np.mean(with_rho)) if with_rho else float("nan")

        pls: dict[str, dict[int, np.ndarray]] = {tag: {} for tag in MODEL_TAGS}
        for sid in d_all:
            for tag in MODEL_TAGS:
                m = clean_maps[tag][sid]
                if cfg.mode == MODE_VANILLA:
                    pls[tag][sid] = pseudolabel.hard_pl(m)
                    continue
                p = pseudolabel.normalize_map(m)
                instant = p if cfg.no_sharpen else pseudolabel.sharpen(p, cfg.sharpen_a)
                if cfg.no_plema:
                    pls[tag][sid] = instant
                else:
                    pls[tag][sid] = pseudolabel.ema_update(
                        self.bank, tag, sid, instant, cfg.beta, step=epoch
                    ).values
        return d_all, pls, rhos, mean_rho

    def xpl_epoch(self, epoch: int) -> EpochRecord:
        """One full pseudo-labeling epoch (steps 1-6)."""
        d_all, pls, _, mean_rho = self.pseudo_label_refresh(epoch)
        breakdowns = []
        for batch in self._batches(d_all, epoch):
            targets = {
                tag: np.stack(
                    [
                        pls[tag if self.cfg.no_cross_refine else ("B" if tag == "A" else "A")][sid]
                        for sid in batch
                    ]
                )
                for tag in MODEL_TAGS
            }
            breakdowns.append(self._gradient_step(batch, epoch, targets))
        return self._record_epoch(epoch, breakdowns, len(d_all), mean_rho)


def warmup(ctx: TrainContext) -> list[EpochRecord]:
    """Initial supervised epochs so both models emit usable pseudo-labels."""
    return [ctx.labeled_epoch(epoch) for epoch in range(ctx.cfg.resolved_warmup)]


def run_experiment(cfg: TrainConfig, dataset: Dataset) -> TrainResult:
    """Warmup then train to total_epochs; deterministic in (cfg, dataset)."""
    ctx = TrainContext(cfg, dataset)
    if cfg.mode == MODE_SUP_ONLY:
        for epoch in range(cfg.total_epochs):
            ctx.labeled_epoch(epoch)
    else:
        warmup(ctx)
        for epoch in range(cfg.resolved_warmup, cfg.total_epochs):
            ctx.xpl_epoch(epoch)
    return TrainResult(
        config=cfg,
        history=ctx.history,
        params={tag: ctx.states[tag].params for tag in MODEL_TAGS},
        bank=ctx.bank,
    )
