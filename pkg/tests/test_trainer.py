import math

import numpy as np
import pytest

from xpl import losses as L
from xpl import pseudolabel as P
from xpl.model import BackboneSpec, encode_audio, encode_visual, prediction_map
from xpl.synthdata import GenConfig, augment, generate_dataset
from xpl.trainer import (
    MODE_SUP_ONLY,
    MODE_VANILLA,
    MODE_XPL,
    TrainConfig,
    TrainContext,
    run_experiment,
    sgd_step,
    warmup,
)

SMALL_BACKBONES = dict(
    backbone_a=BackboneSpec(hidden_widths=(10,), embed_dim=6, init_seed=1),
    backbone_b=BackboneSpec(hidden_widths=(8,), embed_dim=6, init_seed=2),
)


def tiny_dataset(seed=11, **overrides):
    cfg = dict(
        seed=seed,
        n_labeled=6,
        n_unlabeled=24,
        n_test=10,
        n_openset=6,
        n_categories=5,
        n_openset_categories=1,
        noise_std=0.4,
    )
    cfg.update(overrides)
    return generate_dataset(GenConfig(**cfg))


def tiny_config(**overrides):
    base = dict(
        seed=0,
        total_epochs=4,
        warmup_epochs=1,
        batch_size=8,
        learning_rate=0.2,
        **SMALL_BACKBONES,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestConfigValidation:
    def test_bad_beta(self):
        with pytest.raises(ValueError):
            tiny_config(beta=1.0).validate()

    def test_warmup_must_precede_total(self):
        with pytest.raises(ValueError):
            tiny_config(warmup_epochs=4, total_epochs=4).validate()

    def test_pl_modes_need_warmup(self):
        with pytest.raises(ValueError):
            tiny_config(warmup_epochs=0).validate()

    def test_zero_warmup_legal_in_sup_only(self):
        tiny_config(mode=MODE_SUP_ONLY, warmup_epochs=0).validate()

    def test_identical_backbones_rejected(self):
        cfg = tiny_config(
            backbone_a=BackboneSpec((10,), 6, 1), backbone_b=BackboneSpec((10,), 6, 1)
        )
        with pytest.raises(ValueError):
            cfg.validate()

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            tiny_config(mode="fully_supervised").validate()

    def test_default_warmup_is_fifth_of_total(self):
        assert tiny_config(warmup_epochs=None, total_epochs=20).resolved_warmup == 4
        assert tiny_config(warmup_epochs=None, total_epochs=3).resolved_warmup == 1


class TestSgd:
    def make_params(self):
        from xpl.model import EncoderParams

        return EncoderParams(
            {
                "visual.0.weight": np.array([[1.0, 2.0]]),
                "visual.0.bias": np.zeros(2),
                "audio.0.weight": np.array([[0.5, -0.5]]),
                "audio.0.bias": np.zeros(2),
            }
        )

    def test_plain_step(self):
        params = self.make_params()
        vel = {n: np.zeros_like(a) for n, a in params.tensors.items()}
        grads = {"visual.0.weight": np.array([[1.0, 1.0]])}
        updated, _ = sgd_step(params, grads, vel, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(updated.tensors["visual.0.weight"], [[0.9, 1.9]], atol=1e-15)

    def test_zero_grad_leaves_params_unchanged(self):
        params = self.make_params()
        vel = {n: np.zeros_like(a) for n, a in params.tensors.items()}
        updated, _ = sgd_step(params, {}, vel, lr=0.1, momentum=0.9)
        for name in params.names():
            np.testing.assert_array_equal(updated.tensors[name], params.tensors[name])

    def test_momentum_recurrence_matches_hand_computation(self):
        params = self.make_params()
        vel = {n: np.zeros_like(a) for n, a in params.tensors.items()}
        g1 = {"visual.0.weight": np.array([[1.0, 0.0]])}
        g2 = {"visual.0.weight": np.array([[0.5, 0.0]])}
        lr, mom = 0.1, 0.9
        p1, v1 = sgd_step(params, g1, vel, lr, mom)
        p2, _ = sgd_step(p1, g2, v1, lr, mom)
        # hand recurrence: v1 = 1.0; theta1 = 1 - .1 = 0.9
        #                  v2 = .9*1 + .5 = 1.4; theta2 = 0.9 - 0.14 = 0.76
        assert p1.tensors["visual.0.weight"][0, 0] == pytest.approx(0.9, abs=1e-15)
        assert p2.tensors["visual.0.weight"][0, 0] == pytest.approx(0.76, abs=1e-15)


class TestWarmup:
    def test_sup_loss_trend_decreases(self):
        ds = tiny_dataset(n_labeled=16, n_unlabeled=8, n_test=8)
        per_seed = []
        for seed in range(5):
            cfg = tiny_config(seed=seed, total_epochs=7, warmup_epochs=6, learning_rate=0.1)
            ctx = TrainContext(cfg, ds)
            records = warmup(ctx)
            per_seed.append([r.loss_sup for r in records])
        medians = np.median(np.array(per_seed), axis=0)
        violations = int(np.sum(np.diff(medians) >= 0))
        assert violations <= 1, f"median warmup sup-loss not trending down: {medians}"

    def test_models_diverge_despite_shared_data(self):
        ds = tiny_dataset()
        ctx = TrainContext(tiny_config(), ds)
        warmup(ctx)
        pa = ctx.states["A"].params
        pb = ctx.states["B"].params
        assert pa.tensors["visual.0.weight"].shape != pb.tensors["visual.0.weight"].shape
        a_vec = np.concatenate([v.ravel() for v in pa.tensors.values()])
        b_vec = np.concatenate([v.ravel() for v in pb.tensors.values()])
        assert a_vec.shape != b_vec.shape or np.linalg.norm(a_vec - b_vec) > 0

    def test_warmup_record_has_no_selection(self):
        ds = tiny_dataset()
        ctx = TrainContext(tiny_config(), ds)
        (rec,) = warmup(ctx)
        assert rec.n_selected == 6
        assert math.isnan(rec.mean_rho)
        assert rec.loss_cross == 0.0


class TestModes:
    def test_sup_only_selection_is_always_the_labeled_set(self):
        ds = tiny_dataset()
        res = run_experiment(tiny_config(mode=MODE_SUP_ONLY, warmup_epochs=0), ds)
        assert all(r.n_selected == 6 for r in res.history.records)

    def test_vanilla_uses_all_unlabeled(self):
        ds = tiny_dataset()
        res = run_experiment(tiny_config(mode=MODE_VANILLA), ds)
        post_warmup = res.history.records[1:]
        assert all(r.n_selected == 30 for r in post_warmup)

    def test_mode_matrix_smoke(self):
        ds = tiny_dataset()
        for mode in (MODE_XPL, MODE_SUP_ONLY, MODE_VANILLA):
            res = run_experiment(tiny_config(mode=mode), ds)
            assert [r.epoch for r in res.history.records] == list(range(4))

    def test_no_data_selection_uses_all_unlabeled(self):
        ds = tiny_dataset()
        res = run_experiment(tiny_config(no_data_selection=True), ds)
        assert all(r.n_selected == 30 for r in res.history.records[1:])


class TestCrossRefineDecoupling:
    def test_self_training_ignores_other_model(self):
        ds = tiny_dataset()
        cfg = tiny_config(no_cross_refine=True, no_plema=True)
        ctx = TrainContext(cfg, ds)
        warmup(ctx)
        _, pls_before, _, _ = ctx.pseudo_label_refresh(1)
        # perturb model B and refresh again: A's own pseudo-labels are unchanged
        for name in list(ctx.states["B"].params.tensors):
            ctx.states["B"].params.tensors[name] = ctx.states["B"].params.tensors[name] + 0.05
        _, pls_after, _, _ = ctx.pseudo_label_refresh(1)
        for sid, pl in pls_before["A"].items():
            np.testing.assert_array_equal(pls_after["A"][sid], pl)

    def test_cross_refine_does_depend_on_other_model(self):
        ds = tiny_dataset()
        cfg = tiny_config(no_plema=True, no_data_selection=True)
        ctx = TrainContext(cfg, ds)
        warmup(ctx)
        _, pls_before, _, _ = ctx.pseudo_label_refresh(1)
        for name in list(ctx.states["B"].params.tensors):
            ctx.states["B"].params.tensors[name] = ctx.states["B"].params.tensors[name] + 0.05
        _, pls_after, _, _ = ctx.pseudo_label_refresh(1)
        changed = any(
            not np.array_equal(pls_after["B"][sid], pl) for sid, pl in pls_before["B"].items()
        )
        assert changed


class TestEpochTrace:
    """Replay one frozen-parameter epoch with module-level operations."""

    def build(self):
        ds = tiny_dataset(seed=21, n_labeled=6, n_unlabeled=10, n_test=4, n_openset=2)
        cfg = tiny_config(
            seed=5,
            learning_rate=0.0,  # frozen params: every batch is reproducible
            total_epochs=3,
            warmup_epochs=1,
            batch_size=5,
            no_data_selection=False,
        )
        ctx = TrainContext(cfg, ds)
        warmup(ctx)
        return ds, cfg, ctx

    def test_epoch_reproduces_hand_traced_selection_and_losses(self):
        ds, cfg, ctx = self.build()
        params = {tag: ctx.states[tag].params for tag in ("A", "B")}
        labeled = ds.by_split("labeled")
        unlabeled = ds.by_split("unlabeled")
        labeled_ids = {p.sample_id for p in labeled}
        pool = labeled + unlabeled

        # oracle: consensus and selection via the public module operations
        maps = {
            tag: {p.sample_id: prediction_map(params[tag], p, tag).values for p in pool}
            for tag in ("A", "B")
        }
        rhos = {}
        for p in unlabeled:
            try:
                rhos[p.sample_id] = P.pearson(maps["A"][p.sample_id], maps["B"][p.sample_id])
            except P.ConstantMapError:
                pass
        expected_sel = P.curriculum_select(rhos, labeled_ids, 1 - cfg.resolved_warmup + 0, ctx.schedule)
        expected_ids = sorted(expected_sel | labeled_ids)

        # oracle: first-epoch pseudo-labels are the sharpened instant labels
        expected_pls = {
            tag: {
                sid: P.make_instant_pl(maps[tag][sid], cfg.sharpen_a) for sid in expected_ids
            }
            for tag in ("A", "B")
        }

        # oracle: batch order and per-batch losses
        rng = np.random.default_rng([cfg.seed, 7, 1])
        order = [expected_ids[i] for i in rng.permutation(len(expected_ids))]
        batches = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            batches.append(
                [s for s in chunk if s in labeled_ids] + [s for s in chunk if s not in labeled_ids]
            )
        pair_of = {p.sample_id: p for p in pool}
        mask_of = {p.sample_id: p.gt_mask for p in labeled}
        expected = {"cross": [], "sup": [], "unsup": [], "total": []}
        for batch in batches:
            parts = {}
            for tag, other in (("A", "B"), ("B", "A")):
                views = [augment(pair_of[sid], (cfg.seed, 11 if tag == "A" else 12, 1)) for sid in batch]
                view_maps = np.stack(
                    [prediction_map(params[tag], v, tag).values for v in views]
                )
                tgt = np.stack([expected_pls[other][sid] for sid in batch])
                cross = L.cross_loss(tgt, view_maps, pl_from=other, map_from=tag).item()
                lab = [sid for sid in batch if sid in labeled_ids]
                if lab:
                    gt = np.stack([mask_of[sid] for sid in lab])
                    sup = L.sup_loss(gt, view_maps[: len(lab)]).item()
                else:
                    sup = 0.0
                aud = np.stack([encode_audio(params[tag], v.audio).data for v in views])
                gmp = np.stack(
                    [
                        encode_visual(params[tag], v.visual_grid).data.reshape(-1, 6).max(axis=0)
                        for v in views
                    ]
                )
                unsup = L.infonce_loss(aud, gmp, cfg.tau).item()
                parts[tag] = (cross, sup, unsup)
            b = L.total_loss(parts, cfg.lambda_u)
            expected["cross"].append(b.cross)
            expected["sup"].append(b.sup)
            expected["unsup"].append(b.unsup)
            expected["total"].append(b.total)

        rec = ctx.xpl_epoch(1)
        assert rec.n_selected == len(expected_ids)
        assert rec.loss_cross == pytest.approx(np.mean(expected["cross"]), rel=1e-9)
        assert rec.loss_sup == pytest.approx(np.mean(expected["sup"]), rel=1e-9)
        assert rec.loss_unsup == pytest.approx(np.mean(expected["unsup"]), rel=1e-9)
        assert rec.loss_total == pytest.approx(np.mean(expected["total"]), rel=1e-9)

    def test_selection_grows_monotonically_with_frozen_models(self):
        ds = tiny_dataset(seed=31, n_unlabeled=40)
        cfg = tiny_config(
            seed=6, learning_rate=0.0, total_epochs=8, warmup_epochs=1, ramp_start=0.2
        )
        res = run_experiment(cfg, ds)
        selected = [r.n_selected for r in res.history.records[1:]]
        assert all(b >= a for a, b in zip(selected, selected[1:]))

    def test_gradient_steps_leave_bank_untouched(self):
        ds = tiny_dataset()
        cfg = tiny_config(seed=7, learning_rate=0.5)
        ctx = TrainContext(cfg, ds)
        warmup(ctx)
        d_all, pls, _, _ = ctx.pseudo_label_refresh(1)
        snapshot = {k: v.values.copy() for k, v in ctx.bank.entries.items()}
        targets = {
            tag: np.stack([pls["B" if tag == "A" else "A"][sid] for sid in d_all[:4]])
            for tag in ("A", "B")
        }
        ctx._gradient_step(d_all[:4], 1, targets)
        assert set(snapshot) == set(ctx.bank.entries)
        for key, values in snapshot.items():
            np.testing.assert_array_equal(ctx.bank.entries[key].values, values)


class TestDeterminism:
    def test_identical_configs_identical_histories(self):
        import dataclasses

        ds = tiny_dataset()
        cfg = tiny_config(seed=3)
        h1 = run_experiment(cfg, ds).history
        h2 = run_experiment(cfg, ds).history
        assert len(h1.records) == len(h2.records)
        for r1, r2 in zip(h1.records, h2.records):
            np.testing.assert_equal(dataclasses.asdict(r1), dataclasses.asdict(r2))

    def test_history_epochs_contiguous(self):
        ds = tiny_dataset()
        res = run_experiment(tiny_config(total_epochs=5), ds)
        assert [r.epoch for r in res.history.records] == list(range(5))

    def test_stability_std_tail(self):
        from xpl.trainer import EpochRecord, MetricsHistory

        records = [
            EpochRecord(i, float(c), 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, float("nan"))
            for i, c in enumerate([0, 0, 0, 0, 0, 0, 0, 0, 10, 20])
        ]
        hist = MetricsHistory(records)
        np.testing.assert_allclose(hist.stability_std("a"), np.std([10.0, 20.0]))
