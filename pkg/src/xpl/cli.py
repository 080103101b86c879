"""Command-line entry point: dataset generation, training, evaluation and
ablation sweeps.

Commands
--------
* ``xpl generate``  write a synthetic dataset file.
* ``xpl train``     train one configuration; emits metrics CSV, checkpoint,
                    pseudo-label bank, CIoU curve SVG and a run manifest.
* ``xpl evaluate``  evaluate a checkpoint on the test (and openset) split.
* ``xpl ablate``    run the component ablation matrix plus the EMA-rate sweep.

Every command requires ``--seed``: there is no hidden entropy. Config files
are flat ``key=value`` text; command-line flags override file values. All
output files are written atomically (temp file + rename). Exit codes:
0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import statistics
import sys
import time

import numpy as np

from . import __version__
from .model import BackboneSpec, load_checkpoint, save_checkpoint
from .synthdata import (
    SPLIT_OPENSET,
    SPLIT_TEST,
    GenConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .trainer import (
    MODES,
    Pool,
    TrainConfig,
    evaluate_models,
    run_experiment,
)

TRAIN_CSV_HEADER = (
    "epoch,ciou_A,auc_A,ciou_B,auc_B,loss_cross,loss_sup,loss_unsup,loss_total,n_selected,mean_rho"
)
EVAL_CSV_HEADER = "split,model,ciou,auc,n_samples"
ABLATE_CSV_HEADER = (
    "config,seed,ciou_a,auc_a,ciou_b,auc_b,stability_ciou_a,openset_ciou_a,openset_auc_a"
)

# Component configurations of the ablation matrix (name -> TrainConfig overrides).
ABLATE_COMPONENTS = (
    ("xpl_full", {}),
    ("no_plema", {"no_plema": True}),
    ("no_sharpen", {"no_sharpen": True}),
    ("no_cross_refine", {"no_cross_refine": True}),
    ("no_data_selection", {"no_data_selection": True}),
    ("vanilla_hard_pl", {"mode": "vanilla_hard_pl"}),
    ("sup_only", {"mode": "sup_only"}),
)
ABLATE_BETAS = (0.1, 0.3, 0.5, 0.7, 0.9)


def fmt(value) -> str:
    """CSV value formatting: '.' decimal, 6 significant digits, ints verbatim."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6g}"


def write_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_atomic_via(path: str, writer) -> None:
    """Atomic write for writers that expect a destination path."""
    tmp = f"{path}.tmp"
    writer(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Config file + flag resolution.
# ---------------------------------------------------------------------------


def read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _cast_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _cast_widths(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def resolve(args, file_cfg: dict[str, str], name: str, cast, default):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in file_cfg:
        return cast(file_cfg[name])
    return default


def build_gen_config(args, file_cfg: dict[str, str]) -> GenConfig:
    kwargs = {"seed": args.seed}
    for f in dataclasses.fields(GenConfig):
        if f.name == "seed":
            continue
        cast = float if f.name == "noise_std" else int
        kwargs[f.name] = cast(resolve(args, file_cfg, f.name, cast, f.default))
    return GenConfig(**kwargs)


_TRAIN_SCALARS = (
    ("mode", str),
    ("total_epochs", int),
    ("warmup_epochs", int),
    ("batch_size", int),
    ("learning_rate", float),
    ("momentum", float),
    ("beta", float),
    ("lambda_u", float),
    ("sharpen_a", float),
    ("delta", float),
    ("tau", float),
    ("no_plema", _cast_bool),
    ("no_sharpen", _cast_bool),
    ("no_cross_refine", _cast_bool),
    ("no_data_selection", _cast_bool),
    ("ramp_start", float),
    ("ramp_full_frac", float),
)


def build_train_config(args, file_cfg: dict[str, str]) -> TrainConfig:
    defaults = TrainConfig(seed=0)
    kwargs = {"seed": args.seed}
    for name, cast in _TRAIN_SCALARS:
        kwargs[name] = resolve(args, file_cfg, name, cast, getattr(defaults, name))
    embed = resolve(args, file_cfg, "embed_dim", int, defaults.backbone_a.embed_dim)
    kwargs["backbone_a"] = BackboneSpec(
        hidden_widths=_cast_widths(
            str(resolve(args, file_cfg, "hidden_a", str, "32,16"))
        ),
        embed_dim=embed,
        init_seed=resolve(args, file_cfg, "init_seed_a", int, 1),
    )
    kwargs["backbone_b"] = BackboneSpec(
        hidden_widths=_cast_widths(
            str(resolve(args, file_cfg, "hidden_b", str, "24,24"))
        ),
        embed_dim=embed,
        init_seed=resolve(args, file_cfg, "init_seed_b", int, 2),
    )
    return TrainConfig(**kwargs)


def config_echo_lines(cfg) -> list[str]:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, BackboneSpec):
            lines.append(f"{f.name}.hidden_widths={','.join(str(w) for w in value.hidden_widths)}")
            lines.append(f"{f.name}.embed_dim={value.embed_dim}")
            lines.append(f"{f.name}.init_seed={value.init_seed}")
        else:
            lines.append(f"{f.name}={value}")
    return lines


def write_manifest(path: str, command: str, cfg, artifacts: dict[str, str], started: float) -> None:
    lines = [
        "# xpl-manifest v1",
        f"command={command}",
        f"tool_version={__version__}",
    ]
    lines.extend(config_echo_lines(cfg))
    for name in sorted(artifacts):
        lines.append(f"artifact.{name}={artifacts[name]}")
    lines.append(f"wall_clock_sec={time.time() - started:.3f}")
    write_atomic(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# SVG emission: one polyline per plotted series, no plotting dependency.
# ---------------------------------------------------------------------------

_SVG_SERIES = (("ciou_a", "#1f77b4"), ("ciou_b", "#2ca02c"), ("ciou_avg", "#d62728"))


def render_ciou_svg(history, title: str) -> str:
    width, height, margin = 640, 400, 50
    records = history.records
    n = len(records)
    xs = [margin + (width - 2 * margin) * (i / max(1, n - 1)) for i in range(n)]

    def y_of(v: float) -> float:
        return height - margin - (height - 2 * margin) * (v / 100.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 20}" font-size="11">epoch 0</text>',
        f'<text x="{width - margin}" y="{height - margin + 20}" text-anchor="end" font-size="11">epoch {n - 1}</text>',
        f'<text x="{margin - 5}" y="{height - margin}" text-anchor="end" font-size="11">0</text>',
        f'<text x="{margin - 5}" y="{margin + 4}" text-anchor="end" font-size="11">100</text>',
    ]
    for si, (field_name, color) in enumerate(_SVG_SERIES):
        pts = " ".join(
            f"{x:.2f},{y_of(getattr(r, field_name)):.2f}" for x, r in zip(xs, records)
        )
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<text x="{width - margin - 120}" y="{margin + 14 * si + 10}" font-size="11" '
            f'fill="{color}">{field_name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------


def history_csv(history) -> str:
    rows = [TRAIN_CSV_HEADER]
    for r in history.records:
        rows.append(
            ",".join(
                [
                    fmt(r.epoch),
                    fmt(r.ciou_a),
                    fmt(r.auc_a),
                    fmt(r.ciou_b),
                    fmt(r.auc_b),
                    fmt(r.loss_cross),
                    fmt(r.loss_sup),
                    fmt(r.loss_unsup),
                    fmt(r.loss_total),
                    fmt(r.n_selected),
                    fmt(r.mean_rho),
                ]
            )
        )
    return "\n".join(rows) + "\n"


def cmd_generate(args) -> int:
    started = time.time()
    file_cfg = read_config_file(args.config) if args.config else {}
    cfg = build_gen_config(args, file_cfg)
    ds = generate_dataset(cfg)
    write_atomic_via(args.out, lambda tmp: save_dataset(tmp, ds))
    manifest_path = args.out + ".manifest"
    write_manifest(manifest_path, "generate", cfg, {"dataset": args.out}, started)
    print(f"wrote {args.out} ({len(ds.pairs)} samples)")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    file_cfg = read_config_file(args.config) if args.config else {}
    cfg = build_train_config(args, file_cfg)
    ds = load_dataset(args.dataset)
    result = run_experiment(cfg, ds)

    os.makedirs(args.outdir, exist_ok=True)
    paths = {
        "metrics": os.path.join(args.outdir, "metrics.csv"),
        "checkpoint": os.path.join(args.outdir, "checkpoint.txt"),
        "bank": os.path.join(args.outdir, "bank.txt"),
        "curve": os.path.join(args.outdir, "ciou_curve.svg"),
    }
    write_atomic(paths["metrics"], history_csv(result.history))
    write_atomic_via(paths["checkpoint"], lambda tmp: save_checkpoint(tmp, result.params))
    write_atomic_via(paths["bank"], lambda tmp: result.bank.save(tmp))
    write_atomic(paths["curve"], render_ciou_svg(result.history, f"test CIoU per epoch ({cfg.mode})"))
    write_manifest(os.path.join(args.outdir, "manifest.txt"), "train", cfg, paths, started)

    final = result.history.final()
    print(
        f"{cfg.mode}: final test CIoU A={fmt(final.ciou_a)} B={fmt(final.ciou_b)} "
        f"AUC A={fmt(final.auc_a)} (epoch {final.epoch})"
    )
    return 0


def _eval_rows(models, ds) -> list[str]:
    rows = []
    params_a, params_b = models["A"], models["B"]
    for split in (SPLIT_TEST, SPLIT_OPENSET):
        pairs = ds.by_split(split)
        if not pairs:
            continue
        pool = Pool.build(pairs, with_masks=True)
        reports = evaluate_models(params_a, params_b, pool)
        for tag in ("A", "B"):
            rep = reports[tag]
            rows.append(
                ",".join([split, tag, fmt(rep.ciou), fmt(rep.auc), fmt(rep.n_samples)])
            )
    return rows


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.dataset)
    models = load_checkpoint(args.checkpoint)
    if set(models) != {"A", "B"}:
        raise ValueError(f"checkpoint must hold models A and B, found {sorted(models)}")
    for tag, params in models.items():
        if params.in_visual != ds.config.c_visual or params.in_audio != ds.config.c_audio:
            raise ValueError(
                f"checkpoint model {tag} expects {params.in_visual}/{params.in_audio} "
                f"feature channels, dataset has {ds.config.c_visual}/{ds.config.c_audio}"
            )
    rows = [EVAL_CSV_HEADER] + _eval_rows(models, ds)
    write_atomic(args.out, "\n".join(rows) + "\n")
    print(f"wrote {args.out} ({len(rows) - 1} rows)")
    return 0


def ablate_configurations(base: TrainConfig):
    """The 7 component configurations plus the 5-point EMA-rate sweep."""
    configs = []
    for name, overrides in ABLATE_COMPONENTS:
        configs.append((name, dataclasses.replace(base, **overrides)))
    for b in ABLATE_BETAS:
        configs.append((f"beta_{b}", dataclasses.replace(base, beta=b)))
    return configs


def cmd_ablate(args) -> int:
    started = time.time()
    file_cfg = read_config_file(args.config) if args.config else {}
    base = build_train_config(args, file_cfg)
    ds = load_dataset(args.dataset)
    seeds = [args.seed + i for i in range(args.n_seeds)]

    openset_pool = None
    openset_pairs = ds.by_split(SPLIT_OPENSET)
    if openset_pairs:
        openset_pool = Pool.build(openset_pairs, with_masks=True)

    rows = []
    by_config: dict[str, list[list[float]]] = {}
    for name, cfg_template in ablate_configurations(base):
        for seed in seeds:
            cfg = dataclasses.replace(cfg_template, seed=seed)
            result = run_experiment(cfg, ds)
            final = result.history.final()
            if openset_pool is not None:
                openset = evaluate_models(result.params["A"], result.params["B"], openset_pool)
                op_ciou, op_auc = openset["A"].ciou, openset["A"].auc
            else:
                op_ciou = op_auc = float("nan")
            values = [
                final.ciou_a,
                final.auc_a,
                final.ciou_b,
                final.auc_b,
                result.history.stability_std("a"),
                op_ciou,
                op_auc,
            ]
            by_config.setdefault(name, []).append(values)
            rows.append(",".join([name, str(seed)] + [fmt(v) for v in values]))

    summary = []
    for name, _ in ablate_configurations(base):
        runs = by_config[name]
        medians = [statistics.median(col) for col in zip(*runs)]
        summary.append(",".join([name, "median"] + [fmt(v) for v in medians]))

    os.makedirs(args.outdir, exist_ok=True)
    out_csv = os.path.join(args.outdir, "ablation.csv")
    write_atomic(out_csv, "\n".join([ABLATE_CSV_HEADER] + rows + summary) + "\n")
    write_manifest(
        os.path.join(args.outdir, "ablation_manifest.txt"),
        "ablate",
        base,
        {"ablation": out_csv, "dataset": args.dataset},
        started,
    )
    print(f"wrote {out_csv} ({len(rows)} runs, {len(summary)} summary rows)")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, required=True, help="experiment seed (required; no hidden entropy)")
    p.add_argument("--config", type=str, default=None, help="key=value config file; flags override")


def _add_gen_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(GenConfig):
        if f.name == "seed":
            continue
        cast = float if f.name == "noise_std" else int
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=cast, default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default=None)
    for name, cast in _TRAIN_SCALARS:
        if name == "mode":
            continue
        if cast is _cast_bool:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_const", const=True, default=None)
        else:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=cast, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--hidden-a", dest="hidden_a", type=str, default=None, help="e.g. 32,16")
    p.add_argument("--hidden-b", dest="hidden_b", type=str, default=None)
    p.add_argument("--init-seed-a", dest="init_seed_a", type=int, default=None)
    p.add_argument("--init-seed-b", dest="init_seed_b", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xpl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p_gen)
    p_gen.add_argument("--out", required=True)
    _add_gen_flags(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train one configuration")
    _add_common(p_train)
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--outdir", required=True)
    _add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_evaluate)

    p_abl = sub.add_parser("ablate", help="component ablations + EMA-rate sweep")
    _add_common(p_abl)
    p_abl.add_argument("--dataset", required=True)
    p_abl.add_argument("--outdir", required=True)
    p_abl.add_argument("--n-seeds", dest="n_seeds", type=int, default=3)
    _add_train_flags(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
