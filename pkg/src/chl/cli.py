"""Command line entry point: ``chl <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import AugmentPipeline, apply_pipeline
from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .config import RunConfig, config_help, load_config, write_resolved_config
from .data import load_manifest, read_png, write_png, write_synthetic_dataset
from .errors import ChlError, ConfigError, DataError
from .finetune import finetune
from .losses import COMBINATIONS
from .metrics import evaluate_records
from .pairs import build_pair_sets, relax_pair_sets, write_pairs_file, write_similarity_cache
from .pipeline import evaluate_manifest, load_split, run_ablation, run_pipeline, write_reports
from .stain import (
    OpticalDensity,
    StainConfig,
    estimate_stains,
    hed_augment,
    od_to_rgb,
    rgb_to_od,
    stain_channels,
)
from .train import train_contrastive, training_similarity

log = logging.getLogger("chl")


def _resolved_path(out: Path) -> Path:
    return out.with_name(out.stem + ".resolved.ini")


def _training_data(cfg: RunConfig):
    if not cfg.manifest:
        raise ConfigError("no manifest configured ([run] manifest)")
    manifest = load_manifest(cfg.manifest).filter_magnification(cfg.magnification)
    if len(manifest) == 0:
        raise DataError(f"no rows with magnification {cfg.magnification}")
    (train, val, _), _ = load_split(cfg, manifest, cfg.folds[0])
    return train, val


def cmd_synth_data(args) -> int:
    path = write_synthetic_dataset(args.out, args.n_per_class, args.size, args.seed)
    print(path)
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_resolved_config(_resolved_path(out), cfg)
    train, _ = _training_data(cfg)
    ckpt = train_contrastive(
        train, cfg.loss, cfg.pretrain, cfg.encoder, cfg.pipeline(), "pretrain", dump_dir=out.parent
    )
    print(save_checkpoint(out, ckpt))
    return 0


def cmd_relax(args) -> int:
    cfg = load_config(args.config)
    if args.threshold is not None:
        cfg = replace(cfg, relax_threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_resolved_config(_resolved_path(out), cfg)
    stage1 = load_checkpoint(args.checkpoint)
    if stage1.stage != "pretrain":
        raise ConfigError(f"relax needs a pretrain checkpoint, got stage {stage1.stage!r}")
    train, _ = _training_data(cfg)
    sim = training_similarity(stage1.encoder_params(), train, stage1.encoder_config)
    parent = file_hash(args.checkpoint)
    write_similarity_cache(out.with_suffix(".sim"), sim, parent)
    relaxed, report = relax_pair_sets(build_pair_sets(train.labels), sim, cfg.relax_threshold)
    write_pairs_file(out, report, train.item_ids)
    print("removed %d positive and %d negative pairs" % report.total_removed)
    if args.ckpt_out:
        stage2 = train_contrastive(
            train,
            cfg.loss,
            cfg.relax,
            stage1.encoder_config,
            cfg.pipeline(),
            "relax",
            init_params=stage1.encoder_params(),
            dataset_pairs=relaxed,
            dump_dir=out.parent,
        )
        stage2.parent_hash = parent
        print(save_checkpoint(args.ckpt_out, stage2))
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_resolved_config(_resolved_path(out), cfg)
    init = load_checkpoint(args.checkpoint)
    train, val = _training_data(cfg)
    metrics = Path(args.metrics) if args.metrics else out.with_name(out.stem + "_epochs.csv")
    ckpt = finetune(train, init, cfg.finetune, cfg.pipeline(), cfg.stain_target_config(), val, metrics)
    ckpt.parent_hash = file_hash(args.checkpoint)
    print(save_checkpoint(out, ckpt))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.stage != "finetune":
        raise ConfigError(f"eval needs a finetune checkpoint, got stage {ckpt.stage!r}")
    manifest = load_manifest(args.manifest)
    records = evaluate_manifest(ckpt, manifest)
    report = evaluate_records(records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reports(out, report)
    print(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    combos = tuple(args.combos.split(",")) if args.combos else tuple(COMBINATIONS)
    unknown = set(combos) - set(COMBINATIONS)
    if unknown:
        raise ConfigError(f"unknown combinations {sorted(unknown)}")
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    write_resolved_config(Path(cfg.out_dir) / "resolved_config.ini", cfg)
    rows, path = run_ablation(cfg, combos, resume=args.resume)
    if args.out:
        shutil.copyfile(path, args.out)
        path = args.out
    for row in rows:
        print(",".join(row))
    print(path)
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    if args.skip_relax:
        cfg = replace(cfg, skip_relax=True)
    result = run_pipeline(cfg, resume=args.resume)
    print(result.report_path)
    return 0


def cmd_stain_separate(args) -> int:
    image = read_png(args.image)
    cfg = StainConfig(sparsity_weight=args.sparsity, max_iterations=args.max_iterations)
    od = rgb_to_od(image)
    model = estimate_stains(od, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h_img, e_img = stain_channels(model)
    write_png(out / "hematoxylin.png", h_img)
    write_png(out / "eosin.png", e_img)
    recon = OpticalDensity(model.w @ model.h, od.height, od.width)
    write_png(out / "reconstruction.png", od_to_rgb(recon))
    summary = {
        "w_row_major": model.w.reshape(-1).tolist(),
        "objective": model.objective,
        "iterations": model.iterations,
    }
    (out / "stain.json").write_text(json.dumps(summary, indent=1))
    print(out)
    return 0


def cmd_augment_preview(args) -> int:
    image = read_png(args.image)
    rng = np.random.default_rng(args.seed)
    cfg = StainConfig(max_iterations=args.max_iterations)
    view = hed_augment(image, cfg, args.strength, rng)
    if args.pipeline:
        view = apply_pipeline(AugmentPipeline.default(args.seed).without("hed"), view, rng)
    out = Path(args.out) if args.out else Path(args.image).with_name(Path(args.image).stem + "_aug.png")
    write_png(out, view)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chl",
        description="Staged contrastive learning workbench for H&E image classification.",
        epilog=config_help()
        + "\n\nenvironment: CHL_SEED overrides [run] seed; CHL_PURE_PYTHON=1 disables compiled kernels.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic two-class dataset and manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-per-class", type=int, default=300)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("pretrain", help="first contrastive stage")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("relax", help="similarity matrix, pair pruning and optional retraining")
    p.add_argument("--checkpoint", required=True, help="pretrain-stage checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--threshold", type=float, default=None, help="overrides [run] relax_threshold")
    p.add_argument("--out", required=True, help="pairs file (JSON); the similarity cache goes beside it")
    p.add_argument("--ckpt-out", help="also retrain on the relaxed pairs and write this checkpoint")
    p.set_defaults(fn=cmd_relax)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a relax-stage checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="per-epoch CSV (default: <out>_epochs.csv)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="score a fine-tuned checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report CSV; patient-level accuracy goes to <stem>_patient.csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="loss-term ablation over comb1..comb7 on one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="copy the table here")
    p.add_argument("--out-dir", help="overrides [run] out_dir")
    p.add_argument("--combos", help="comma-separated subset, e.g. comb1,comb7")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("run", help="full pipeline: pretrain, relax, retrain, finetune, eval")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", help="overrides [run] out_dir")
    p.add_argument("--skip-relax", action="store_true", help="retrain on unrelaxed pairs (baseline)")
    p.add_argument("--resume", action="store_true", help="reuse persisted stage artifacts that chain correctly")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("stain", help="stain tools")
    stain_sub = p.add_subparsers(dest="stain_command", required=True)
    s = stain_sub.add_parser("separate", help="separate an image into H and E channels")
    s.add_argument("image")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--sparsity", type=float, default=0.1)
    s.add_argument("--max-iterations", type=int, default=500)
    s.set_defaults(fn=cmd_stain_separate)

    p = sub.add_parser("augment-preview", help="write one HED-augmented view of an image")
    p.add_argument("image")
    p.add_argument("--strength", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iterations", type=int, default=30)
    p.add_argument("--pipeline", action="store_true", help="also apply the default augmentation pipeline")
    p.add_argument("--out", help="output PNG (default: <image>_aug.png)")
    p.set_defaults(fn=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ChlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # Remaining ValueErrors come from dataclass validation of user-supplied settings.
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
