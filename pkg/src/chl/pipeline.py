"""End-to-end orchestration: pretrain, similarity, relax, retrain, fine-tune, evaluate.

Each stage persists its artifact under ``<out_dir>/fold<k>/``. Checkpoints
record the sha256 of their predecessor so the chain can be verified and any
stage resumed from what is already on disk.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import NO_PARENT, Checkpoint, file_hash, load_checkpoint, save_checkpoint
from .config import RunConfig, write_resolved_config
from .data import DatasetManifest, ImageSet, load_images, load_manifest, split_folds
from .errors import ChlError, DataError
from .finetune import finetune, predict
from .losses import COMBINATIONS, TERMS
from .metrics import (
    EvaluationRecord,
    MetricsReport,
    evaluate_records,
    write_level_accuracy_csv,
    write_report_csv,
)
from .pairs import build_pair_sets, read_similarity_cache, relax_pair_sets, write_pairs_file, write_similarity_cache
from .train import train_contrastive, training_similarity

log = logging.getLogger(__name__)

STAGE_FILES = {
    "pretrain": "pretrain.ckpt",
    "similarity": "similarity.bin",
    "pairs": "pairs.json",
    "relax": "relax.ckpt",
    "finetune": "finetune.ckpt",
}


@dataclass
class FoldResult:
    fold: int
    final: Checkpoint
    records: list[EvaluationRecord]
    artifacts: dict[str, Path]


@dataclass
class PipelineResult:
    folds: list[FoldResult]
    report: MetricsReport
    report_path: Path


class StageFailure(ChlError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.exit_code = getattr(exc, "exit_code", 1)


def _run_stage(name, fn):
    try:
        return fn()
    except Exception as exc:
        raise StageFailure(name, exc) from exc


def _save(path: Path, ckpt: Checkpoint, parent: str) -> str:
    ckpt.parent_hash = parent
    return save_checkpoint(path, ckpt)


def _resume(path: Path, parent: str) -> Checkpoint | None:
    if not path.is_file():
        return None
    ckpt = load_checkpoint(path)
    if ckpt.parent_hash != parent:
        log.info("%s does not chain from the current predecessor; recomputing", path.name)
        return None
    log.info("resuming from %s", path)
    return ckpt


def verify_chain(paths) -> None:
    """Each checkpoint must name the hash of the one before it."""
    parent = NO_PARENT
    for path in paths:
        ckpt = load_checkpoint(path)
        if ckpt.parent_hash != parent:
            raise DataError(f"hash chain broken at {path}")
        parent = file_hash(path)


def load_split(cfg: RunConfig, manifest: DatasetManifest, fold: int):
    splits = split_folds(manifest, cfg.n_folds, cfg.split_ratios, cfg.seed)
    s = splits[fold]
    size = cfg.encoder.input_size
    return tuple(load_images(manifest.subset(idx), size) for idx in (s.train, s.val, s.test)), s


def run_fold(cfg: RunConfig, manifest: DatasetManifest, fold: int, resume: bool = False) -> FoldResult:
    out = Path(cfg.out_dir) / f"fold{fold}"
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in STAGE_FILES.items()}
    (train, val, test), _ = load_split(cfg, manifest, fold)
    pipeline = cfg.pipeline()
    log.info("fold %d: %d train / %d val / %d test images", fold, len(train), len(val), len(test))

    stage1 = _resume(paths["pretrain"], NO_PARENT) if resume else None
    if stage1 is None:
        stage1 = _run_stage(
            "pretrain",
            lambda: train_contrastive(
                train, cfg.loss, cfg.pretrain, cfg.encoder, pipeline, "pretrain", dump_dir=out
            ),
        )
        _save(paths["pretrain"], stage1, NO_PARENT)
    h1 = file_hash(paths["pretrain"])

    def relaxed_pairs():
        sim = None
        if resume and paths["similarity"].is_file():
            cached, digest = read_similarity_cache(paths["similarity"])
            if digest == h1 and cached.shape[0] == len(train):
                sim = cached
        if sim is None:
            sim = training_similarity(stage1.encoder_params(), train, cfg.encoder)
            write_similarity_cache(paths["similarity"], sim, h1)
        relaxed, report = relax_pair_sets(build_pair_sets(train.labels), sim, cfg.relax_threshold)
        write_pairs_file(paths["pairs"], report, train.item_ids)
        removed = report.total_removed
        log.info("relax: removed %d positive and %d negative pairs", *removed)
        return relaxed

    dataset_pairs = None if cfg.skip_relax else _run_stage("relax-pairs", relaxed_pairs)

    stage2 = _resume(paths["relax"], h1) if resume else None
    if stage2 is None:
        stage2 = _run_stage(
            "relax",
            lambda: train_contrastive(
                train,
                cfg.loss,
                cfg.relax,
                cfg.encoder,
                pipeline,
                "relax",
                init_params=stage1.encoder_params(),
                dataset_pairs=dataset_pairs,
                dump_dir=out,
            ),
        )
        stage2.metadata["skip_relax"] = cfg.skip_relax
        _save(paths["relax"], stage2, h1)
    h2 = file_hash(paths["relax"])

    stage3 = _resume(paths["finetune"], h2) if resume else None
    if stage3 is None:
        stage3 = _run_stage(
            "finetune",
            lambda: finetune(
                train,
                stage2,
                cfg.finetune,
                pipeline,
                cfg.stain_target_config(),
                val=val,
                metrics_path=out / "finetune_metrics.csv",
            ),
        )
        _save(paths["finetune"], stage3, h2)
    verify_chain([paths["pretrain"], paths["relax"], paths["finetune"]])

    records = _run_stage("eval", lambda: evaluate_images(stage3, test, fold))
    write_predictions(out / "predictions.csv", records)
    return FoldResult(fold, stage3, records, paths)


def evaluate_images(ckpt: Checkpoint, images: ImageSet, fold: int = 0, magnification: str = "NA"):
    pred = predict(ckpt.encoder_params(), ckpt.head_params(), images.images, ckpt.encoder_config)
    return [
        EvaluationRecord(item, patient, int(t), int(p), fold, magnification)
        for item, patient, t, p in zip(images.item_ids, images.patient_ids, images.labels, pred)
    ]


def evaluate_manifest(ckpt: Checkpoint, manifest: DatasetManifest) -> list[EvaluationRecord]:
    """Predict every manifest row; the manifest's fold column (default 0) groups the report."""
    images = load_images(manifest, ckpt.encoder_config.input_size)
    pred = predict(ckpt.encoder_params(), ckpt.head_params(), images.images, ckpt.encoder_config)
    return [
        EvaluationRecord(r.path, r.patient_id, r.label, int(p), r.fold or 0, r.magnification)
        for r, p in zip(manifest.rows, pred)
    ]


def write_predictions(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("item", "patient_id", "true", "predicted", "fold"))
        for r in records:
            w.writerow((r.item_id, r.patient_id, r.true_label, r.predicted_label, r.fold))


def write_reports(path, report: MetricsReport) -> None:
    path = Path(path)
    write_report_csv(path, report)
    write_level_accuracy_csv(path.with_name(path.stem + "_patient.csv"), report)


def run_pipeline(cfg: RunConfig, resume: bool = False) -> PipelineResult:
    if not cfg.manifest:
        raise DataError("no manifest configured ([run] manifest)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out / "resolved_config.ini", cfg)
    manifest = load_manifest(cfg.manifest).filter_magnification(cfg.magnification)
    if len(manifest) == 0:
        raise DataError(f"no rows with magnification {cfg.magnification}")
    results = [run_fold(cfg, manifest, fold, resume) for fold in cfg.folds]
    report = evaluate_records([r for res in results for r in res.records])
    report_path = out / "report.csv"
    write_reports(report_path, report)
    return PipelineResult(results, report, report_path)


def run_ablation(cfg: RunConfig, combos=tuple(COMBINATIONS), resume: bool = False):
    """Train once per loss-term combination on a single fold and tabulate accuracy.

    Returns ``(table rows, path)``; the table has one column per combination
    and rows marking which of sup/elim/self each uses, plus an accuracy row.
    """
    root = Path(cfg.out_dir)
    fold = cfg.folds[0]
    accuracy = {}
    for name in combos:
        sub = replace(
            cfg,
            out_dir=str(root / "ablation" / name),
            folds=(fold,),
            loss=replace(cfg.loss, combination=frozenset(COMBINATIONS[name])),
        )
        log.info("ablation %s: %s", name, "+".join(COMBINATIONS[name]))
        res = run_pipeline(sub, resume=resume)
        accuracy[name] = res.report.mean["accuracy"]
    header = ["Term"] + [n.capitalize() for n in combos]
    rows = [header]
    for term in TERMS:
        rows.append([term.capitalize()] + ["x" if term in COMBINATIONS[n] else "" for n in combos])
    rows.append(["Accuracy"] + [f"{accuracy[n]:.4f}" for n in combos])
    path = root / "ablation.csv"
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return rows, path


def mean_balanced_accuracy(result: PipelineResult) -> float:
    return float(np.mean([s.balanced_accuracy for s in result.report.per_fold]))
