"""Cohort-level glue: preprocessing a manifest, loading bags, running the fold protocol."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import torch

from . import ct_pipeline, patho_pipeline
from .data_model import NUM_FOLDS, TASKS, FoldSplit, StudyRecord, make_folds, num_classes
from .evaluation import EvalReport, FoldResult, PredictionSet, aggregate_folds, evaluate_fold
from .logutil import get_logger
from .models import VARIANTS
from .training import FeatureCache, PatientBags, TrainConfig, derive_seed, train_fold

log = get_logger("pipeline")


def _resolve(root: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else root / p


def preprocess_ct_record(record: StudyRecord, root: Path, out_dir: Path, mask_dir: Path | None = None) -> dict:
    volume = ct_pipeline.read_volume(_resolve(root, record.ct_ref))
    provider = None
    if mask_dir is not None:
        mask_path = next((mask_dir / f"{record.patient_id}_mask{ext}" for ext in (".nii", ".nii.gz", ".vol")
                          if (mask_dir / f"{record.patient_id}_mask{ext}").exists()), None)
        if mask_path is None:
            raise FileNotFoundError(f"no mask for patient {record.patient_id} in {mask_dir}")
        provider = ct_pipeline.VolumeMaskProvider.from_file(mask_path)
        if provider.mask.shape != volume.shape:
            raise ValueError(f"{mask_path}: mask shape {provider.mask.shape} != volume shape {volume.shape}")
    bag = ct_pipeline.preprocess_volume(volume, provider, record.patient_id)
    ct_pipeline.save_slice_bag(bag, out_dir / record.patient_id)
    return {"patient_id": record.patient_id, "kept": bag.kept_count, "discarded": bag.discarded_count}


def preprocess_wsi_record(record: StudyRecord, root: Path, out_dir: Path) -> dict:
    raster = patho_pipeline.read_raster(_resolve(root, record.wsi_ref))
    bag = patho_pipeline.preprocess_raster(raster, record.patient_id)
    patho_pipeline.save_patch_bag(bag, out_dir / record.patient_id)
    return {"patient_id": record.patient_id, "kept": bag.kept_count, "discarded": bag.discarded_count}


def load_bags(records: Sequence[StudyRecord], ct_dir: Path | None, wsi_dir: Path | None) -> list[PatientBags]:
    bags = []
    for rec in records:
        b = PatientBags(rec.patient_id, rec.labels())
        if ct_dir is not None and (ct_dir / rec.patient_id / "bag.json").exists():
            sb = ct_pipeline.load_slice_bag(ct_dir / rec.patient_id)
            b.ct, b.ct_keys = sb.slices, sb.keys
        if wsi_dir is not None and (wsi_dir / rec.patient_id / "bag.json").exists():
            pb = patho_pipeline.load_patch_bag(wsi_dir / rec.patient_id)
            b.patho, b.patho_keys = pb.patches, pb.keys
        bags.append(b)
    return bags


def bags_from_arrays(patients, mask: str = "threshold") -> list[PatientBags]:
    """In-memory preprocessing of synthetic patients (``mask``: 'threshold' or 'truth')."""
    bags = []
    for p in patients:
        provider = ct_pipeline.VolumeMaskProvider(p.mask) if mask == "truth" else None
        sb = ct_pipeline.preprocess_volume(p.volume, provider, p.record.patient_id)
        pb = patho_pipeline.preprocess_raster(p.slide, p.record.patient_id)
        bags.append(PatientBags(p.record.patient_id, dict(p.labels), sb.slices, sb.keys, pb.patches, pb.keys))
    return bags


def evaluate_predictions(predictions: PredictionSet, task: str, variant: str, fold: int,
                         config: TrainConfig) -> FoldResult:
    return evaluate_fold(predictions, num_classes(task), fold, config.bootstrap_iters,
                         seed=derive_seed(config.seed, "bootstrap", task, variant, fold))


def write_eval(fold_dir: Path, task: str, variant: str, result: FoldResult) -> Path:
    path = Path(fold_dir) / "eval.json"
    payload = {"task": task, "variant": variant, **vars(result), "ci": list(result.ci)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def collect_report(runs_root: str | Path, n_folds: int = NUM_FOLDS) -> EvalReport:
    """Aggregate every ``runs/{task}/{variant}/fold{k}/eval.json`` under ``runs_root``."""
    by_cell: dict[tuple[str, str], list[FoldResult]] = {}
    for path in sorted(Path(runs_root).glob("*/*/fold*/eval.json")):
        data = json.loads(path.read_text())
        task, variant = data.pop("task"), data.pop("variant")
        data["ci"] = tuple(data["ci"])
        by_cell.setdefault((task, variant), []).append(FoldResult(**data))
    return EvalReport([aggregate_folds(t, v, res, n_folds) for (t, v), res in sorted(by_cell.items())])


def _run_one(args):
    bags, task, variant, split, fold, config, out_dir, cache = args
    run = train_fold(bags, task, variant, split, fold, config, cache, out_dir)
    return run, evaluate_predictions(run.predictions, task, variant, fold, config)


def run_experiment(
    bags: Sequence[PatientBags],
    config: TrainConfig,
    tasks: Sequence[str] = TASKS,
    variants: Sequence[str] = VARIANTS,
    split: FoldSplit | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    cache: FeatureCache | None = None,
) -> tuple[EvalReport, list]:
    """Three-fold protocol for every (task, variant); returns the report and the TrainRuns."""
    split = split or make_folds([b.patient_id for b in bags], config.seed)
    if cache is None:
        cache = FeatureCache(bags, config.backbone, config.init, derive_seed(config.seed, "backbone"))
    out = Path(out_dir) if out_dir is not None else None
    jobs_args = [
        (bags, task, variant, split, fold, config,
         None if out is None else out / "runs" / task / variant / f"fold{fold}", cache)
        for task in tasks for variant in variants for fold in range(len(split.folds))
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=torch.set_num_threads, initargs=(1,)) as pool:
            outcomes = list(pool.map(_run_one, jobs_args))
    else:
        outcomes = [_run_one(a) for a in jobs_args]
    by_cell: dict[tuple[str, str], list[FoldResult]] = {}
    runs = []
    for (args, (run, result)) in zip(jobs_args, outcomes):
        by_cell.setdefault((args[1], args[2]), []).append(result)
        runs.append(run)
        if out is not None:
            write_eval(args[6], args[1], args[2], result)
    report = EvalReport([aggregate_folds(t, v, res, len(split.folds)) for (t, v), res in by_cell.items()])
    return report, runs


def mean_auc(report: EvalReport, task: str, variant: str) -> float:
    cell = report.cell(task, variant)
    return float("nan") if cell is None or cell.mean is None else cell.mean


def per_task_means(report: EvalReport, variant: str) -> dict[str, float]:
    return {t: mean_auc(report, t, variant) for t in report.tasks}


__all__ = [
    "preprocess_ct_record", "preprocess_wsi_record", "load_bags", "bags_from_arrays", "run_experiment",
    "evaluate_predictions", "write_eval", "collect_report", "mean_auc", "per_task_means",
]
