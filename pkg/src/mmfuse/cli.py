"""Command-line entry point: ``mmfuse <subcommand> [flags]``.

Output layout under ``--out`` (default ``$MMFUSE_OUT`` or ``./mmfuse_out``)::

    cohort/                      synth: manifest.csv, ct/, masks/, wsi/, ground_truth.json
    bags/ct/<pid>/, bags/wsi/<pid>/   preprocess-ct / preprocess-wsi
    folds.json                   fold split, written once by train
    runs/<task>/<variant>/fold<k>/    train (trace, checkpoint, predictions) + evaluate (eval.json)
    report.md, report.json       report

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .data_model import TASKS, FoldSplit, LabelError, make_folds, read_manifest
from .evaluation import PredictionSet, render_report
from .logutil import configure, get_logger
from .models import VARIANTS, EmptyBagError
from .pipeline import (
    collect_report,
    evaluate_predictions,
    load_bags,
    preprocess_ct_record,
    preprocess_wsi_record,
    write_eval,
)
from .synthdata import SynthSpec, generate_cohort
from .training import DataError, FeatureCache, NumericalError, TrainConfig, derive_seed, profile_config, train_fold

log = get_logger("cli")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(Exception):
    pass


# -- configuration ---------------------------------------------------------------------


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text.decode())
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return data


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Profile defaults, then the config file, then command-line flags."""
    values = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = args.epochs
    try:
        return profile_config(args.profile, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _choices(values: list[str] | None, allowed: tuple[str, ...], what: str) -> list[str]:
    if not values or values == ["all"]:
        return list(allowed)
    picked = [v for item in values for v in item.split(",") if v]
    bad = [v for v in picked if v not in allowed]
    if bad:
        raise ConfigError(f"unknown {what} {bad}; expected one of {list(allowed)}")
    return [v for v in allowed if v in picked]


def provenance(config: TrainConfig, command: str) -> dict:
    return {
        "command": command,
        "code_version": __version__,
        "seed": config.seed,
        "train_config_hash": config.hash(),
    }


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _record_invocation(out: Path, args: argparse.Namespace, config: TrainConfig) -> None:
    resolved = {
        "command": args.command,
        "profile": args.profile,
        "train": config.to_dict(),
        "tasks": getattr(args, "tasks_resolved", None),
        "variants": getattr(args, "variants_resolved", None),
    }
    if args.command in ("synth", "run-all"):
        resolved["synth"] = {"patients": args.patients, "ct_strength": args.ct_strength,
                             "patho_strength": args.patho_strength}
    _write_json(out / "resolved_config.json", resolved)
    _write_json(out / "provenance.json", provenance(config, args.command))


# -- stages -----------------------------------------------------------------------------


def stage_synth(out: Path, config: TrainConfig, patients: int, ct_strength: float, patho_strength: float) -> Path:
    spec = SynthSpec.with_strength(ct_strength, patho_strength, n_patients=patients, seed=config.seed)
    cohort = generate_cohort(spec, out / "cohort")
    _write_json(out / "cohort" / "provenance.json", provenance(config, "synth"))
    log.info("cohort written", extra={"patients": patients, "manifest": str(cohort.manifest)})
    return cohort.manifest


def _manifest(out: Path, manifest: str | None) -> Path:
    path = Path(manifest) if manifest else out / "cohort" / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return path


def stage_preprocess_ct(out: Path, config: TrainConfig, manifest: Path, mask_dir: Path | None,
                        resume: bool = False) -> None:
    dest = out / "bags" / "ct"
    for rec in read_manifest(manifest):
        if resume and (dest / rec.patient_id / "bag.json").exists():
            continue
        try:
            stats = preprocess_ct_record(rec, manifest.parent, dest, mask_dir)
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"patient {rec.patient_id}: {exc}") from exc
        log.info("ct preprocessed", extra=stats)
    _write_json(dest / "provenance.json", provenance(config, "preprocess-ct"))


def stage_preprocess_wsi(out: Path, config: TrainConfig, manifest: Path, resume: bool = False) -> None:
    dest = out / "bags" / "wsi"
    for rec in read_manifest(manifest):
        if resume and (dest / rec.patient_id / "bag.json").exists():
            continue
        try:
            stats = preprocess_wsi_record(rec, manifest.parent, dest)
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"patient {rec.patient_id}: {exc}") from exc
        log.info("wsi preprocessed", extra=stats)
    _write_json(dest / "provenance.json", provenance(config, "preprocess-wsi"))


def _fold_split(out: Path, patient_ids: list[str], seed: int) -> FoldSplit:
    path = out / "folds.json"
    if path.exists():
        split = FoldSplit.from_json(path.read_text())
        if split.seed == seed and sorted(p for f in split.folds for p in f) == sorted(patient_ids):
            return split
    split = make_folds(patient_ids, seed)
    path.write_text(split.to_json() + "\n")
    return split


def _run_dir(out: Path, task: str, variant: str, fold: int) -> Path:
    return out / "runs" / task / variant / f"fold{fold}"


def _is_complete(run_dir: Path, config: TrainConfig) -> bool:
    meta = run_dir / "run.json"
    if not (meta.exists() and (run_dir / "predictions.json").exists() and (run_dir / "model.ckpt").exists()):
        return False
    return json.loads(meta.read_text()).get("train_config_hash") == config.hash()


_WORKER: dict = {}


def _worker_init(out: str, manifest: str, config_dict: dict) -> None:
    import torch

    torch.set_num_threads(1)
    config = TrainConfig.from_dict(config_dict)
    bags = load_bags(read_manifest(manifest), Path(out) / "bags" / "ct", Path(out) / "bags" / "wsi")
    _WORKER.update(bags=bags, config=config,
                   cache=FeatureCache(bags, config.backbone, config.init, derive_seed(config.seed, "backbone")))


def _train_job(job: tuple) -> str:
    out, task, variant, fold, split = job
    run_dir = _run_dir(Path(out), task, variant, fold)
    try:
        train_fold(_WORKER["bags"], task, variant, split, fold, _WORKER["config"], _WORKER["cache"], run_dir)
    except NumericalError as exc:
        raise NumericalError(f"{exc} (trace: {run_dir / 'trace.jsonl'})", exc.batch, exc.epoch) from None
    _write_json(run_dir / "provenance.json", provenance(_WORKER["config"], "train"))
    return str(run_dir)


def stage_train(out: Path, config: TrainConfig, manifest: Path, tasks: list[str], variants: list[str],
                jobs: int = 1) -> int:
    """Train every missing (task, variant, fold) run; completed runs with the same config are kept."""
    records = read_manifest(manifest)
    split = _fold_split(out, [r.patient_id for r in records], config.seed)
    todo = [
        (str(out), t, v, k, split)
        for t in tasks for v in variants for k in range(len(split.folds))
        if not _is_complete(_run_dir(out, t, v, k), config)
    ]
    log.info("training", extra={"pending": len(todo), "jobs": jobs})
    if not todo:
        return 0
    init_args = (str(out), str(manifest), config.to_dict())
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=init_args) as pool:
            for done in pool.map(_train_job, todo):
                log.info("run complete", extra={"run": done})
    else:
        _worker_init(*init_args)
        try:
            for job in todo:
                log.info("run complete", extra={"run": _train_job(job)})
        finally:
            _WORKER.clear()
    return len(todo)


def stage_evaluate(out: Path, config: TrainConfig, tasks: list[str], variants: list[str]) -> int:
    count = 0
    for task in tasks:
        for variant in variants:
            for fold_dir in sorted((out / "runs" / task / variant).glob("fold*")):
                pred_path = fold_dir / "predictions.json"
                if not pred_path.exists():
                    continue
                fold = int(fold_dir.name[len("fold"):])
                preds = PredictionSet(**json.loads(pred_path.read_text()))
                write_eval(fold_dir, task, variant, evaluate_predictions(preds, task, variant, fold, config))
                count += 1
    if count == 0:
        raise FileNotFoundError(f"no predictions under {out / 'runs'}; run `train` first")
    return count


def stage_report(out: Path) -> tuple[Path, Path]:
    if not (out / "runs").exists():
        raise FileNotFoundError(f"no runs directory under {out}")
    markdown, js = render_report(collect_report(out / "runs"))
    (out / "report.md").write_text(markdown)
    (out / "report.json").write_text(js)
    return out / "report.md", out / "report.json"


# -- argument parsing -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON file with training-config fields")
    p.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for training")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--task", action="append", help="task name, comma list or 'all' (repeatable)")
    p.add_argument("--variant", action="append", help="variant name, comma list or 'all' (repeatable)")
    p.add_argument("--out", default=os.environ.get("MMFUSE_OUT", "mmfuse_out"), help="output root")
    p.add_argument("--log-level", default="INFO")


def _synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patients", type=int, default=30)
    p.add_argument("--ct-strength", type=float, default=0.7)
    p.add_argument("--patho-strength", type=float, default=0.7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mmfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom cohort")
    _common(p)
    _synth_flags(p)

    for name, help_text in (("preprocess-ct", "CT volumes -> slice bags"), ("preprocess-wsi", "slides -> patch bags")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--manifest", help="manifest CSV (default: <out>/cohort/manifest.csv)")
        if name == "preprocess-ct":
            p.add_argument("--mask-dir", help="directory of <patient>_mask.nii[.gz]/.vol files; "
                                              "default is the intensity-threshold mask")

    p = sub.add_parser("train", help="three-fold training for the selected tasks and variants")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", help="AUC and bootstrap intervals for every trained fold")
    _common(p)

    p = sub.add_parser("report", help="aggregate evaluations into report.md and report.json")
    _common(p)

    p = sub.add_parser("run-all", help="synth, preprocess, train, evaluate and report; resumes where it stopped")
    _common(p)
    _synth_flags(p)
    p.add_argument("--epochs", type=int)
    return parser


def run(args: argparse.Namespace) -> int:
    out = Path(args.out)
    config = resolve_config(args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    tasks = _choices(args.task, TASKS, "task")
    variants = _choices(args.variant, VARIANTS, "variant")
    args.tasks_resolved, args.variants_resolved = tasks, variants
    if args.command in ("synth", "run-all") and args.patients < 3:
        raise ConfigError("--patients must be at least 3 (one per fold)")
    out.mkdir(parents=True, exist_ok=True)
    _record_invocation(out, args, config)

    if args.command == "synth":
        stage_synth(out, config, args.patients, args.ct_strength, args.patho_strength)
    elif args.command == "preprocess-ct":
        mask_dir = Path(args.mask_dir) if args.mask_dir else None
        if mask_dir is not None and not mask_dir.is_dir():
            raise FileNotFoundError(f"mask directory not found: {mask_dir}")
        stage_preprocess_ct(out, config, _manifest(out, args.manifest), mask_dir)
    elif args.command == "preprocess-wsi":
        stage_preprocess_wsi(out, config, _manifest(out, args.manifest))
    elif args.command == "train":
        stage_train(out, config, _manifest(out, args.manifest), tasks, variants, args.jobs)
    elif args.command == "evaluate":
        stage_evaluate(out, config, tasks, variants)
    elif args.command == "report":
        stage_report(out)
    elif args.command == "run-all":
        manifest = out / "cohort" / "manifest.csv"
        if not manifest.exists():
            stage_synth(out, config, args.patients, args.ct_strength, args.patho_strength)
        stage_preprocess_ct(out, config, manifest, out / "cohort" / "masks", resume=True)
        stage_preprocess_wsi(out, config, manifest, resume=True)
        stage_train(out, config, manifest, tasks, variants, args.jobs)
        stage_evaluate(out, config, tasks, variants)
        stage_report(out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure(getattr(logging, str(args.log_level).upper(), logging.INFO))
    try:
        return run(args)
    except ConfigError as exc:
        log.error("configuration error", extra={"detail": str(exc)})
        print(f"mmfuse: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure", extra={"detail": str(exc), "epoch": exc.epoch, "batch": list(exc.batch)})
        print(f"mmfuse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, LabelError, EmptyBagError, FileNotFoundError, ValueError) as exc:
        log.error("data error", extra={"detail": str(exc)})
        print(f"mmfuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
