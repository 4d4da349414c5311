"""One-vs-rest AUC, patient-level bootstrap intervals, cross-fold aggregation and reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data_model import TASKS
from .logutil import get_logger
from .models import VARIANTS, VARIANT_LABELS

log = get_logger("evaluation")

TASK_LABELS = {"fibrosis": "Fibrosis", "steatosis": "NAS steatosis", "lobular": "NAS lobular", "ballooning": "NAS ballooning"}
MAX_REDRAWS = 10


def binary_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC, ties counted as one half. NaN when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    # doubled mid-ranks are integers, so the numerator is exact
    twice_ranks = np.rint(2.0 * rankdata(scores)).astype(np.int64)
    twice_u = int(twice_ranks[labels].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


@dataclass
class OvrResult:
    per_class: list[float | None]
    mean: float
    skipped: list[int] = field(default_factory=list)


def ovr_mean_auc(probs: np.ndarray, labels: Sequence[int], num_classes: int) -> OvrResult:
    """Per-class one-vs-rest AUC averaged over classes with both groups present.

    A two-class task yields the single AUC of the class-1 probability.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if num_classes not in (2, 3):
        raise ValueError(f"num_classes must be 2 or 3, got {num_classes}")
    if num_classes == 2:
        auc = binary_auc(probs[:, 1], labels == 1)
        if math.isnan(auc):
            return OvrResult([None], math.nan, [0, 1])
        return OvrResult([auc], auc)
    per_class, skipped = [], []
    for k in range(num_classes):
        auc = binary_auc(probs[:, k], labels == k)
        if math.isnan(auc):
            per_class.append(None)
            skipped.append(k)
        else:
            per_class.append(auc)
    valid = [a for a in per_class if a is not None]
    return OvrResult(per_class, float(np.mean(valid)) if valid else math.nan, skipped)


def bootstrap_replicates(
    probs: np.ndarray, labels: Sequence[int], num_classes: int, iters: int = 1000, seed: int = 0
) -> tuple[np.ndarray, int]:
    """Mean-AUC replicates over patients resampled with replacement.

    Replicate ``i`` draws from ``np.random.default_rng([seed, i])``; an
    undefined replicate is redrawn from the same stream up to ``MAX_REDRAWS``
    times, then skipped. Returns the replicate values and the skip count.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n = labels.size
    values, skipped = [], 0
    for i in range(iters):
        rng = np.random.default_rng([seed, i])
        for _ in range(MAX_REDRAWS):
            idx = rng.integers(0, n, size=n)
            res = ovr_mean_auc(probs[idx], labels[idx], num_classes)
            if not math.isnan(res.mean):
                values.append(res.mean)
                break
        else:
            skipped += 1
    return np.asarray(values), skipped


def bootstrap_ci(
    probs: np.ndarray,
    labels: Sequence[int],
    num_classes: int,
    iters: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> tuple[float, float, int]:
    """Percentile interval (lower, upper) and number of skipped replicates."""
    labels = np.asarray(labels)
    if labels.size < 2:
        raise ValueError("bootstrap needs at least 2 patients")
    if np.unique(labels).size < 2:
        return math.nan, math.nan, iters
    values, skipped = bootstrap_replicates(probs, labels, num_classes, iters, seed)
    if skipped:
        log.warning("bootstrap replicates skipped", extra={"skipped": skipped, "iters": iters})
    if values.size == 0:
        return math.nan, math.nan, skipped
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi), skipped


# -- predictions and reports ------------------------------------------------------------


@dataclass
class PredictionSet:
    patient_ids: list[str]
    labels: list[int]
    probs: list[list[float]]

    def __post_init__(self):
        if not (len(self.patient_ids) == len(self.labels) == len(self.probs)):
            raise ValueError("patient_ids, labels and probs must have equal length")
        for pid, p in zip(self.patient_ids, self.probs):
            if abs(sum(p) - 1.0) > 1e-6:
                raise ValueError(f"probabilities for {pid} sum to {sum(p)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FoldResult:
    fold: int
    n_patients: int
    mean_auc: float | None
    per_class_auc: list[float | None]
    ci: tuple[float | None, float | None]
    skipped_classes: list[int] = field(default_factory=list)
    bootstrap_skipped: int = 0


def _clean(x: float) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def evaluate_fold(
    predictions: PredictionSet, num_classes: int, fold: int, iters: int = 1000, alpha: float = 0.05, seed: int = 0
) -> FoldResult:
    probs = np.asarray(predictions.probs)
    labels = np.asarray(predictions.labels)
    res = ovr_mean_auc(probs, labels, num_classes)
    if res.skipped:
        log.warning("classes absent from fold; skipped", extra={"fold": fold, "classes": res.skipped})
    if labels.size >= 2:
        lo, hi, skipped = bootstrap_ci(probs, labels, num_classes, iters, alpha, seed)
    else:
        lo, hi, skipped = math.nan, math.nan, 0
    return FoldResult(fold, int(labels.size), _clean(res.mean), [_clean(a) for a in res.per_class],
                      (_clean(lo), _clean(hi)), res.skipped, skipped)


@dataclass
class CellReport:
    task: str
    variant: str
    folds: list[FoldResult]
    mean: float | None
    std: float | None
    partial: bool


def aggregate_folds(task: str, variant: str, folds: Sequence[FoldResult], n_folds: int = 3) -> CellReport:
    """Cross-fold mean and population standard deviation of the fold mean AUCs."""
    folds = sorted(folds, key=lambda f: f.fold)
    values = [f.mean_auc for f in folds if f.mean_auc is not None]
    partial = len(values) < n_folds
    if partial:
        log.warning("partial aggregate", extra={"task": task, "variant": variant, "folds": len(values)})
    mean = float(np.mean(values)) if values else None
    std = float(np.std(values)) if values else None
    return CellReport(task, variant, list(folds), mean, std, partial)


@dataclass
class EvalReport:
    cells: list[CellReport] = field(default_factory=list)

    def cell(self, task: str, variant: str) -> CellReport | None:
        for c in self.cells:
            if c.task == task and c.variant == variant:
                return c
        return None

    @property
    def tasks(self) -> list[str]:
        present = {c.task for c in self.cells}
        return [t for t in TASKS if t in present]

    @property
    def variants(self) -> list[str]:
        present = {c.variant for c in self.cells}
        return [v for v in VARIANTS if v in present]

    def to_dict(self) -> dict:
        cells = sorted(self.cells, key=lambda c: (TASKS.index(c.task), VARIANTS.index(c.variant)))
        out = []
        for c in cells:
            d = asdict(c)
            for f in d["folds"]:
                f["ci"] = list(f["ci"])
            out.append(d)
        return {"tasks": self.tasks, "variants": self.variants, "cells": out}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        cells = []
        for c in data["cells"]:
            folds = [FoldResult(**{**f, "ci": tuple(f["ci"])}) for f in c["folds"]]
            cells.append(CellReport(c["task"], c["variant"], folds, c["mean"], c["std"], c["partial"]))
        return cls(cells)


def _fmt(cell: CellReport | None) -> str:
    if cell is None or cell.mean is None:
        return "n/a"
    text = f"{100 * cell.mean:.2f}±{100 * cell.std:.2f}"
    return text + "*" if cell.partial else text


def render_markdown(report: EvalReport) -> str:
    """Rows are variants, columns tasks; cells are cross-fold mean±std AUC in percent (``*`` marks partial)."""
    tasks = report.tasks
    lines = [
        "| " + " | ".join(["Method"] + [TASK_LABELS[t] for t in tasks]) + " |",
        "|" + "---|" * (len(tasks) + 1),
    ]
    for v in report.variants:
        lines.append("| " + " | ".join([VARIANT_LABELS[v]] + [_fmt(report.cell(t, v)) for t in tasks]) + " |")
    return "\n".join(lines) + "\n"


def parse_markdown(text: str) -> dict[tuple[str, str], tuple[float, float] | None]:
    """Inverse of ``render_markdown``: {(task, variant): (mean%, std%)}."""
    rows = [ln.strip().strip("|").split("|") for ln in text.strip().splitlines()]
    header = [h.strip() for h in rows[0]]
    task_by_label = {v: k for k, v in TASK_LABELS.items()}
    variant_by_label = {v: k for k, v in VARIANT_LABELS.items()}
    tasks = [task_by_label[h] for h in header[1:]]
    out = {}
    for row in rows[2:]:
        cells = [c.strip() for c in row]
        variant = variant_by_label[cells[0]]
        for task, cell in zip(tasks, cells[1:]):
            if cell == "n/a":
                out[(task, variant)] = None
            else:
                mean, std = cell.rstrip("*").split("±")
                out[(task, variant)] = (float(mean), float(std))
    return out


def render_report(report: EvalReport) -> tuple[str, str]:
    return render_markdown(report), report.to_json()
