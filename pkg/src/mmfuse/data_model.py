"""Cohort schema, label schemes and fold splitting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TASKS = ("fibrosis", "steatosis", "lobular", "ballooning")
MANIFEST_HEADER = ("patient_id", "ct_path", "wsi_path", "fibrosis", "steatosis", "lobular", "ballooning")
NUM_FOLDS = 3


class LabelError(ValueError):
    """Raw score outside the declared domain of its task."""


@dataclass(frozen=True)
class LabelScheme:
    task: str
    mapping: dict[Decimal, int]

    @property
    def num_classes(self) -> int:
        return len(set(self.mapping.values()))

    @property
    def raw_domain(self) -> tuple[Decimal, ...]:
        return tuple(sorted(self.mapping))

    def groups(self) -> list[list[Decimal]]:
        """Raw scores merged into each combined class, in class order."""
        out: list[list[Decimal]] = [[] for _ in range(self.num_classes)]
        for raw in self.raw_domain:
            out[self.mapping[raw]].append(raw)
        return out


def _scheme(task: str, groups: Sequence[Sequence[str]]) -> LabelScheme:
    mapping = {Decimal(raw): cls for cls, group in enumerate(groups) for raw in group}
    return LabelScheme(task, mapping)


LABEL_SCHEMES: dict[str, LabelScheme] = {
    "fibrosis": _scheme("fibrosis", [["0"], ["1", "2"], ["3", "3.5", "4"]]),
    "steatosis": _scheme("steatosis", [["0", "1"], ["2", "3"]]),
    "lobular": _scheme("lobular", [["0"], ["1"], ["2", "3"]]),
    "ballooning": _scheme("ballooning", [["0"], ["1"], ["2"]]),
}


def num_classes(task: str) -> int:
    return label_scheme(task).num_classes


def label_scheme(task: str) -> LabelScheme:
    try:
        return LABEL_SCHEMES[task]
    except KeyError:
        raise LabelError(f"unknown task {task!r}; expected one of {TASKS}") from None


def to_raw(value) -> Decimal:
    """Exact decimal for a raw score; floats go through ``str`` so 3.5 stays 3.5."""
    if isinstance(value, Decimal):
        return value
    if isinstance(value, float):
        value = repr(value)
    try:
        return Decimal(str(value).strip())
    except InvalidOperation:
        raise LabelError(f"raw score {value!r} is not a number") from None


def map_raw_to_class(task: str, raw) -> int:
    scheme = label_scheme(task)
    key = to_raw(raw)
    for candidate, cls in scheme.mapping.items():
        if candidate == key:
            return cls
    domain = ", ".join(str(r) for r in scheme.raw_domain)
    raise LabelError(f"{task}: raw score {raw!r} outside domain {{{domain}}}")


@dataclass(frozen=True)
class StudyRecord:
    patient_id: str
    ct_ref: str
    wsi_ref: str
    fibrosis_raw: Decimal
    steatosis_raw: Decimal
    lobular_raw: Decimal
    ballooning_raw: Decimal

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        for task in TASKS:
            object.__setattr__(self, f"{task}_raw", to_raw(getattr(self, f"{task}_raw")))
            map_raw_to_class(task, getattr(self, f"{task}_raw"))

    def raw(self, task: str) -> Decimal:
        return getattr(self, f"{task}_raw")

    def label(self, task: str) -> int:
        return map_raw_to_class(task, self.raw(task))

    def labels(self) -> dict[str, int]:
        return {task: self.label(task) for task in TASKS}


def combined_distribution(records: Iterable[StudyRecord], task: str) -> tuple[int, ...]:
    counts = [0] * num_classes(task)
    for rec in records:
        counts[rec.label(task)] += 1
    return tuple(counts)


def original_distribution(records: Iterable[StudyRecord], task: str) -> tuple[int, ...]:
    domain = label_scheme(task).raw_domain
    counts = dict.fromkeys(domain, 0)
    for rec in records:
        counts[rec.raw(task)] += 1
    return tuple(counts[r] for r in domain)


def cohort_from_original_counts(counts: dict[str, Sequence[int]]) -> list[StudyRecord]:
    """Records whose per-task raw score histograms equal ``counts``.

    Each task's raw scores are laid out in domain order, so the pairing
    across tasks is arbitrary; only the marginal histograms are meaningful.
    """
    n = {sum(c) for c in counts.values()}
    if len(n) != 1:
        raise ValueError(f"per-task counts disagree on cohort size: {sorted(n)}")
    size = n.pop()
    raws: dict[str, list[Decimal]] = {}
    for task in TASKS:
        domain = label_scheme(task).raw_domain
        task_counts = counts[task]
        if len(task_counts) != len(domain):
            raise ValueError(f"{task}: expected {len(domain)} counts, got {len(task_counts)}")
        raws[task] = [r for r, c in zip(domain, task_counts) for _ in range(c)]
    return [
        StudyRecord(
            patient_id=f"P{i:03d}",
            ct_ref="",
            wsi_ref="",
            **{f"{task}_raw": raws[task][i] for task in TASKS},
        )
        for i in range(size)
    ]


# -- manifest -----------------------------------------------------------------


def read_manifest(path: str | Path) -> list[StudyRecord]:
    path = Path(path)
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ValueError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            pid = row["patient_id"]
            if pid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
            seen.add(pid)
            try:
                records.append(
                    StudyRecord(
                        patient_id=pid,
                        ct_ref=row["ct_path"],
                        wsi_ref=row["wsi_path"],
                        **{f"{task}_raw": row[task] for task in TASKS},
                    )
                )
            except LabelError as exc:
                raise LabelError(f"{path}:{lineno} (patient {pid}): {exc}") from None
    return records


def write_manifest(records: Iterable[StudyRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in records:
            writer.writerow(
                [rec.patient_id, rec.ct_ref, rec.wsi_ref] + [str(rec.raw(task)) for task in TASKS]
            )


# -- folds --------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    seed: int
    folds: tuple[tuple[str, ...], ...]

    def train_test(self, fold_index: int) -> tuple[list[str], list[str]]:
        if not 0 <= fold_index < len(self.folds):
            raise IndexError(f"fold_index {fold_index} out of range for {len(self.folds)} folds")
        test = list(self.folds[fold_index])
        train = [pid for k, fold in enumerate(self.folds) if k != fold_index for pid in fold]
        return train, test

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "folds": [list(f) for f in self.folds]})

    @classmethod
    def from_json(cls, text: str) -> "FoldSplit":
        data = json.loads(text)
        return cls(seed=int(data["seed"]), folds=tuple(tuple(f) for f in data["folds"]))


def make_folds(patient_ids: Sequence[str], seed: int, n_folds: int = NUM_FOLDS) -> FoldSplit:
    """Uniform random, unstratified split into ``n_folds`` near-equal folds."""
    ids = sorted(patient_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} patients for {n_folds}-fold split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, n_folds)
    return FoldSplit(seed=seed, folds=tuple(tuple(ids[i] for i in chunk) for chunk in chunks))
