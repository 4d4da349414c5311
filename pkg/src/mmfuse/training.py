"""Per-task, per-variant, per-fold training.

Seeds: every random stream is ``derive_seed(master, *path)``, the first 8
bytes of SHA-256 over the master seed and a path of labels, e.g.
``("head", task, variant, fold)``. Streams used: ``backbone`` (extractor
init, shared by every run so prefix activations can be cached), ``head``,
``val`` (validation carve-out, per fold), ``order`` (batch order, per
epoch) and ``subsample`` (bag subsampling, per epoch and patient).
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data_model import FoldSplit, num_classes
from .evaluation import PredictionSet, ovr_mean_auc
from .logutil import get_logger
from .models import MILModel, build_backbone, build_model, compute_loss, config_hash, instances_to_tensor, save_checkpoint

log = get_logger("training")


class DataError(RuntimeError):
    """Cohort cannot support the requested run (e.g. a class emptied by exclusions)."""


class NumericalError(RuntimeError):
    """Non-finite loss; carries the offending batch."""

    def __init__(self, message: str, batch: Sequence[str], epoch: int):
        super().__init__(message)
        self.batch = list(batch)
        self.epoch = epoch

    def __reduce__(self):
        # keeps the extra fields when raised inside a worker process
        return type(self), (str(self), self.batch, self.epoch)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 4
    weight_decay: float = 0.01
    seed: int = 0
    max_instances_per_bag: int = 256
    full_bag: bool = False
    val_fraction: float = 0.2
    backbone: str = "resnet18"
    init: str = "pretrained"
    keep_all_checkpoints: bool = False
    bootstrap_iters: int = 1000
    standardize_features: bool = False
    tie_break: str = "earlier"

    def __post_init__(self):
        if self.tie_break not in ("earlier", "val_loss"):
            raise ValueError(f"tie_break must be 'earlier' or 'val_loss', got {self.tie_break!r}")
        if self.optimizer != "adam":
            raise ValueError(f"only the Adam optimizer is supported, got {self.optimizer!r}")
        for name in ("learning_rate", "epochs", "batch_size", "max_instances_per_bag", "bootstrap_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    def hash(self) -> str:
        return config_hash(self.to_dict())


PROFILES = {
    "paper": {},
    "desk": {
        "backbone": "stub",
        "init": "random",
        "max_instances_per_bag": 16,
        "standardize_features": True,
        "tie_break": "val_loss",
        "learning_rate": 3e-4,
    },
}


def profile_config(profile: str, **overrides) -> TrainConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[profile], **overrides})


def derive_seed(master: int, *path) -> int:
    text = json.dumps([int(master), *[str(p) for p in path]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") & (2**63 - 1)


# -- bags and cached prefix activations ------------------------------------------------------


@dataclass
class PatientBags:
    patient_id: str
    labels: dict[str, int]
    ct: list[np.ndarray] = field(default_factory=list)
    ct_keys: list[int] = field(default_factory=list)
    patho: list[np.ndarray] = field(default_factory=list)
    patho_keys: list[int] = field(default_factory=list)

    def size(self, modality: str) -> int:
        return len(self.ct if modality == "ct" else self.patho)


class FeatureCache:
    """Frozen-prefix activations per patient and modality, in ascending instance-key order."""

    def __init__(self, bags: Iterable[PatientBags], backbone: str, init: str, backbone_seed: int, chunk: int = 64):
        self.signature = (backbone, init, backbone_seed)
        net = build_backbone(backbone, init, backbone_seed)
        self.data: dict[str, dict[str, torch.Tensor]] = {"ct": {}, "patho": {}}
        with torch.no_grad():
            for bag in bags:
                for m, inst, keys in (("ct", bag.ct, bag.ct_keys), ("patho", bag.patho, bag.patho_keys)):
                    order = sorted(range(len(inst)), key=lambda i: keys[i]) if keys else range(len(inst))
                    ordered = [inst[i] for i in order]
                    parts = [
                        net.forward_prefix(instances_to_tensor(ordered[i : i + chunk]))
                        for i in range(0, len(ordered), chunk)
                    ]
                    self.data[m][bag.patient_id] = torch.cat(parts) if parts else None

    def get(self, modality: str, patient_id: str) -> torch.Tensor | None:
        return self.data[modality].get(patient_id)


def subsample_indices(n: int, cap: int, seed: int) -> np.ndarray:
    """Sorted indices of a uniform without-replacement sample of size ``min(n, cap)``."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))


def subsample_bag(bag: Sequence, cap: int, seed: int) -> list:
    return [bag[i] for i in subsample_indices(len(bag), cap, seed)]


# -- runs -----------------------------------------------------------------------------------


@dataclass
class TrainRun:
    task: str
    variant: str
    fold_index: int
    trace: list[dict]
    selected_epoch: int
    checkpoint_ref: str | None
    predictions: PredictionSet
    fit_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    excluded: list[str]
    state: dict | None = None


def required_modalities(variant: str) -> tuple[str, ...]:
    if variant == "ct_only":
        return ("ct",)
    if variant == "patho_only":
        return ("patho",)
    if variant.startswith("late"):
        return ("ct", "patho")
    return ()


def usable(bag: PatientBags, variant: str) -> bool:
    req = required_modalities(variant)
    if req:
        return all(bag.size(m) > 0 for m in req)
    return bag.size("ct") + bag.size("patho") > 0


def _prefix(cache: FeatureCache, model: MILModel, modality: str, pid: str, cap: int | None, seed: int | None):
    if modality not in model.modalities:
        return None
    h = cache.get(modality, pid)
    if h is None or cap is None or h.shape[0] <= cap:
        return h
    return h[torch.as_tensor(subsample_indices(h.shape[0], cap, seed))]


def predict(model: MILModel, cache: FeatureCache, bags: Sequence[PatientBags], task: str) -> PredictionSet:
    ids, labels, probs = [], [], []
    with torch.no_grad():
        for bag in bags:
            out = model.forward_cached(
                _prefix(cache, model, "ct", bag.patient_id, None, None),
                _prefix(cache, model, "patho", bag.patient_id, None, None),
            )
            p = torch.softmax(out.joint.double(), dim=-1)
            ids.append(bag.patient_id)
            labels.append(bag.labels[task])
            probs.append([float(v) for v in p])
    return PredictionSet(ids, labels, probs)


def _split_validation(train_ids: list[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    if fraction <= 0 or len(train_ids) < 2:
        return list(train_ids), []
    ids = sorted(train_ids)
    n_val = min(len(ids) - 1, max(1, round(fraction * len(ids))))
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    fit = sorted(ids[i] for i in order[n_val:])
    return fit, val


def train_fold(
    bags: Sequence[PatientBags],
    task: str,
    variant: str,
    split: FoldSplit,
    fold_index: int,
    config: TrainConfig,
    cache: FeatureCache | None = None,
    out_dir: str | Path | None = None,
) -> TrainRun:
    """Train on two folds (minus a validation carve-out), select an epoch on validation AUC, predict the third."""
    by_id = {b.patient_id: b for b in bags}
    train_ids, test_ids = split.train_test(fold_index)
    missing = [pid for pid in train_ids + test_ids if pid not in by_id]
    if missing:
        raise DataError(f"no preprocessed bags for patients {missing}")
    excluded = [pid for pid in train_ids + test_ids if not usable(by_id[pid], variant)]
    for pid in excluded:
        log.warning("patient excluded: empty required bag",
                    extra={"patient_id": pid, "variant": variant, "task": task, "fold": fold_index})
    train_ids = [pid for pid in train_ids if pid not in excluded]
    test_ids = [pid for pid in test_ids if pid not in excluded]
    k = num_classes(task)
    present = {by_id[pid].labels[task] for pid in train_ids}
    if present != set(range(k)):
        raise DataError(f"{task}/{variant}/fold{fold_index}: training classes {sorted(present)} after exclusions; need all of 0..{k - 1}")

    master = config.seed
    fit_ids, val_ids = _split_validation(train_ids, config.val_fraction, derive_seed(master, "val", fold_index))
    assert not (set(fit_ids) | set(val_ids)) & set(test_ids), "test patients leaked into training"
    log.info("fold partition", extra={"task": task, "variant": variant, "fold": fold_index,
                                       "fit": len(fit_ids), "val": len(val_ids), "test": len(test_ids)})

    backbone_seed = derive_seed(master, "backbone")
    if cache is None:
        cache = FeatureCache([by_id[p] for p in fit_ids + val_ids + test_ids], config.backbone, config.init, backbone_seed)
    elif cache.signature != (config.backbone, config.init, backbone_seed):
        raise ValueError(f"feature cache built for {cache.signature}, run needs {(config.backbone, config.init, backbone_seed)}")

    model = build_model(variant, k, config.backbone, config.init, backbone_seed,
                        derive_seed(master, "head", task, variant, fold_index))
    if config.standardize_features:
        calibrate_norms(model, cache, fit_ids)
    optim = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    cap = None if config.full_bag else config.max_instances_per_bag
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    trace, best_state, best_key, selected = [], None, None, 1
    loss_state, loss_key, loss_epoch = None, None, 1
    for epoch in range(1, config.epochs + 1):
        model.train()
        order_rng = np.random.default_rng(derive_seed(master, "order", task, variant, fold_index, epoch))
        order = [fit_ids[i] for i in order_rng.permutation(len(fit_ids))]
        sums = {"l_total": 0.0, "l_joint": 0.0}
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            seeds = [derive_seed(master, "subsample", task, variant, fold_index, epoch, pid) for pid in batch]
            outs = model.forward_cached_batch(
                [_prefix(cache, model, "ct", pid, cap, s) for pid, s in zip(batch, seeds)],
                [_prefix(cache, model, "patho", pid, cap, s) for pid, s in zip(batch, seeds)],
            )
            reports = [compute_loss(variant, by_id[pid].labels[task], o) for pid, o in zip(batch, outs)]
            loss = torch.stack([r.l_total for r in reports]).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {batch}", batch, epoch)
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            sums["l_total"] += float(loss.detach()) * len(batch)
            sums["l_joint"] += float(torch.stack([r.l_joint for r in reports]).mean().detach()) * len(batch)
        model.eval()
        row = {"epoch": epoch, "train_loss": sums["l_total"] / len(order), "train_joint_loss": sums["l_joint"] / len(order)}
        if val_ids:
            preds = predict(model, cache, [by_id[p] for p in val_ids], task)
            probs = np.asarray(preds.probs)
            row["val_loss"] = float(np.mean([-math.log(max(p[y], 1e-300)) for p, y in zip(probs, preds.labels)]))
            auc = ovr_mean_auc(probs, preds.labels, k).mean
            row["val_auc"] = None if math.isnan(auc) else auc
        trace.append(row)
        if out is not None:
            with open(out / "trace.jsonl", "a" if epoch > 1 else "w") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if config.keep_all_checkpoints:
                save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", model, _header(task, variant, epoch, config))
        key = _selection_key(row, config.tie_break)
        if best_key is None or key > best_key:
            best_key, selected = key, epoch
            best_state = copy.deepcopy(model.state_dict())
        if val_ids and (loss_key is None or row["val_loss"] < loss_key):
            loss_key, loss_epoch = row["val_loss"], epoch
            loss_state = copy.deepcopy(model.state_dict())

    if val_ids and all(r.get("val_auc") is None for r in trace):
        # validation AUC undefined throughout: fall back to lowest validation loss
        selected, best_state = loss_epoch, loss_state
        log.warning("validation AUC undefined in every epoch; selecting on validation loss",
                    extra={"task": task, "variant": variant, "fold": fold_index, "epoch": selected})
    if not val_ids:
        selected, best_state = config.epochs, None
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    predictions = predict(model, cache, [by_id[p] for p in test_ids], task)

    ckpt_ref = None
    if out is not None:
        ckpt = out / "model.ckpt"
        save_checkpoint(ckpt, model, _header(task, variant, selected, config))
        ckpt_ref = str(ckpt)
        (out / "predictions.json").write_text(json.dumps(predictions.to_dict(), indent=2) + "\n")
        (out / "run.json").write_text(json.dumps({
            "task": task, "variant": variant, "fold": fold_index, "selected_epoch": selected,
            "fit_ids": fit_ids, "val_ids": val_ids, "test_ids": test_ids, "excluded": excluded,
            "config": config.to_dict(), "train_config_hash": config.hash(),
        }, indent=2, sort_keys=True) + "\n")
    return TrainRun(task, variant, fold_index, trace, selected, ckpt_ref, predictions, fit_ids, val_ids,
                    test_ids, excluded, model.state_dict())


def calibrate_norms(model: MILModel, cache: FeatureCache, patient_ids: Sequence[str]) -> None:
    """Set each modality's feature standardization from the initial suffix outputs on ``patient_ids``."""
    with torch.no_grad():
        for m in model.modalities:
            parts = [cache.get(m, pid) for pid in patient_ids]
            parts = [h for h in parts if h is not None and h.shape[0] > 0]
            if len(parts) < 1 or sum(h.shape[0] for h in parts) < 2:
                continue
            feats = torch.cat([model.extractors[m].forward_suffix(h) for h in parts])
            model.norms[m].calibrate(feats)


def _selection_key(row: dict, tie_break: str = "earlier") -> tuple:
    """Higher is better; strict improvement required, so full ties keep the earlier epoch.

    With ``tie_break="val_loss"`` epochs sharing a validation AUC are ranked by lower validation loss.
    """
    auc = row.get("val_auc")
    key = (-math.inf if auc is None else auc,)
    if tie_break == "val_loss":
        key += (-row.get("val_loss", math.inf),)
    return key


def _header(task: str, variant: str, epoch: int, config: TrainConfig) -> dict:
    return {"variant": variant, "task": task, "epoch": epoch, "seed": config.seed, "train_config_hash": config.hash()}
