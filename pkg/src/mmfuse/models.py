"""Bag classifiers: the single-modality baseline and the four CT+pathology joint networks.

Every backbone is split into a frozen ``prefix`` and a trainable ``suffix``
(the last residual block plus global pooling), so prefix activations can be
cached once per instance and reused across epochs.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet18
from torchvision.models.resnet import BasicBlock

from .logutil import get_logger

log = get_logger("models")

FEATURE_DIM = 512
GLOBAL_DIM = 128
VARIANTS = ("ct_only", "patho_only", "mid_single", "mid_multi", "late_single", "late_multi")
VARIANT_LABELS = {
    "ct_only": "CT",
    "patho_only": "H&E",
    "mid_single": "Mid-single",
    "mid_multi": "Mid-multi",
    "late_single": "Late-single",
    "late_multi": "Late-multi",
}
MODALITIES = ("ct", "patho")
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class EmptyBagError(ValueError):
    pass


# -- backbones ------------------------------------------------------------------


class Backbone(nn.Module):
    """Frozen prefix followed by a trainable suffix emitting one 512-d feature per instance.

    Batch-norm statistics stay in inference mode throughout, so each
    instance's feature depends on that instance alone.
    """

    prefix: nn.Module
    suffix: nn.Module

    def __init__(self):
        super().__init__()
        self.register_buffer("pixel_mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def _freeze_prefix(self):
        for p in self.prefix.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.pixel_mean) / self.pixel_std

    def forward_prefix(self, x: torch.Tensor) -> torch.Tensor:
        return self.prefix(self.normalize(x))

    def forward_suffix(self, h: torch.Tensor) -> torch.Tensor:
        return self.suffix(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_suffix(self.forward_prefix(x))

    def trainable_parameters(self):
        return [p for p in self.suffix.parameters()]


class ResNet18Backbone(Backbone):
    """ResNet-18 without its fc layer; only ``layer4`` is trainable."""

    def __init__(self, pretrained: bool = True):
        super().__init__()
        net = resnet18(weights=None)
        if pretrained:
            try:
                from torchvision.models import ResNet18_Weights

                net.load_state_dict(ResNet18_Weights.IMAGENET1K_V1.get_state_dict(progress=False))
            except Exception as exc:  # offline or missing cache
                log.warning("pretrained ResNet-18 weights unavailable; using random init", extra={"error": str(exc)})
        self.prefix = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3
        )
        self.suffix = nn.Sequential(net.layer4, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self._freeze_prefix()


class StubBackbone(Backbone):
    """Two residual blocks; the second is the trainable "last block".

    The pooled 32-channel output is lifted to 512 dims by a linear layer that
    belongs to the trainable suffix, so the feature contract matches ResNet-18.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        self.prefix = nn.Sequential(
            nn.Conv2d(3, width, kernel_size=7, stride=4, padding=3, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            BasicBlock(width, width),
        )
        down = nn.Sequential(nn.Conv2d(width, 2 * width, 1, stride=2, bias=False), nn.BatchNorm2d(2 * width))
        self.suffix = nn.Sequential(
            BasicBlock(width, 2 * width, stride=2, downsample=down),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(2 * width, FEATURE_DIM),
        )
        self._freeze_prefix()


def build_backbone(name: str = "resnet18", init: str = "pretrained", seed: int = 0) -> Backbone:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if name == "resnet18":
            return ResNet18Backbone(pretrained=(init == "pretrained"))
        if name == "stub":
            return StubBackbone()
    raise ValueError(f"unknown backbone {name!r}; expected 'resnet18' or 'stub'")


# -- heads ----------------------------------------------------------------------


class BaselineHead(nn.Module):
    """fc 512->512, fc 512->128 per instance, mean pool, fc 128->K."""

    def __init__(self, num_classes: int, in_dim: int = FEATURE_DIM):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, 512)
        self.fc2 = nn.Linear(512, GLOBAL_DIM)
        self.fc_out = nn.Linear(GLOBAL_DIM, num_classes)

    def local(self, features: torch.Tensor) -> torch.Tensor:
        return F.relu(self.fc2(F.relu(self.fc1(features))))

    def pool(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[0] == 0:
            raise EmptyBagError("cannot pool an empty bag")
        return self.local(features).mean(dim=0)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc_out(self.pool(features))


class FeatureNorm(nn.Module):
    """Fixed per-dimension standardization of local features.

    Identity until ``calibrate`` is called; the statistics are buffers, never
    optimized.
    """

    def __init__(self, dim: int = FEATURE_DIM):
        super().__init__()
        self.register_buffer("shift", torch.zeros(dim))
        self.register_buffer("scale", torch.ones(dim))

    @torch.no_grad()
    def calibrate(self, features: torch.Tensor, eps: float = 1e-6) -> None:
        self.shift.copy_(features.mean(dim=0))
        self.scale.copy_(features.std(dim=0) + eps)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return (features - self.shift) / self.scale


@dataclass
class ModelOutput:
    joint: torch.Tensor
    ct: torch.Tensor | None = None
    patho: torch.Tensor | None = None


class MILModel(nn.Module):
    """One of the six variants for one task.

    ``forward_features`` takes per-modality 512-d instance features (already
    ordered); the ``forward_*`` helpers below handle images or cached prefix
    activations.
    """

    def __init__(self, kind: str, num_classes: int, backbone: str = "resnet18", init: str = "pretrained",
                 backbone_seed: int = 0, head_seed: int = 0):
        super().__init__()
        if kind not in VARIANTS:
            raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
        self.kind = kind
        self.num_classes = num_classes
        self.extractors = nn.ModuleDict()
        for m in self.modalities:
            # both extractors start from the same weights, like a shared pretrained init
            self.extractors[m] = build_backbone(backbone, init, backbone_seed)
        self.norms = nn.ModuleDict({m: FeatureNorm() for m in self.modalities})
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(head_seed)
            self.heads = nn.ModuleDict({m: BaselineHead(num_classes) for m in self.modalities})
            if self.fusion == "mid":
                self.joint = BaselineHead(num_classes)
            elif self.fusion == "late":
                self.joint = nn.Linear(2 * GLOBAL_DIM, num_classes)
            else:
                self.joint = None

    @property
    def modalities(self) -> tuple[str, ...]:
        if self.kind == "ct_only":
            return ("ct",)
        if self.kind == "patho_only":
            return ("patho",)
        return MODALITIES

    @property
    def fusion(self) -> str | None:
        return self.kind.split("_")[0] if self.kind.startswith(("mid", "late")) else None

    @property
    def multi_loss(self) -> bool:
        return self.kind.endswith("_multi")

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = []
        for ext in self.extractors.values():
            params += ext.trainable_parameters()
        params += list(self.heads.parameters())
        if self.joint is not None:
            params += list(self.joint.parameters())
        return params

    def frozen_parameter_names(self) -> list[str]:
        trainable = {id(p) for p in self.trainable_parameters()}
        return [name for name, p in self.named_parameters() if id(p) not in trainable]

    def forward_features(self, ct: torch.Tensor | None, patho: torch.Tensor | None) -> ModelOutput:
        feats = {"ct": ct, "patho": patho}
        present = {
            m: self.norms[m](f) for m, f in feats.items() if m in self.modalities and f is not None and f.shape[0] > 0
        }
        if self.fusion is None:
            (m,) = self.modalities
            if m not in present:
                raise EmptyBagError(f"{self.kind}: {m} bag is empty")
            logits = self.heads[m](present[m])
            return ModelOutput(joint=logits, **{m: logits})
        if self.fusion == "mid":
            if not present:
                raise EmptyBagError(f"{self.kind}: both bags are empty")
            union = torch.cat([present[m] for m in MODALITIES if m in present], dim=0)
            joint = self.joint(union)
            branch = {m: self.heads[m](f) for m, f in present.items()}
            return ModelOutput(joint=joint, **branch)
        missing = [m for m in MODALITIES if m not in present]
        if missing:
            raise EmptyBagError(f"{self.kind}: late fusion needs both bags; empty: {missing}")
        globals_ = {m: self.heads[m].pool(present[m]) for m in MODALITIES}
        joint = self.joint(torch.cat([globals_["ct"], globals_["patho"]]))
        return ModelOutput(
            joint=joint, ct=self.heads["ct"].fc_out(globals_["ct"]), patho=self.heads["patho"].fc_out(globals_["patho"])
        )

    def extract(self, modality: str, images: torch.Tensor | None) -> torch.Tensor | None:
        if images is None or modality not in self.modalities:
            return None
        if images.shape[0] == 0:
            return images.new_zeros((0, FEATURE_DIM))
        return self.extractors[modality](images)

    def forward(self, ct_images: torch.Tensor | None = None, patho_images: torch.Tensor | None = None) -> ModelOutput:
        return self.forward_features(self.extract("ct", ct_images), self.extract("patho", patho_images))

    def forward_cached(self, ct_prefix: torch.Tensor | None, patho_prefix: torch.Tensor | None) -> ModelOutput:
        feats = []
        for m, h in (("ct", ct_prefix), ("patho", patho_prefix)):
            if h is None or m not in self.modalities:
                feats.append(None)
            elif h.shape[0] == 0:
                feats.append(h.new_zeros((0, FEATURE_DIM)))
            else:
                feats.append(self.extractors[m].forward_suffix(h))
        return self.forward_features(*feats)

    def forward_cached_batch(
        self, ct_prefix: Sequence[torch.Tensor | None], patho_prefix: Sequence[torch.Tensor | None]
    ) -> list[ModelOutput]:
        """Several patients at once: one suffix pass per modality over the concatenated instances."""
        per_mod = {}
        for m, bags in (("ct", ct_prefix), ("patho", patho_prefix)):
            if m not in self.modalities:
                per_mod[m] = [None] * len(bags)
                continue
            sizes = [0 if b is None else b.shape[0] for b in bags]
            nonempty = [b for b in bags if b is not None and b.shape[0] > 0]
            if not nonempty:
                per_mod[m] = [None if b is None else b.new_zeros((0, FEATURE_DIM)) for b in bags]
                continue
            feats = self.extractors[m].forward_suffix(torch.cat(nonempty, dim=0))
            split = list(torch.split(feats, [s for s in sizes if s > 0]))
            per_mod[m] = [split.pop(0) if s > 0 else feats.new_zeros((0, FEATURE_DIM)) for s in sizes]
        return [self.forward_features(c, p) for c, p in zip(per_mod["ct"], per_mod["patho"])]


def build_model(kind: str, num_classes: int, backbone: str = "resnet18", init: str = "pretrained",
                backbone_seed: int = 0, head_seed: int = 0) -> MILModel:
    return MILModel(kind, num_classes, backbone, init, backbone_seed, head_seed)


# -- instance tensors ---------------------------------------------------------------


def instances_to_tensor(instances: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack CT slices (H, W) in [0, 1] or RGB patches (H, W, 3) uint8 into (N, 3, H, W) in [0, 1]."""
    if len(instances) == 0:
        return torch.zeros((0, 3, 224, 224), dtype=dtype)
    arr = np.stack([np.asarray(x) for x in instances])
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    t = torch.as_tensor(arr, dtype=dtype)
    if t.ndim == 3:
        return t.unsqueeze(1).expand(-1, 3, -1, -1).contiguous()
    return t.permute(0, 3, 1, 2).contiguous()


def order_by_keys(x: torch.Tensor, keys: Sequence[int] | None) -> torch.Tensor:
    """Reorder instances by ascending key so pooling sums in a fixed order."""
    if keys is None:
        return x
    if len(keys) != x.shape[0]:
        raise ValueError(f"{len(keys)} keys for {x.shape[0]} instances")
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    return x[order]


# -- forward functions over bags ------------------------------------------------------


def baseline_forward(bag: torch.Tensor, extractor: nn.Module, head: BaselineHead,
                     keys: Sequence[int] | None = None) -> torch.Tensor:
    if bag.shape[0] == 0:
        raise EmptyBagError("baseline_forward: empty bag")
    return head(extractor(order_by_keys(bag, keys)))


def mid_fusion_forward(ct_bag: torch.Tensor | None, patho_bag: torch.Tensor | None, model: MILModel,
                       ct_keys=None, patho_keys=None) -> ModelOutput:
    if model.fusion != "mid":
        raise ValueError(f"{model.kind} is not a mid-fusion variant")
    ct = None if ct_bag is None else order_by_keys(ct_bag, ct_keys)
    patho = None if patho_bag is None else order_by_keys(patho_bag, patho_keys)
    return model(ct, patho)


def late_fusion_forward(ct_bag: torch.Tensor, patho_bag: torch.Tensor, model: MILModel,
                        ct_keys=None, patho_keys=None) -> ModelOutput:
    if model.fusion != "late":
        raise ValueError(f"{model.kind} is not a late-fusion variant")
    return model(order_by_keys(ct_bag, ct_keys), order_by_keys(patho_bag, patho_keys))


# -- loss -----------------------------------------------------------------------------


@dataclass
class LossReport:
    l_joint: torch.Tensor
    l_ct: torch.Tensor | None
    l_patho: torch.Tensor | None
    l_total: torch.Tensor

    def as_floats(self) -> dict[str, float | None]:
        return {k: None if v is None else float(v.detach()) for k, v in vars(self).items()}


def cross_entropy(logits: torch.Tensor, label: int) -> torch.Tensor:
    return F.cross_entropy(logits.unsqueeze(0), torch.tensor([label]))


def compute_loss(kind: str, label: int, output: ModelOutput) -> LossReport:
    k = output.joint.shape[-1]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    l_joint = cross_entropy(output.joint, label)
    l_ct = None if output.ct is None else cross_entropy(output.ct, label)
    l_patho = None if output.patho is None else cross_entropy(output.patho, label)
    total = l_joint
    if kind.endswith("_multi"):
        # an absent branch (empty bag under mid fusion) contributes nothing
        for extra in (l_ct, l_patho):
            if extra is not None:
                total = total + extra
    return LossReport(l_joint, l_ct, l_patho, total)


# -- checkpoints ------------------------------------------------------------------------

_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: MILModel, header: dict) -> None:
    """Zip archive: ``header.json`` plus one ``params/<name>.npy`` per state-dict entry.

    Entries carry a fixed timestamp so identical weights give identical bytes.
    """
    header = dict(header)
    header.setdefault("variant", model.kind)
    header["num_classes"] = model.num_classes
    state = model.state_dict()
    header["tensors"] = list(state)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", _ZIP_TIME), json.dumps(header, sort_keys=True, indent=2))
        for name, tensor in state.items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            info = zipfile.ZipInfo(f"params/{name}.npy", _ZIP_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        state = {
            name: torch.from_numpy(np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False))
            for name in header["tensors"]
        }
    return header, state
