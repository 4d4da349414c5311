"""CT volume to filtered bag of liver-masked 2D slices.

Windowing happens before masking so the zeros written by the mask are
unambiguous in the windowed image. The axial axis is the first array
dimension of every volume this module reads or writes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .logutil import get_logger

log = get_logger("ct")

WINDOW = (-200.0, 250.0)
SLICE_THRESHOLD = 5.0
INPUT_SIZE = 224
RAW_MAGIC = b"MMFV"


# -- volume IO ----------------------------------------------------------------


def write_raw_volume(path: str | Path, voxels: np.ndarray) -> None:
    """Raw layout: b"MMFV", three little-endian uint32 dims (D, H, W), then float32 LE voxels in C order."""
    arr = np.ascontiguousarray(voxels, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"raw volumes are 3D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes())


def read_raw_volume(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw volume (bad magic)")
    dims = struct.unpack("<3I", data[4:16])
    expected = 16 + 4 * int(np.prod(dims))
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for dims {dims}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(dims).astype(np.float32)


def write_volume(path: str | Path, voxels: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".vol":
        write_raw_volume(path, voxels)
        return
    import nibabel as nib

    dtype = np.uint8 if voxels.dtype == np.uint8 else np.float32
    img = nib.Nifti1Image(np.asarray(voxels, dtype=dtype), affine=np.eye(4))
    nib.save(img, str(path))


def read_volume(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".vol":
        vol = read_raw_volume(path)
    elif path.name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        vol = np.asarray(nib.load(str(path)).dataobj, dtype=np.float32)
    else:
        raise ValueError(f"{path}: unsupported volume format (expected .nii, .nii.gz or .vol)")
    if vol.ndim != 3 or vol.shape[0] < 1:
        raise ValueError(f"{path}: expected a 3D volume with depth >= 1, got shape {vol.shape}")
    if not np.all(np.isfinite(vol)):
        raise ValueError(f"{path}: volume contains non-finite HU values")
    return vol


# -- per-slice operations -------------------------------------------------------


def hu_window(volume: np.ndarray, lo: float = WINDOW[0], hi: float = WINDOW[1]) -> np.ndarray:
    if lo >= hi:
        raise ValueError(f"window lower bound {lo} must be below upper bound {hi}")
    vol = np.asarray(volume, dtype=np.float64)
    return np.clip((vol - lo) / (hi - lo), 0.0, 1.0)


def extract_slices(volume: np.ndarray) -> list[np.ndarray]:
    return [volume[k] for k in range(volume.shape[0])]


def apply_mask(slice_: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if slice_.shape != mask.shape:
        raise ValueError(f"slice shape {slice_.shape} does not match mask shape {mask.shape}")
    return slice_ * mask


def slice_keep(slice_: np.ndarray, threshold: float = SLICE_THRESHOLD) -> bool:
    """Keep iff the 8-bit-scale mean reaches the threshold; equality keeps."""
    return float(np.mean(slice_)) * 255.0 >= threshold


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def resize(image: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear resize of a 2D float image to ``size`` x ``size``."""
    if image.shape == (size, size):
        return np.asarray(image, dtype=np.float32)
    pil = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    out = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float32)
    return np.clip(out, 0.0, 1.0)


# -- mask providers -------------------------------------------------------------


class MaskProvider(Protocol):
    def mask_for(self, slice_: np.ndarray, index: int) -> np.ndarray: ...


class ThresholdMaskProvider:
    """Phantom fallback: threshold the windowed slice, keep the largest connected component.

    Not a liver segmenter; only meaningful for synthetic volumes where the
    liver is the largest soft-tissue structure in every slice.
    """

    def __init__(self, threshold: float = 0.05):
        self.threshold = threshold

    def mask_for(self, slice_: np.ndarray, index: int) -> np.ndarray:
        fg = slice_ > self.threshold
        labels, n = ndimage.label(fg)
        if n == 0:
            return np.zeros(slice_.shape, dtype=np.uint8)
        sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
        return (labels == int(np.argmax(sizes)) + 1).astype(np.uint8)


class VolumeMaskProvider:
    """Precomputed binary mask volume with the same shape as the CT volume."""

    def __init__(self, mask_volume: np.ndarray):
        mask = np.asarray(mask_volume)
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask volume must be binary (0/1)")
        self.mask = mask.astype(np.uint8)

    @classmethod
    def from_file(cls, path: str | Path) -> "VolumeMaskProvider":
        return cls(np.rint(read_volume(path)))

    def mask_for(self, slice_: np.ndarray, index: int) -> np.ndarray:
        mask = self.mask[index]
        if mask.shape != slice_.shape:
            raise ValueError(f"mask slice {index} shape {mask.shape} does not match CT slice {slice_.shape}")
        return mask


# -- bags -----------------------------------------------------------------------


@dataclass
class SliceBag:
    patient_id: str
    slices: list[np.ndarray]
    kept_count: int
    discarded_count: int
    kept_indices: list[int] = field(default_factory=list)
    threshold: float = SLICE_THRESHOLD
    window: tuple[float, float] = WINDOW

    @property
    def keys(self) -> list[int]:
        return list(self.kept_indices)


def filter_slices(
    masked: Sequence[np.ndarray],
    threshold: float = SLICE_THRESHOLD,
    patient_id: str = "",
    size: int | None = INPUT_SIZE,
) -> SliceBag:
    kept, indices = [], []
    for k, s in enumerate(masked):
        if slice_keep(s, threshold):
            kept.append(resize(s, size) if size else np.asarray(s, dtype=np.float32))
            indices.append(k)
    bag = SliceBag(patient_id, kept, len(kept), len(masked) - len(kept), indices, threshold)
    if not kept:
        log.warning("empty CT bag", extra={"patient_id": patient_id, "discarded": bag.discarded_count})
    return bag


def preprocess_volume(
    volume: np.ndarray,
    mask_provider: MaskProvider | None = None,
    patient_id: str = "",
    window: tuple[float, float] = WINDOW,
    threshold: float = SLICE_THRESHOLD,
    size: int | None = INPUT_SIZE,
) -> SliceBag:
    """Window, slice, mask and filter one HU volume."""
    provider = mask_provider or ThresholdMaskProvider()
    windowed = hu_window(volume, *window)
    masked = [apply_mask(s, provider.mask_for(s, k)) for k, s in enumerate(extract_slices(windowed))]
    bag = filter_slices(masked, threshold, patient_id, size)
    bag.window = tuple(window)
    return bag


def save_slice_bag(bag: SliceBag, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("slice_*.png"):
        stale.unlink()
    for idx, s in zip(bag.kept_indices, bag.slices):
        pixels = np.clip(np.rint(np.asarray(s) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(directory / f"slice_{idx:04d}.png")
    sidecar = {
        "patient_id": bag.patient_id,
        "kept": bag.kept_count,
        "discarded": bag.discarded_count,
        "threshold": bag.threshold,
        "window": list(bag.window),
        "kept_indices": bag.kept_indices,
    }
    (directory / "bag.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return directory


def load_slice_bag(directory: str | Path) -> SliceBag:
    directory = Path(directory)
    meta = json.loads((directory / "bag.json").read_text())
    slices = [
        np.asarray(Image.open(directory / f"slice_{idx:04d}.png"), dtype=np.float32) / 255.0
        for idx in meta["kept_indices"]
    ]
    return SliceBag(
        meta["patient_id"],
        slices,
        meta["kept"],
        meta["discarded"],
        list(meta["kept_indices"]),
        meta["threshold"],
        tuple(meta["window"]),
    )
