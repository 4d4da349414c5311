"""Whole-slide raster to background-filtered 224x224 patch bag.

Input rasters are plain RGB images already exported at 5x magnification;
pyramid WSI containers must be exported upstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .logutil import get_logger

log = get_logger("patho")

TILE = 224
BACKGROUND_THRESHOLD = 220.0
MAGNIFICATION = "5x"


@dataclass
class Patch:
    row: int
    col: int
    pixels: np.ndarray


@dataclass
class PatchBag:
    patient_id: str
    patches: list[np.ndarray]
    kept_count: int
    discarded_count: int
    coords: list[tuple[int, int]] = field(default_factory=list)
    threshold: float = BACKGROUND_THRESHOLD

    @property
    def keys(self) -> list[int]:
        return [r * 100_000 + c for r, c in self.coords]


def read_raster(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def tile(raster: np.ndarray, size: int = TILE) -> list[Patch]:
    """Non-overlapping row-major tiles; right and bottom remainders are dropped."""
    raster = np.asarray(raster)
    h, w = raster.shape[:2]
    rows, cols = h // size, w // size
    if rows == 0 or cols == 0:
        log.warning("raster smaller than one tile", extra={"height": h, "width": w, "tile": size})
        return []
    return [
        Patch(r, c, raster[r * size : (r + 1) * size, c * size : (c + 1) * size])
        for r in range(rows)
        for c in range(cols)
    ]


def is_background(patch: np.ndarray, threshold: float = BACKGROUND_THRESHOLD) -> bool:
    """Mean over all pixels and channels strictly above the threshold."""
    return float(np.mean(patch, dtype=np.float64)) > threshold


def filter_background(
    patches: Sequence[Patch], threshold: float = BACKGROUND_THRESHOLD, patient_id: str = ""
) -> PatchBag:
    kept = [p for p in patches if not is_background(p.pixels, threshold)]
    bag = PatchBag(
        patient_id,
        [p.pixels for p in kept],
        len(kept),
        len(patches) - len(kept),
        [(p.row, p.col) for p in kept],
        threshold,
    )
    if not kept:
        log.warning("empty pathology bag", extra={"patient_id": patient_id, "discarded": bag.discarded_count})
    return bag


def preprocess_raster(
    raster: np.ndarray, patient_id: str = "", size: int = TILE, threshold: float = BACKGROUND_THRESHOLD
) -> PatchBag:
    return filter_background(tile(raster, size), threshold, patient_id)


def save_patch_bag(bag: PatchBag, directory: str | Path, tile_size: int = TILE) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("*.png"):
        stale.unlink()
    for (r, c), pixels in zip(bag.coords, bag.patches):
        Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(
            directory / f"{bag.patient_id}_{r}_{c}.png"
        )
    sidecar = {
        "patient_id": bag.patient_id,
        "kept": bag.kept_count,
        "discarded": bag.discarded_count,
        "tile": tile_size,
        "threshold": bag.threshold,
        "magnification": MAGNIFICATION,
        "coords": [list(rc) for rc in bag.coords],
    }
    (directory / "bag.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return directory


def load_patch_bag(directory: str | Path) -> PatchBag:
    directory = Path(directory)
    meta = json.loads((directory / "bag.json").read_text())
    pid = meta["patient_id"]
    coords = [tuple(rc) for rc in meta["coords"]]
    patches = [read_raster(directory / f"{pid}_{r}_{c}.png") for r, c in coords]
    return PatchBag(pid, patches, meta["kept"], meta["discarded"], coords, meta["threshold"])
