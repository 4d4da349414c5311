"""Deterministic phantom cohorts with plantable per-modality, per-task class signal.

CT: an ellipsoidal liver (~50 HU) in air (-1000 HU) plus a small bone rod.
Each task owns one oriented texture band inside the liver; its amplitude
grows with the patient's class level times the CT signal strength.

Pathology: a pink tissue field on a white background. Each task owns one
motif colour (collagen streaks, fat droplets, inflammatory clusters,
ballooned cells) whose density grows with class level times the pathology
signal strength.

At strength 0 every patient draws from the same distribution regardless of
class.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .ct_pipeline import write_volume, read_volume
from .data_model import TASKS, StudyRecord, label_scheme, num_classes, write_manifest

# Combined-class and original raw-score histograms of the reference 30-patient cohort.
REFERENCE_COMBINED = {"fibrosis": (7, 10, 13), "steatosis": (11, 19), "lobular": (9, 10, 11), "ballooning": (8, 11, 11)}
REFERENCE_ORIGINAL = {
    "fibrosis": (7, 6, 4, 3, 2, 8),
    "steatosis": (2, 9, 11, 8),
    "lobular": (9, 10, 8, 3),
    "ballooning": (8, 11, 11),
}

# CT texture bands: orientation (degrees) and period (voxels) per task.
CT_ORIENTATION = {"fibrosis": 0.0, "steatosis": 90.0, "lobular": 45.0, "ballooning": 135.0}
CT_PERIOD = {"fibrosis": 8.0, "steatosis": 10.0, "lobular": 5.0, "ballooning": 6.5}  # voxels
CT_BASE_AMP = 4.0
CT_EXTRA_AMP = 140.0
CT_NOISE_HU = 14.0

TISSUE_RGB = (222, 150, 190)
BACKGROUND_RGB = (244, 242, 245)
NUCLEUS_RGB = (120, 70, 160)
MOTIF_RGB = {
    "fibrosis": (80, 110, 215),
    "steatosis": (252, 252, 252),
    "lobular": (60, 20, 90),
    "ballooning": (200, 235, 170),
}
MOTIF_RADIUS = {"fibrosis": 3, "steatosis": 7, "lobular": 5, "ballooning": 8}
MOTIF_BASE = 3.0  # motifs per 224x224 tile at zero signal
MOTIF_EXTRA = 110.0
NUCLEI_PER_TILE = 40.0
JITTER = 0.1


@dataclass
class SynthSpec:
    n_patients: int = 30
    seed: int = 0
    class_counts: dict[str, tuple[int, ...]] | None = None
    strength: dict[str, dict[str, float]] = field(
        default_factory=lambda: {m: dict.fromkeys(TASKS, 0.7) for m in ("ct", "patho")}
    )
    volume_shape: tuple[int, int, int] = (32, 128, 128)
    slide_shape: tuple[int, int] = (1120, 1120)
    liver_radii: tuple[float, float, float] = (0.42, 0.30, 0.34)
    lesion_density: float = 1.0

    def __post_init__(self):
        if self.class_counts is None:
            self.class_counts = default_class_counts(self.n_patients)
        for task in TASKS:
            counts = tuple(self.class_counts[task])
            if len(counts) != num_classes(task):
                raise ValueError(f"{task}: expected {num_classes(task)} class counts, got {counts}")
            if sum(counts) != self.n_patients:
                raise ValueError(f"{task}: class counts {counts} do not sum to n_patients={self.n_patients}")
            if min(counts) < 0:
                raise ValueError(f"{task}: negative class count in {counts}")
        for m in ("ct", "patho"):
            for task in TASKS:
                s = self.strength[m][task]
                if not 0.0 <= s <= 1.0:
                    raise ValueError(f"strength[{m}][{task}]={s} outside [0, 1]")

    @classmethod
    def with_strength(cls, ct: float, patho: float, **kwargs) -> "SynthSpec":
        strength = {"ct": dict.fromkeys(TASKS, ct), "patho": dict.fromkeys(TASKS, patho)}
        return cls(strength=strength, **kwargs)

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "seed": self.seed,
            "class_counts": {t: list(c) for t, c in self.class_counts.items()},
            "strength": self.strength,
            "volume_shape": list(self.volume_shape),
            "slide_shape": list(self.slide_shape),
            "liver_radii": list(self.liver_radii),
            "lesion_density": self.lesion_density,
        }


def _largest_remainder(weights, total: int) -> list[int]:
    weights = np.asarray(weights, dtype=float)
    if total == 0 or weights.sum() == 0:
        return [0] * len(weights)
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def default_class_counts(n: int) -> dict[str, tuple[int, ...]]:
    return {task: tuple(_largest_remainder(REFERENCE_COMBINED[task], n)) for task in TASKS}


def raw_scores_for_class(task: str, cls: int, count: int) -> list[Decimal]:
    """Raw scores for ``count`` patients of one combined class, split like the reference cohort."""
    scheme = label_scheme(task)
    group = scheme.groups()[cls]
    domain = scheme.raw_domain
    weights = [REFERENCE_ORIGINAL[task][domain.index(r)] for r in group]
    split = _largest_remainder(weights, count)
    return [r for r, c in zip(group, split) for _ in range(c)]


def class_level(task: str, cls: int) -> float:
    return cls / (num_classes(task) - 1)


# -- per-patient rendering ------------------------------------------------------------


def _disc_offsets(radius: int):
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    keep = yy**2 + xx**2 <= radius**2
    return yy[keep], xx[keep]


def render_ct(rng: np.random.Generator, shape, radii, amplitudes: dict[str, float]):
    """HU volume and its ground-truth liver mask."""
    d, h, w = shape
    vol = np.full(shape, -1000.0, dtype=np.float64)
    zc = (d - 1) / 2
    yc = h / 2 + rng.uniform(-0.04, 0.04) * h
    xc = w / 2 + rng.uniform(-0.04, 0.04) * w
    rz, ry, rx = (r * s * rng.uniform(0.92, 1.08) for r, s in zip(radii, shape))
    z, y, x = np.ogrid[:d, :h, :w]
    liver = ((z - zc) / rz) ** 2 + ((y - yc) / ry) ** 2 + ((x - xc) / rx) ** 2 <= 1.0

    texture = np.zeros((h, w))
    yy, xx = np.mgrid[:h, :w]
    tex = np.zeros(shape)
    for k in range(d):
        texture[:] = 0.0
        for task, amp in amplitudes.items():
            theta = np.deg2rad(CT_ORIENTATION[task] + rng.uniform(-4, 4))
            phase = rng.uniform(0, 2 * np.pi)
            wave = 2 * np.pi / CT_PERIOD[task]
            texture += amp * np.cos(wave * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        tex[k] = texture
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=(0, 0.7, 0.7))
    noise *= CT_NOISE_HU / max(noise.std(), 1e-9)
    liver_hu = 50.0 + rng.normal(0.0, 3.0)
    vol[liver] = (liver_hu + tex + noise)[liver]

    # bone rod below the liver, disconnected from it
    by, bx, br = h * 0.9, w / 2, max(2.0, 0.035 * w)
    rod = (y - by) ** 2 + (x - bx) ** 2 <= br**2
    vol[np.broadcast_to(rod, shape) & ~liver] = 400.0
    return vol.astype(np.float32), liver.astype(np.uint8)


def render_slide(rng: np.random.Generator, shape, densities: dict[str, float]) -> np.ndarray:
    """RGB uint8 slide raster: tissue blob with per-task motifs at ``densities`` (per 224 tile)."""
    h, w = shape
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = BACKGROUND_RGB
    yc, xc = h / 2 + rng.uniform(-0.03, 0.03) * h, w / 2 + rng.uniform(-0.03, 0.03) * w
    ry, rx = 0.44 * h * rng.uniform(0.95, 1.05), 0.44 * w * rng.uniform(0.95, 1.05)
    y, x = np.ogrid[:h, :w]
    tissue = ((y - yc) / ry) ** 2 + ((x - xc) / rx) ** 2 <= 1.0
    img[tissue] = TISSUE_RGB
    tissue_area_tiles = tissue.sum() / (224.0 * 224.0)
    ty, tx = np.nonzero(tissue)

    def stamp(color, radius, count, elongate=False):
        if count <= 0:
            return
        idx = rng.integers(0, ty.size, size=count)
        for cy, cx in zip(ty[idx], tx[idx]):
            if elongate:
                ang = rng.uniform(0, np.pi)
                t = np.arange(-5 * radius, 5 * radius + 1)
                py = np.clip(np.rint(cy + t * np.sin(ang)).astype(int), 0, h - 1)
                px = np.clip(np.rint(cx + t * np.cos(ang)).astype(int), 0, w - 1)
                for dy in range(-2, 3):
                    img[np.clip(py + dy, 0, h - 1), px] = color
            else:
                oy, ox = _disc_offsets(radius)
                py, px = cy + oy, cx + ox
                ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
                img[py[ok], px[ok]] = color

    stamp(NUCLEUS_RGB, 2, rng.poisson(NUCLEI_PER_TILE * tissue_area_tiles))
    for task in TASKS:
        n = rng.poisson(densities[task] * tissue_area_tiles)
        stamp(MOTIF_RGB[task], MOTIF_RADIUS[task], n, elongate=(task == "fibrosis"))
    img[tissue] += rng.normal(0.0, 6.0, size=(int(tissue.sum()), 3))
    img[~tissue] += rng.normal(0.0, 2.0, size=(int((~tissue).sum()), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class SynthPatient:
    record: StudyRecord
    labels: dict[str, int]
    planted: dict[str, dict[str, float]]
    volume: np.ndarray | None = None
    mask: np.ndarray | None = None
    slide: np.ndarray | None = None


def _patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def assign_scores(spec: SynthSpec) -> list[dict[str, Decimal]]:
    """Per-patient raw scores; each task shuffled independently."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0FFEE]))
    per_task = {}
    for task in TASKS:
        raws = []
        for cls, count in enumerate(spec.class_counts[task]):
            raws += raw_scores_for_class(task, cls, count)
        order = rng.permutation(len(raws))
        per_task[task] = [raws[i] for i in order]
    return [{task: per_task[task][i] for task in TASKS} for i in range(spec.n_patients)]


def generate_patient(spec: SynthSpec, index: int, raws: dict[str, Decimal], render: bool = True) -> SynthPatient:
    rng = _patient_rng(spec.seed, index)
    pid = f"P{index:03d}"
    record = StudyRecord(pid, f"ct/{pid}.nii", f"wsi/{pid}.png", **{f"{t}_raw": raws[t] for t in TASKS})
    labels = record.labels()
    planted = {"ct": {}, "patho": {}}
    for m in ("ct", "patho"):
        for task in TASKS:
            jitter = rng.uniform(-JITTER, JITTER)
            planted[m][task] = spec.strength[m][task] * max(0.0, class_level(task, labels[task]) + jitter)
    patient = SynthPatient(record, labels, planted)
    if render:
        amps = {t: CT_BASE_AMP + CT_EXTRA_AMP * spec.lesion_density * planted["ct"][t] for t in TASKS}
        patient.volume, patient.mask = render_ct(rng, spec.volume_shape, spec.liver_radii, amps)
        dens = {t: MOTIF_BASE + MOTIF_EXTRA * spec.lesion_density * planted["patho"][t] for t in TASKS}
        patient.slide = render_slide(rng, spec.slide_shape, dens)
    return patient


def generate_patients(spec: SynthSpec, render: bool = True) -> list[SynthPatient]:
    return [generate_patient(spec, i, raws, render) for i, raws in enumerate(assign_scores(spec))]


@dataclass
class SynthCohort:
    root: Path
    manifest: Path
    records: list[StudyRecord]
    ground_truth: dict

    def mask_path(self, patient_id: str) -> Path:
        return self.root / "masks" / f"{patient_id}_mask.nii"


def generate_cohort(spec: SynthSpec, out_dir: str | Path) -> SynthCohort:
    """Write manifest.csv, ct/*.nii, masks/*_mask.nii, wsi/*.png and ground_truth.json.

    Manifest paths are relative to ``out_dir``.
    """
    root = Path(out_dir)
    for sub in ("ct", "masks", "wsi"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records, truth = [], {}
    for p in generate_patients(spec):
        pid = p.record.patient_id
        write_volume(root / p.record.ct_ref, p.volume)
        write_volume(root / "masks" / f"{pid}_mask.nii", p.mask)
        Image.fromarray(p.slide, mode="RGB").save(root / p.record.wsi_ref)
        records.append(p.record)
        truth[pid] = {"labels": p.labels, "planted": p.planted}
    manifest = root / "manifest.csv"
    write_manifest(records, manifest)
    ground_truth = {"spec": spec.to_dict(), "patients": truth}
    (root / "ground_truth.json").write_text(json.dumps(ground_truth, indent=2, sort_keys=True) + "\n")
    return SynthCohort(root, manifest, records, ground_truth)


def file_digests(root: str | Path) -> dict[str, str]:
    root = Path(root)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# -- probe ---------------------------------------------------------------------------


def ct_band_energy(volume: np.ndarray, mask: np.ndarray, task: str) -> float:
    """Mean over liver-bearing slices of the squared amplitude of the task's texture band."""
    d, h, w = volume.shape
    yy, xx = np.mgrid[:h, :w]
    theta = np.deg2rad(CT_ORIENTATION[task])
    wave = 2 * np.pi / CT_PERIOD[task]
    carrier = np.exp(-1j * wave * (xx * np.cos(theta) + yy * np.sin(theta)))
    energies = []
    for k in range(d):
        m = mask[k].astype(bool)
        n = int(m.sum())
        if n < 64:
            continue
        v = volume[k][m].astype(np.float64)
        amp = 2.0 * np.abs(np.sum((v - v.mean()) * carrier[m])) / n
        energies.append(amp**2)
    return float(np.mean(energies)) if energies else 0.0


def patho_motif_fraction(slide: np.ndarray, task: str, tol: float = 40.0) -> float:
    """Fraction of tissue pixels within ``tol`` (RGB distance) of the task's motif colour."""
    px = slide.reshape(-1, 3).astype(np.float64)
    tissue = np.linalg.norm(px - np.asarray(BACKGROUND_RGB), axis=1) > 20.0
    if task == "steatosis":
        # fat droplets are near-white, so count them only inside the tissue envelope
        tissue = _tissue_envelope(slide).reshape(-1)
    dist = np.linalg.norm(px - np.asarray(MOTIF_RGB[task]), axis=1)
    return float(np.mean(dist[tissue] < tol)) if tissue.any() else 0.0


def _tissue_envelope(slide: np.ndarray) -> np.ndarray:
    fg = np.linalg.norm(slide.astype(np.float64) - np.asarray(BACKGROUND_RGB), axis=2) > 20.0
    return ndimage.binary_fill_holes(ndimage.binary_closing(fg, iterations=8))


def probe_scores(stat: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Turn a scalar statistic into per-class scores for one-vs-rest ranking.

    Lowest class ranks by -stat, highest by +stat, interior classes by
    closeness to their class mean.
    """
    stat = np.asarray(stat, dtype=float)
    labels = np.asarray(labels)
    scores = np.empty((stat.size, k))
    for c in range(k):
        if c == 0:
            scores[:, c] = -stat
        elif c == k - 1:
            scores[:, c] = stat
        else:
            centre = stat[labels == c].mean() if np.any(labels == c) else stat.mean()
            scores[:, c] = -np.abs(stat - centre)
    return scores


def signal_probe(cohort: SynthCohort | list[SynthPatient], modality: str, task: str) -> float:
    """Probe AUC of the closed-form per-patient statistic; no learned model involved."""
    from .evaluation import ovr_mean_auc

    stats, labels = [], []
    if isinstance(cohort, SynthCohort):
        for rec in cohort.records:
            if modality == "ct":
                vol = read_volume(cohort.root / rec.ct_ref)
                mask = read_volume(cohort.mask_path(rec.patient_id))
                stats.append(ct_band_energy(vol, mask, task))
            else:
                with Image.open(cohort.root / rec.wsi_ref) as img:
                    stats.append(patho_motif_fraction(np.asarray(img.convert("RGB")), task))
            labels.append(rec.label(task))
    else:
        for p in cohort:
            if modality == "ct":
                stats.append(ct_band_energy(p.volume, p.mask, task))
            else:
                stats.append(patho_motif_fraction(p.slide, task))
            labels.append(p.labels[task])
    k = num_classes(task)
    labels = np.asarray(labels)
    scores = probe_scores(np.asarray(stats), labels, k)
    return ovr_mean_auc(scores, labels, k).mean


def planted_probe(patients: list[SynthPatient], modality: str, task: str) -> float:
    """Probe AUC using the planted ground-truth values themselves as the statistic."""
    from .evaluation import ovr_mean_auc

    stats = np.asarray([p.planted[modality][task] for p in patients])
    labels = np.asarray([p.labels[task] for p in patients])
    k = num_classes(task)
    return ovr_mean_auc(probe_scores(stats, labels, k), labels, k).mean
