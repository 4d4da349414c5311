import json
from decimal import Decimal

import numpy as np
import pytest

from mmfuse.data_model import TASKS, combined_distribution, read_manifest
from mmfuse.synthdata import (
    REFERENCE_COMBINED,
    SynthSpec,
    default_class_counts,
    file_digests,
    generate_cohort,
    generate_patients,
    planted_probe,
    signal_probe,
)

SMALL = dict(volume_shape=(6, 64, 64), slide_shape=(448, 448))


def test_default_counts_match_reference_at_thirty():
    assert default_class_counts(30) == REFERENCE_COMBINED
    for n in (3, 7, 12, 100):
        counts = default_class_counts(n)
        assert all(sum(c) == n for c in counts.values())


def test_infeasible_distribution_rejected():
    with pytest.raises(ValueError):
        SynthSpec(n_patients=10, class_counts={**default_class_counts(10), "fibrosis": (5, 5, 5)})
    with pytest.raises(ValueError):
        SynthSpec.with_strength(1.5, 0.0)


def test_labels_follow_spec_counts():
    spec = SynthSpec(n_patients=30, seed=4)
    patients = generate_patients(spec, render=False)
    records = [p.record for p in patients]
    for task in TASKS:
        assert combined_distribution(records, task) == REFERENCE_COMBINED[task]
    assert any(r.fibrosis_raw == Decimal("3.5") for r in records)


def test_cohort_files_and_byte_identical_regeneration(tmp_path):
    spec = SynthSpec(n_patients=4, seed=9, **SMALL)
    cohort = generate_cohort(spec, tmp_path / "a")
    generate_cohort(spec, tmp_path / "b")
    digests = file_digests(tmp_path / "a")
    assert digests == file_digests(tmp_path / "b")
    assert {"manifest.csv", "ground_truth.json", "ct/P000.nii", "masks/P000_mask.nii", "wsi/P003.png"} <= set(digests)
    assert len(read_manifest(cohort.manifest)) == 4
    truth = json.loads((tmp_path / "a" / "ground_truth.json").read_text())
    assert set(truth["patients"]) == {"P000", "P001", "P002", "P003"}

    generate_cohort(SynthSpec(n_patients=4, seed=10, **SMALL), tmp_path / "c")
    assert file_digests(tmp_path / "c")["ct/P000.nii"] != digests["ct/P000.nii"]


def test_phantom_intensities():
    p = generate_patients(SynthSpec(n_patients=3, seed=1, **SMALL))[0]
    liver = p.volume[p.mask.astype(bool)]
    assert 35.0 <= float(np.median(liver)) <= 65.0
    assert float(np.median(p.volume[0, :4, :4])) == -1000.0
    assert p.slide.dtype == np.uint8 and p.slide.shape == (448, 448, 3)


def test_planted_signal_monotone_in_class():
    patients = generate_patients(SynthSpec(n_patients=30, seed=2), render=False)
    for task in TASKS:
        for m in ("ct", "patho"):
            by_class = {}
            for p in patients:
                by_class.setdefault(p.labels[task], []).append(p.planted[m][task])
            means = [np.mean(by_class[c]) for c in sorted(by_class)]
            assert all(a < b for a, b in zip(means, means[1:])), (task, m, means)


def test_zero_strength_plants_nothing():
    patients = generate_patients(SynthSpec.with_strength(0.0, 0.7, n_patients=30, seed=2), render=False)
    assert all(p.planted["ct"][t] == 0.0 for p in patients for t in TASKS)
    assert planted_probe(patients, "patho", "lobular") > 0.9


@pytest.mark.slow
def test_rendered_signal_is_recoverable():
    spec = SynthSpec.with_strength(1.0, 1.0, n_patients=12, seed=3, volume_shape=(8, 128, 128), slide_shape=(672, 672))
    patients = generate_patients(spec)
    for task in ("steatosis", "ballooning"):
        assert signal_probe(patients, "ct", task) >= 0.9
        assert signal_probe(patients, "patho", task) >= 0.9
