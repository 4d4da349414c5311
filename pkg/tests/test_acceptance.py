"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test reports through ``record_criterion`` so the session ends with one
PASS/FAIL line per criterion (also printed inline under ``pytest -s``).
"""

import itertools
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from mmfuse import ct_pipeline as ct
from mmfuse import patho_pipeline as pp
from mmfuse.data_model import TASKS, cohort_from_original_counts, combined_distribution
from mmfuse.evaluation import binary_auc, bootstrap_ci
from mmfuse.models import VARIANTS, build_model, compute_loss
from mmfuse.pipeline import bags_from_arrays, per_task_means, run_experiment
from mmfuse.synthdata import REFERENCE_ORIGINAL, SynthSpec, generate_patients
from mmfuse.training import profile_config

EXPECTED_COMBINED = {"fibrosis": (7, 10, 13), "steatosis": (11, 19), "lobular": (9, 10, 11), "ballooning": (8, 11, 11)}


def _pairs_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg)) / (len(pos) * len(neg))


def test_criterion_1_label_table(record_criterion):
    t0 = time.perf_counter()
    records = cohort_from_original_counts(REFERENCE_ORIGINAL)
    got = {t: combined_distribution(records, t) for t in TASKS}
    elapsed = time.perf_counter() - t0
    ok = got == EXPECTED_COMBINED and elapsed < 1.0
    record_criterion(1, ok, f"combined={got} in {elapsed:.3f}s")
    assert ok


def test_criterion_2_auc_oracle(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    invariants = True
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = rng.integers(0, 8, n) / 7.0
        auc = binary_auc(scores, labels)
        worst = max(worst, abs(auc - _pairs_auc(scores, labels)))
        invariants &= binary_auc(np.exp(3 * scores) + 2, labels) == auc
        # AUC = integer / denom exactly, so compare numerators for complement symmetry
        denom = 2 * int(labels.sum()) * int(n - labels.sum())
        complement = binary_auc(scores, 1 - labels)
        invariants &= round(auc * denom) + round(complement * denom) == denom
        invariants &= binary_auc(-scores, labels) == complement
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and invariants and elapsed < 5.0
    record_criterion(2, ok, f"max |auc - oracle| = {worst:.2e}, invariants={invariants}, {elapsed:.2f}s")
    assert ok


def test_criterion_3_bootstrap(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    probs = rng.dirichlet([1, 1, 1], 15)
    labels = [0, 1, 2] * 5
    a = bootstrap_ci(probs, labels, 3, iters=1000, seed=11)
    b = bootstrap_ci(probs, labels, 3, iters=1000, seed=11)
    perfect = np.array([[0.9, 0.1]] * 6 + [[0.2, 0.8]] * 6)
    lo, hi, _ = bootstrap_ci(perfect, [0] * 6 + [1] * 6, 2, iters=1000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = a == b and (lo, hi) == (1.0, 1.0) and elapsed < 10.0
    record_criterion(3, ok, f"replay equal={a == b}, perfect CI=[{lo}, {hi}], {elapsed:.2f}s")
    assert ok


def test_criterion_4_preprocessing(record_criterion):
    checks = {}
    checks["window"] = ct.hu_window(np.array([-200.0, 250.0, 25.0])).tolist() == [0.0, 1.0, 0.5]
    at = np.zeros(1020)
    at[:20] = 1.0  # 8-bit-scale mean exactly 5
    below = at.copy()
    below[0] = 0.9
    checks["slice threshold"] = ct.slice_keep(at) and not ct.slice_keep(below)
    checks["tiling"] = [len(pp.tile(np.zeros((s, s, 3), np.uint8))) for s in (448, 450, 224)] == [4, 4, 1]
    mean220 = np.full((224, 224, 3), 220, np.uint8)
    over = mean220.copy()
    over[0, 0, 0] = 221
    checks["background"] = (
        not pp.is_background(mean220) and pp.is_background(over)
        and pp.is_background(np.full((224, 224, 3), 255, np.uint8)) and not pp.is_background(np.zeros_like(over))
    )
    ok = all(checks.values())
    record_criterion(4, ok, ", ".join(f"{k}={v}" for k, v in checks.items()))
    assert ok


def test_criterion_5_model_invariants(record_criterion):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    ct_img, pa_img = torch.rand((6, 3, 32, 32), generator=g), torch.rand((5, 3, 32, 32), generator=g)
    perm_err = 0.0
    for kind in VARIANTS:
        model = build_model(kind, 3, "stub", "random", 1, 2).eval()
        with torch.no_grad():
            ref = model(ct_img, pa_img).joint
            out = model(ct_img[torch.randperm(6, generator=g)], pa_img[torch.randperm(5, generator=g)]).joint
        perm_err = max(perm_err, float(torch.max(torch.abs(out - ref))))

    model = build_model("mid_multi", 3, "stub", "random", 1, 2)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    buffers = {n: b.clone() for n, b in model.named_buffers()}
    opt = torch.optim.Adam(model.trainable_parameters(), lr=1e-2, weight_decay=0.01)
    rep = compute_loss("mid_multi", 1, model(ct_img, pa_img))
    opt.zero_grad()
    rep.l_total.backward()
    opt.step()
    params = dict(model.named_parameters())
    freeze_ok = bool(frozen) and all(torch.equal(params[n], v) for n, v in frozen.items()) and all(
        torch.equal(b, buffers[n]) for n, b in model.named_buffers()
    )
    sum_err = abs(rep.l_total.item() - (rep.l_joint + rep.l_ct + rep.l_patho).item())

    model64 = build_model("late_multi", 3, "stub", "random", 3, 4).double().eval()
    x_ct, x_pa = ct_img[:3].double(), pa_img[:2].double()

    def loss():
        return compute_loss("late_multi", 0, model64(x_ct, x_pa)).l_total

    model64.zero_grad()
    loss().backward()
    worst_rel = 0.0
    rng = np.random.default_rng(0)
    for p in model64.trainable_parameters():
        idx = [np.unravel_index(i, p.shape) for i in rng.choice(p.numel(), min(4, p.numel()), replace=False)]
        num, ana = [], []
        for i in idx:
            orig = p.data[i].item()
            with torch.no_grad():
                p.data[i] = orig + 1e-6
                up = loss().item()
                p.data[i] = orig - 1e-6
                down = loss().item()
                p.data[i] = orig
            num.append((up - down) / 2e-6)
            ana.append(p.grad[i].item())
        num, ana = np.array(num), np.array(ana)
        if np.linalg.norm(num) > 1e-8:
            worst_rel = max(worst_rel, np.linalg.norm(ana - num) / np.linalg.norm(num))
    elapsed = time.perf_counter() - t0
    ok = perm_err <= 1e-6 and freeze_ok and sum_err <= 1e-6 and worst_rel <= 1e-4 and elapsed < 120
    record_criterion(5, ok, f"perm={perm_err:.1e}, freeze={freeze_ok}, sum={sum_err:.1e}, "
                            f"fd rel={worst_rel:.1e}, {elapsed:.1f}s")
    assert ok


def _experiment(ct_strength, patho_strength, seed, variants):
    patients = generate_patients(SynthSpec.with_strength(ct_strength, patho_strength, n_patients=30, seed=seed))
    bags = bags_from_arrays(patients)
    report, _ = run_experiment(bags, profile_config("desk", seed=seed), variants=variants)
    return {v: per_task_means(report, v) for v in variants}


@pytest.mark.slow
def test_criterion_6_synthetic_fusion_claim(record_criterion):
    t0 = time.perf_counter()
    variants = ("ct_only", "patho_only", "mid_single")
    per_seed = [_experiment(0.7, 0.7, seed, variants) for seed in (0, 1, 2)]
    mean = {v: {t: float(np.mean([r[v][t] for r in per_seed])) for t in TASKS} for v in variants}
    passing = [
        t for t in TASKS
        if mean["mid_single"][t] >= 0.90
        and mean["mid_single"][t] >= max(mean["ct_only"][t], mean["patho_only"][t]) - 0.02
    ]
    elapsed = time.perf_counter() - t0
    table = "; ".join(f"{t}: mid {mean['mid_single'][t]:.3f} ct {mean['ct_only'][t]:.3f} "
                      f"patho {mean['patho_only'][t]:.3f}" for t in TASKS)
    ok = len(passing) >= 3 and elapsed <= 20 * 60
    record_criterion(6, ok, f"{len(passing)}/4 tasks pass {passing}; {table}; {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_7_modality_ablation(record_criterion):
    t0 = time.perf_counter()
    means = _experiment(0.0, 0.7, 0, ("ct_only", "patho_only", "mid_single"))
    ct_mean = float(np.mean(list(means["ct_only"].values())))
    joint = float(np.mean(list(means["mid_single"].values())))
    patho = float(np.mean(list(means["patho_only"].values())))
    elapsed = time.perf_counter() - t0
    ok = 0.35 <= ct_mean <= 0.65 and joint >= patho - 0.05 and elapsed <= 20 * 60
    per_task = ", ".join(f"{t} {means['ct_only'][t]:.3f}" for t in TASKS)
    record_criterion(7, ok, f"ct-only mean {ct_mean:.3f} ({per_task}); mid-single {joint:.3f} vs "
                            f"patho-only {patho:.3f}; {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_8_full_pipeline_determinism(record_criterion, tmp_path):
    t0 = time.perf_counter()
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "mmfuse.cli", "run-all", "--profile", "desk", "--seed", "0", "--out", str(out),
             "--log-level", "WARNING"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr[-2000:]
        outputs.append((out / "report.json").read_bytes())
    elapsed = time.perf_counter() - t0
    ok = outputs[0] == outputs[1] and elapsed <= 45 * 60
    record_criterion(8, ok, f"report.json identical={outputs[0] == outputs[1]}, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_9_dice(record_criterion):
    a = np.zeros((4, 4), np.uint8)
    a[:2] = 1
    disjoint = 1 - a
    half = np.zeros_like(a)
    half[1:3] = 1
    values = (ct.dice(a, a), ct.dice(a, disjoint), ct.dice(a, half))
    ok = values == (1.0, 0.0, 0.5)
    record_criterion(9, ok, f"identical/disjoint/half = {values}")
    assert ok
