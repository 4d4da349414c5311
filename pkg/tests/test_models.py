import math

import numpy as np
import pytest
import torch

from mmfuse.models import (
    FEATURE_DIM,
    VARIANTS,
    EmptyBagError,
    ModelOutput,
    build_backbone,
    build_model,
    compute_loss,
    instances_to_tensor,
    load_checkpoint,
    mid_fusion_forward,
    late_fusion_forward,
    save_checkpoint,
)

SIDE = 32  # the stub pools adaptively, so tiny images keep these tests fast


def _images(n, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, SIDE, SIDE), generator=g)


def _model(kind, k=3, dtype=torch.float32):
    return build_model(kind, k, "stub", "random", backbone_seed=1, head_seed=2).to(dtype)


@pytest.mark.parametrize("kind", VARIANTS)
def test_permutation_invariance(kind):
    model = _model(kind).eval()
    ct, patho = _images(7, 0), _images(5, 1)
    with torch.no_grad():
        ref = model(ct, patho).joint
        for seed in range(3):
            g = torch.Generator().manual_seed(seed)
            out = model(ct[torch.randperm(7, generator=g)], patho[torch.randperm(5, generator=g)]).joint
            assert torch.max(torch.abs(out - ref)) <= 1e-6


def test_mid_fusion_pools_the_union():
    model = _model("mid_single").eval()
    ct, patho = torch.randn(4, FEATURE_DIM), torch.randn(6, FEATURE_DIM)
    with torch.no_grad():
        out = model.forward_features(ct, patho).joint
        manual = model.joint(torch.cat([ct, patho]))
    torch.testing.assert_close(out, manual, rtol=0, atol=0)


def test_late_fusion_concatenates_ct_then_patho():
    model = _model("late_single").eval()
    ct, patho = torch.randn(4, FEATURE_DIM), torch.randn(6, FEATURE_DIM)
    with torch.no_grad():
        g = torch.cat([model.heads["ct"].pool(ct), model.heads["patho"].pool(patho)])
        assert g.shape == (256,)
        torch.testing.assert_close(model.forward_features(ct, patho).joint, model.joint(g), rtol=0, atol=0)


@pytest.mark.parametrize("kind, k", [(v, k) for v in VARIANTS for k in (2, 3)])
def test_output_shapes(kind, k):
    out = _model(kind, k).eval()(_images(3, 0), _images(2, 1))
    assert out.joint.shape == (k,)


def test_empty_bags():
    model = _model("ct_only")
    with pytest.raises(EmptyBagError):
        model(torch.zeros((0, 3, SIDE, SIDE)), None)
    late = _model("late_single")
    with pytest.raises(EmptyBagError):
        late(_images(2, 0), torch.zeros((0, 3, SIDE, SIDE)))
    # mid fusion tolerates one empty modality
    mid = _model("mid_single").eval()
    assert mid(_images(2, 0), torch.zeros((0, 3, SIDE, SIDE))).joint.shape == (3,)


def test_fusion_helpers_reject_wrong_variant():
    with pytest.raises(ValueError):
        mid_fusion_forward(_images(2, 0), _images(2, 1), _model("late_multi"))
    with pytest.raises(ValueError):
        late_fusion_forward(_images(2, 0), _images(2, 1), _model("mid_multi"))


def test_freeze_contract_bitwise():
    model = _model("late_multi")
    before = {k: v.clone() for k, v in model.state_dict().items()}
    frozen = set(model.frozen_parameter_names())
    assert frozen and all(".prefix." in n for n in frozen)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=1e-2, weight_decay=0.01)
    model.train()
    loss = compute_loss("late_multi", 1, model(_images(3, 0), _images(3, 1))).l_total
    opt.zero_grad()
    loss.backward()
    opt.step()
    after = model.state_dict()
    for name, value in before.items():
        changed = not torch.equal(value, after[name])
        if ".prefix." in name or "running_" in name or "num_batches" in name:
            assert not changed, name
    assert not torch.equal(before["heads.ct.fc1.weight"], after["heads.ct.fc1.weight"])
    assert not torch.equal(before["extractors.ct.suffix.3.weight"], after["extractors.ct.suffix.3.weight"])


def test_batchnorm_stays_in_eval_mode():
    bb = build_backbone("stub", "random", 0)
    bb.train()
    assert not any(m.training for m in bb.modules() if isinstance(m, torch.nn.BatchNorm2d))


def test_both_extractors_share_initial_weights():
    model = _model("mid_multi")
    for (a, pa), (b, pb) in zip(model.extractors["ct"].named_parameters(), model.extractors["patho"].named_parameters()):
        assert a == b and torch.equal(pa, pb)


def test_loss_examples():
    uniform = ModelOutput(joint=torch.zeros(3))
    assert compute_loss("ct_only", 1, uniform).l_joint.item() == pytest.approx(math.log(3), abs=1e-6)
    two = ModelOutput(joint=torch.tensor([0.0, 2.0]))
    assert compute_loss("ct_only", 1, two).l_joint.item() == pytest.approx(0.1269, abs=1e-4)
    assert compute_loss("ct_only", 1, two).l_joint.item() == pytest.approx(math.log1p(math.exp(-2)), abs=1e-6)
    with pytest.raises(ValueError):
        compute_loss("ct_only", 3, uniform)


@pytest.mark.parametrize("kind", ["mid_multi", "late_multi"])
def test_multi_loss_is_sum(kind):
    model = _model(kind).eval()
    rep = compute_loss(kind, 2, model(_images(4, 0), _images(3, 1)))
    assert abs(rep.l_total.item() - (rep.l_joint + rep.l_ct + rep.l_patho).item()) <= 1e-6


def test_single_loss_ignores_branches():
    model = _model("mid_single").eval()
    rep = compute_loss("mid_single", 0, model(_images(4, 0), _images(3, 1)))
    assert rep.l_total is rep.l_joint


@pytest.mark.parametrize("kind, branch_grad", [("mid_single", False), ("mid_multi", True)])
def test_gradient_flow(kind, branch_grad):
    model = _model(kind)
    compute_loss(kind, 1, model(_images(4, 0), _images(3, 1))).l_total.backward()
    g = model.heads["ct"].fc_out.weight.grad
    assert (g is not None and bool(torch.any(g != 0))) == branch_grad
    assert torch.any(model.joint.fc1.weight.grad != 0)


def test_late_single_trains_branch_locals_but_not_branch_outputs():
    model = _model("late_single")
    compute_loss("late_single", 1, model(_images(4, 0), _images(3, 1))).l_total.backward()
    assert torch.any(model.heads["ct"].fc1.weight.grad != 0)
    assert model.heads["ct"].fc_out.weight.grad is None


def test_finite_difference_gradients_float64():
    torch.manual_seed(0)
    model = _model("mid_multi", dtype=torch.float64).eval()
    ct = _images(3, 5).double()
    patho = _images(2, 6).double()

    def loss_fn():
        return compute_loss("mid_multi", 2, model(ct, patho)).l_total

    params = {
        "extractors.ct.suffix.0.conv1.weight": None,
        "extractors.patho.suffix.3.weight": None,
        "heads.ct.fc1.weight": None,
        "joint.fc2.bias": None,
    }
    named = dict(model.named_parameters())
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    eps = 1e-6
    for name in params:
        p = named[name]
        flat_idx = rng.choice(p.numel(), size=min(8, p.numel()), replace=False)
        analytic, numeric = [], []
        for i in flat_idx:
            idx = np.unravel_index(i, p.shape)
            orig = p.data[idx].item()
            with torch.no_grad():
                p.data[idx] = orig + eps
                up = loss_fn().item()
                p.data[idx] = orig - eps
                down = loss_fn().item()
                p.data[idx] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(p.grad[idx].item())
        analytic, numeric = np.array(analytic), np.array(numeric)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel <= 1e-4, (name, rel)


def test_instances_to_tensor():
    ct = instances_to_tensor([np.full((4, 4), 0.25)] * 2)
    assert ct.shape == (2, 3, 4, 4) and torch.all(ct == 0.25)
    rgb = instances_to_tensor([np.full((4, 4, 3), 255, np.uint8)])
    assert rgb.shape == (1, 3, 4, 4) and torch.all(rgb == 1.0)
    assert instances_to_tensor([]).shape[0] == 0


def test_checkpoint_round_trip_and_bytes(tmp_path):
    model = _model("late_multi")
    header = {"task": "lobular", "epoch": 3, "seed": 0, "train_config_hash": "abc"}
    save_checkpoint(tmp_path / "a.ckpt", model, header)
    save_checkpoint(tmp_path / "b.ckpt", model, header)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    head, state = load_checkpoint(tmp_path / "a.ckpt")
    assert head["variant"] == "late_multi" and head["epoch"] == 3
    for k, v in model.state_dict().items():
        assert torch.equal(state[k], v)
