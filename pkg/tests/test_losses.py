import math

import numpy as np
import pytest
import torch

from adaatlas.losses import (
    SourceStats, atlas_loss, bireg_loss, bireg_terms, class_ratio_loss, compute_source_stats,
    eata_loss, entropy_loss, reg_loss, shape_moment_loss, soft_moments, supervised_loss,
)
from adaatlas.registration import RegNetConfig, build_regnet, reg_forward, warp
from adaatlas.volumes import one_hot


def _softmax(rng, c, shape):
    z = rng.normal(size=(c,) + shape) * 2
    e = np.exp(z - z.max(axis=0))
    return torch.as_tensor(e / e.sum(axis=0))


def _oh(labels, c):
    return torch.as_tensor(one_hot(np.asarray(labels), c))


# -- atlas loss ---------------------------------------------------------------

def test_atlas_loss_identical_one_hot():
    y = np.random.default_rng(0).integers(0, 3, size=(4, 4, 4))
    assert atlas_loss(_oh(y, 3), _oh(y, 3)).item() == pytest.approx(0.0, abs=1e-15)


def test_atlas_loss_orthogonal():
    a = _oh(np.zeros((3, 3, 3), int), 2)
    b = _oh(np.ones((3, 3, 3), int), 2)
    assert atlas_loss(a, b).item() == 1.0


def test_atlas_loss_two_voxel_hand_value():
    warped = torch.tensor([[1.0, 0.5], [0.0, 0.5]], dtype=torch.float64).reshape(2, 2, 1, 1)
    atlas = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=torch.float64).reshape(2, 2, 1, 1)
    expected = 1 - (1 + 1 / math.sqrt(2)) / 2
    assert atlas_loss(warped, atlas).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1464, abs=1e-4)


def test_atlas_loss_degenerate_voxel_convention():
    warped = torch.zeros(2, 1, 1, 2, dtype=torch.float64)
    warped[0, 0, 0, 0] = 1.0  # second voxel is the zero vector
    atlas = torch.zeros_like(warped)
    atlas[0] = 1.0
    assert atlas_loss(warped, atlas).item() == pytest.approx(0.5)
    w = warped.clone().requires_grad_(True)
    atlas_loss(w, atlas).backward()
    assert torch.all(torch.isfinite(w.grad))
    assert torch.all(w.grad[:, 0, 0, 1] == 0)


def test_atlas_loss_not_permutation_invariant():
    rng = np.random.default_rng(1)
    w, a = _softmax(rng, 2, (2, 2, 2)), _softmax(rng, 2, (2, 2, 2))
    perm = torch.as_tensor(rng.permutation(8))
    wp = w.reshape(2, -1)[:, perm].reshape(2, 2, 2, 2)
    assert atlas_loss(w, a).item() != pytest.approx(atlas_loss(wp, a).item(), abs=1e-6)


def test_atlas_loss_bounds_random():
    rng = np.random.default_rng(2)
    for _ in range(50):
        v = atlas_loss(_softmax(rng, 3, (3, 3, 3)), _softmax(rng, 3, (3, 3, 3))).item()
        assert 0.0 <= v <= 1.0


# -- registration dissimilarity --------------------------------------------------

def test_reg_loss_identical_and_disjoint():
    y = np.random.default_rng(3).integers(0, 3, size=(4, 4, 4))
    assert reg_loss(_oh(y, 3), _oh(y, 3)).item() < 1e-5
    a = np.zeros((4, 4, 4), int)
    b = np.zeros((4, 4, 4), int)
    a[:2, :2, :2] = 1
    b[2:, 2:, 2:] = 1
    from adaatlas.losses import soft_dice_per_class
    fg = 1 - soft_dice_per_class(_oh(a, 2)[None], _oh(b, 2)[None])[0, 1].item()
    assert fg == pytest.approx(1.0, abs=1e-6)


def test_reg_loss_half_overlap_equals_hard_dice():
    from adaatlas.losses import soft_dice_per_class
    from adaatlas.volumes import dice
    a = np.zeros((6, 6, 6), int)
    b = np.zeros((6, 6, 6), int)
    a[1:3, 1:3, 1:3] = 1
    b[2:4, 1:3, 1:3] = 1
    soft = soft_dice_per_class(_oh(a, 2)[None], _oh(b, 2)[None])[0, 1].item()
    assert 1 - soft == pytest.approx(0.5, abs=1e-6)
    assert soft == pytest.approx(dice(a, b, 2).per_class[1], abs=1e-6)


def test_bireg_identity_and_recomposition():
    rng = np.random.default_rng(4)
    net = build_regnet(RegNetConfig(num_classes=2, depth=2, base_channels=4)).double().eval()
    p = _softmax(rng, 2, (4, 4, 4))
    assert bireg_loss(p, p, net).item() < 1e-5
    with torch.no_grad():
        net.flow_head.weight.normal_(0, 0.1)
        net.affine_head.bias.normal_(0, 0.05)
    a = _softmax(rng, 2, (4, 4, 4))
    terms = bireg_terms(p, a, net)
    assert terms["to_subject"].item() >= 0 and terms["to_atlas"].item() >= 0
    manual = (reg_loss(p, warp(a, reg_forward(net, a, p)))
              + reg_loss(a, warp(p, reg_forward(net, p, a))))
    assert bireg_loss(p, a, net).item() == pytest.approx(manual.item(), rel=1e-12)


# -- supervised ------------------------------------------------------------

def test_supervised_near_zero_on_clipped_truth():
    y = np.random.default_rng(5).integers(0, 3, size=(4, 4, 4))
    p = _oh(y, 3).clamp(1e-7, 1 - 1e-7)
    assert supervised_loss(p, y).item() < 1e-5


def test_supervised_uniform_ce_term():
    y = np.zeros((2, 2, 2), int)
    y[0] = 1
    p = torch.full((2, 2, 2, 2), 0.5, dtype=torch.float64)
    from adaatlas.losses import soft_dice_per_class
    dice_term = 1 - soft_dice_per_class(p[None], _oh(y, 2)[None]).mean().item()
    assert supervised_loss(p, y).item() - dice_term == pytest.approx(math.log(2), abs=1e-12)


def test_supervised_recomposition():
    rng = np.random.default_rng(6)
    p = _softmax(rng, 3, (4, 4, 4)).numpy()
    y = rng.integers(0, 3, size=(4, 4, 4))
    ce = -np.mean(np.log(np.take_along_axis(p, y[None], axis=0)[0]))
    oh = one_hot(y, 3)
    dice_c = [(2 * (p[c] * oh[c]).sum() + 1e-6) / ((p[c] ** 2).sum() + (oh[c] ** 2).sum() + 1e-6)
              for c in range(3)]
    expected = ce + 1 - np.mean(dice_c)
    assert supervised_loss(torch.as_tensor(p), y).item() == pytest.approx(expected, rel=1e-10)


def test_supervised_invalid_labels():
    with pytest.raises(ValueError):
        supervised_loss(torch.full((2, 2, 2, 2), 0.5), np.full((2, 2, 2), 2))


# -- entropy family ---------------------------------------------------------

def test_entropy_values():
    y = np.random.default_rng(7).integers(0, 2, size=(3, 3, 3))
    assert entropy_loss(_oh(y, 2)).item() == 0.0
    assert entropy_loss(torch.full((2, 3, 3, 3), 0.5, dtype=torch.float64)).item() == pytest.approx(math.log(2), abs=1e-12)
    v = torch.tensor([0.9, 0.1], dtype=torch.float64).reshape(2, 1, 1, 1)
    assert entropy_loss(v).item() == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)), abs=1e-12)
    assert entropy_loss(v).item() == pytest.approx(0.3251, abs=1e-4)


def test_entropy_permutation_invariant():
    rng = np.random.default_rng(8)
    p = _softmax(rng, 3, (3, 3, 3))
    perm = torch.as_tensor(rng.permutation(27))
    pp = p.reshape(3, -1)[:, perm].reshape(3, 3, 3, 3)
    assert entropy_loss(p).item() == pytest.approx(entropy_loss(pp).item(), rel=1e-12)


def test_eata_cases():
    rng = np.random.default_rng(9)
    p = _softmax(rng, 2, (4, 4, 4))
    assert eata_loss(p, math.log(2) + 1e-3).item() == pytest.approx(entropy_loss(p).item(), rel=1e-12)
    assert eata_loss(p, float("inf")).item() == pytest.approx(entropy_loss(p).item(), rel=1e-12)
    uni = torch.full((2, 2, 2, 2), 0.5, dtype=torch.float64)
    assert eata_loss(uni, 1e-9).item() == 0.0
    # mask-and-average oracle
    pn = p.numpy()
    ent = -(pn * np.log(pn)).sum(axis=0)
    sel = ent[ent < 0.5]
    assert eata_loss(p, 0.5).item() == pytest.approx(sel.mean(), rel=1e-12)
    with pytest.raises(ValueError):
        eata_loss(p, 0.0)


# -- priors -------------------------------------------------------------------

def _stats(ratio, c=2):
    z = np.zeros((c, 3))
    return SourceStats(np.asarray(ratio, float), z, z, z, z)


def test_class_ratio_values():
    p = torch.full((2, 2, 2, 2), 0.5, dtype=torch.float64)
    assert class_ratio_loss(p, _stats([0.5, 0.5])).item() == pytest.approx(0.0, abs=1e-15)
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert class_ratio_loss(p, _stats([0.9, 0.1])).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.3681, abs=1e-4)
    rng = np.random.default_rng(10)
    for _ in range(20):
        tau = rng.dirichlet([1, 1, 1])
        assert class_ratio_loss(_softmax(rng, 3, (3, 3, 3)), _stats(tau, 3)).item() >= 0


def test_moments_single_voxel_and_symmetric():
    p = np.zeros((2, 5, 5, 5))
    p[0] = 1
    p[0, 1, 3, 4] = 0
    p[1, 1, 3, 4] = 1
    centroid, second = soft_moments(torch.as_tensor(p))
    # voxel (1, 3, 4) on a 5-grid: -1 + 2*i/4
    np.testing.assert_allclose(centroid[0, 1].numpy(), [-0.5, 0.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(second[0, 1].numpy(), 0.0, atol=1e-12)
    ball = np.zeros((5, 5, 5), int)
    ball[1:4, 1:4, 1:4] = 1
    centroid, _ = soft_moments(_oh(ball, 2))
    np.testing.assert_allclose(centroid[0, 1].numpy(), 0.0, atol=1e-12)


def test_shape_moment_zero_at_prior_and_positive_away():
    rng = np.random.default_rng(11)
    labels = [rng.integers(0, 2, size=(4, 4, 4)) for _ in range(3)]
    stats = compute_source_stats(labels, 2)
    centroid, second = soft_moments(_oh(labels[0], 2))
    exact = SourceStats(stats.class_ratio, centroid[0].numpy(), np.zeros((2, 3)),
                        second[0].numpy(), np.zeros((2, 3)))
    assert shape_moment_loss(_oh(labels[0], 2), exact).item() == pytest.approx(0.0, abs=1e-20)
    far = np.zeros((4, 4, 4), int)
    far[0, 0, 0] = 1
    assert shape_moment_loss(_oh(far, 2), exact).item() > 0


def test_source_stats_roundtrip_dict():
    labels = [np.random.default_rng(i).integers(0, 3, size=(4, 4, 4)) for i in range(3)]
    s = compute_source_stats(labels, 3)
    assert s.class_ratio.sum() == pytest.approx(1.0)
    s2 = SourceStats.from_dict(s.to_dict())
    for k in ("class_ratio", "centroid_mean", "centroid_tol", "moment_mean", "moment_tol"):
        np.testing.assert_array_equal(getattr(s, k), getattr(s2, k))


@pytest.mark.parametrize("name", ["atlas", "reg", "entropy", "class_ratio", "shape", "supervised"])
def test_loss_gradients_match_finite_differences(name):
    rng = np.random.default_rng(12)
    a = _softmax(rng, 3, (3, 3, 3))
    y = rng.integers(0, 3, size=(3, 3, 3))
    stats = compute_source_stats([y, rng.integers(0, 3, size=(3, 3, 3))], 3)
    stats.centroid_tol[:] = 0.0
    stats.moment_tol[:] = 0.0
    fns = {
        "atlas": lambda p: atlas_loss(p, a),
        "reg": lambda p: reg_loss(p, a),
        "entropy": entropy_loss,
        "class_ratio": lambda p: class_ratio_loss(p, stats),
        "shape": lambda p: shape_moment_loss(p, stats),
        "supervised": lambda p: supervised_loss(p, y),
    }
    p0 = _softmax(rng, 3, (3, 3, 3)).requires_grad_(True)
    assert torch.autograd.gradcheck(fns[name], (p0,), eps=1e-6, atol=1e-8, rtol=1e-4)
