import numpy as np
import pytest
import torch
from scipy import ndimage

from adaatlas.losses import atlas_loss
from adaatlas.registration import (
    DeformationField, RegNetConfig, build_regnet, reg_forward, smoothness_penalty, warp,
)


def _softmax_map(rng, c, shape):
    z = rng.normal(size=(c,) + shape)
    e = np.exp(z - z.max(axis=0))
    return torch.as_tensor(e / e.sum(axis=0))


def _random_heads(net, scale=0.05, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in (net.affine_head, net.flow_head):
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=g, dtype=layer.weight.dtype) * scale)
            layer.bias.copy_(torch.randn(layer.bias.shape, generator=g, dtype=layer.bias.dtype) * scale)
    return net


def _small_regnet(c=2, seed=0):
    return build_regnet(RegNetConfig(num_classes=c, depth=2, base_channels=4), seed).double().eval()


def test_untrained_regnet_is_identity():
    rng = np.random.default_rng(0)
    net = _small_regnet()
    p, a = _softmax_map(rng, 2, (4, 4, 4)), _softmax_map(rng, 2, (4, 4, 4))
    phi = reg_forward(net, p, a)
    assert torch.equal(phi.affine, torch.eye(3, 4, dtype=torch.float64)[None])
    assert torch.all(phi.displacement == 0)
    np.testing.assert_allclose(warp(p, phi).detach().numpy(), p.numpy(), atol=1e-6)


def test_reg_forward_pure_and_order_sensitive():
    rng = np.random.default_rng(1)
    net = _random_heads(_small_regnet())
    p, a = _softmax_map(rng, 2, (4, 4, 4)), _softmax_map(rng, 2, (4, 4, 4))
    f1, f2 = reg_forward(net, p, a), reg_forward(net, p, a)
    assert torch.equal(f1.affine, f2.affine) and torch.equal(f1.displacement, f2.displacement)
    g = reg_forward(net, a, p)
    assert not torch.equal(f1.displacement, g.displacement)


def test_reg_forward_shape_mismatch():
    net = _small_regnet()
    with pytest.raises(ValueError):
        reg_forward(net, torch.zeros(2, 4, 4, 4), torch.zeros(2, 4, 4, 6))


def test_identity_warp():
    rng = np.random.default_rng(2)
    p = _softmax_map(rng, 3, (5, 6, 7))
    out = warp(p, DeformationField.identity((5, 6, 7)))
    np.testing.assert_allclose(out.numpy(), p.numpy(), atol=1e-6)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_one_voxel_translation(axis):
    rng = np.random.default_rng(3)
    shape = (6, 6, 6)
    labels = rng.integers(0, 3, size=shape)
    p = torch.as_tensor(np.eye(3)[labels].transpose(3, 0, 1, 2))
    offset = [0.0, 0.0, 0.0]
    offset[axis] = 2.0 / (shape[axis] - 1)
    out = warp(p, DeformationField.translation(shape, offset)).numpy()
    expected = np.roll(p.numpy(), -1, axis=axis + 1)
    interior = [slice(None)] * 4
    interior[axis + 1] = slice(0, shape[axis] - 1)
    # pull-back by one voxel: exact up to float rounding of the sample position
    np.testing.assert_allclose(out[tuple(interior)], expected[tuple(interior)], atol=1e-12)
    np.testing.assert_array_equal(out[tuple(interior)].argmax(0), expected[tuple(interior)].argmax(0))


def test_warp_matches_map_coordinates_oracle():
    rng = np.random.default_rng(4)
    shape = (5, 6, 4)
    p = _softmax_map(rng, 2, shape)
    phi = DeformationField.identity(shape)
    phi.affine[0] += torch.as_tensor(rng.normal(scale=0.1, size=(3, 4)))
    phi.displacement += torch.as_tensor(rng.normal(scale=0.2, size=(1, 3) + shape))
    out = warp(p, phi).numpy()
    coords = phi.coordinates()[0].numpy()  # (H, W, D, 3) normalized
    idx = [(coords[..., k] + 1) / 2 * (shape[k] - 1) for k in range(3)]
    for c in range(2):
        ref = ndimage.map_coordinates(p[c].numpy(), idx, order=1, mode="nearest")
        np.testing.assert_allclose(out[c], ref, atol=1e-10)


def test_warp_preserves_channel_sums_everywhere():
    rng = np.random.default_rng(5)
    shape = (6, 6, 6)
    p = _softmax_map(rng, 3, shape)
    phi = DeformationField.identity(shape)
    phi.displacement += torch.as_tensor(rng.normal(scale=0.8, size=(1, 3) + shape))
    out = warp(p, phi)
    np.testing.assert_allclose(out.sum(0).numpy(), 1.0, atol=1e-5)


def test_warp_linearity():
    rng = np.random.default_rng(6)
    shape = (4, 5, 6)
    p, q = _softmax_map(rng, 2, shape), _softmax_map(rng, 2, shape)
    phi = DeformationField.identity(shape)
    phi.displacement += torch.as_tensor(rng.normal(scale=0.3, size=(1, 3) + shape))
    lhs = warp(0.3 * p + 1.7 * q, phi)
    rhs = 0.3 * warp(p, phi) + 1.7 * warp(q, phi)
    np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-6)


def test_warp_rejects_nonfinite_field():
    phi = DeformationField.identity((3, 3, 3))
    phi.displacement[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        warp(torch.ones(2, 3, 3, 3) / 2, phi)


def test_smoothness_zero_and_constant():
    phi = DeformationField.identity((3, 3, 3))
    assert smoothness_penalty(phi).item() == 0.0
    phi.displacement += 0.7
    phi.affine[0, 0, 3] = 5.0  # affine part is excluded
    assert smoothness_penalty(phi).item() == 0.0


def test_smoothness_ramp_hand_sum():
    s = 0.3
    phi = DeformationField.identity((3, 3, 3))
    phi.displacement[0, 0] = s * torch.arange(3, dtype=torch.float64)[:, None, None]
    # 2*3*3 forward differences along axis 0, each equal to s
    hand = sum(s ** 2 for _ in range(18)) / 18
    assert smoothness_penalty(phi).item() == pytest.approx(hand, rel=1e-12)


def test_atlas_loss_gradient_through_warp_and_regnet():
    rng = np.random.default_rng(7)
    net = _random_heads(_small_regnet(seed=2), scale=0.1, seed=3)
    a = _softmax_map(rng, 2, (4, 4, 4))
    p0 = _softmax_map(rng, 2, (4, 4, 4)).requires_grad_(True)

    def fn(p):
        phi = reg_forward(net, p, a)
        return atlas_loss(warp(p, phi), a)

    assert torch.autograd.gradcheck(fn, (p0,), eps=1e-6, atol=1e-8, rtol=1e-4)
