"""Atlas registration network, pull-back warping and deformation smoothness.

Deformations live in normalized coordinates: voxel index ``0`` of an axis
maps to ``-1`` and index ``n-1`` to ``+1``. A field maps every voxel ``v``
of the fixed grid to the sampling location ``A[:, :3] v + A[:, 3] + u(v)``
in the moving volume.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .segnet import ConfigError, UNet3D


@dataclass
class RegNetConfig:
    num_classes: int = 3
    depth: int = 3
    base_channels: int = 8
    displacement_scale: float = 0.2
    # bound on every affine entry's deviation from the identity; an unbounded
    # affine lets joint atlas training collapse the atlas onto a zoomed-in patch
    affine_scale: float = 0.25

    def __post_init__(self):
        if self.depth < 2 or self.base_channels < 2:
            raise ConfigError("registration net needs depth >= 2 and base_channels >= 2")
        if self.displacement_scale <= 0 or self.affine_scale < 0:
            raise ConfigError("displacement_scale must be > 0 and affine_scale >= 0")

    @property
    def in_channels(self):
        return 2 * self.num_classes

    def to_dict(self):
        return asdict(self)


@dataclass
class DeformationField:
    affine: torch.Tensor        # (N, 3, 4)
    displacement: torch.Tensor  # (N, 3, H, W, D)

    @classmethod
    def identity(cls, shape, batch=1, dtype=torch.float64):
        affine = torch.zeros(batch, 3, 4, dtype=dtype)
        affine[:, :, :3] = torch.eye(3, dtype=dtype)
        return cls(affine, torch.zeros((batch, 3) + tuple(shape), dtype=dtype))

    @classmethod
    def translation(cls, shape, offset, batch=1, dtype=torch.float64):
        """Rigid shift by ``offset`` (normalized units, axis order H, W, D)."""
        phi = cls.identity(shape, batch, dtype)
        phi.affine[:, :, 3] = torch.as_tensor(offset, dtype=dtype)
        return phi

    @property
    def shape(self):
        return tuple(self.displacement.shape[2:])

    def is_finite(self):
        return bool(torch.isfinite(self.affine).all() and torch.isfinite(self.displacement).all())

    def coordinates(self) -> torch.Tensor:
        """Sampling locations ``(N, H, W, D, 3)`` in normalized (H, W, D) order."""
        dtype = self.displacement.dtype
        axes = [torch.linspace(-1.0, 1.0, n, dtype=dtype) for n in self.shape]
        base = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)
        lin = self.affine[:, :, :3]
        shift = self.affine[:, :, 3]
        moved = torch.einsum("nij,hwdj->nhwdi", lin, base) + shift[:, None, None, None, :]
        return moved + self.displacement.permute(0, 2, 3, 4, 1)

    def detach(self):
        return DeformationField(self.affine.detach(), self.displacement.detach())


def _batched(p):
    return (p.unsqueeze(0), True) if p.dim() == 4 else (p, False)


def warp(p: torch.Tensor, phi: DeformationField) -> torch.Tensor:
    """Trilinear pull-back resampling of every channel with border clamping."""
    if not phi.is_finite():
        raise ValueError("deformation field has non-finite entries")
    pb, unbatched = _batched(p)
    if tuple(pb.shape[2:]) != phi.shape:
        raise ValueError(f"volume grid {tuple(pb.shape[2:])} does not match field grid {phi.shape}")
    if pb.shape[0] != phi.affine.shape[0]:
        raise ValueError("batch sizes of volume and field differ")
    # grid_sample wants (x, y, z) = (D, W, H) ordering
    grid = phi.coordinates().flip(-1).to(pb.dtype)
    out = F.grid_sample(pb, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[0] if unbatched else out


def smoothness_penalty(phi: DeformationField) -> torch.Tensor:
    """Mean squared forward-difference gradient magnitude of the displacement."""
    u = phi.displacement
    total = u.new_zeros(())
    for axis in (2, 3, 4):
        if u.shape[axis] < 2:
            continue
        diff = torch.diff(u, dim=axis)
        total = total + diff.pow(2).sum(dim=1).mean()
    return total


class RegNet(UNet3D):
    """Encoder-decoder over ``moving (+) fixed`` with affine and dense heads.

    Both heads are zero-initialized so an untrained network emits the
    identity deformation.
    """

    def __init__(self, cfg: RegNetConfig):
        super().__init__(cfg.in_channels, cfg.base_channels, cfg.depth)
        self.cfg = cfg
        self.affine_head = nn.Linear(self.channels[-1], 12)
        self.flow_head = nn.Conv3d(self.channels[0], 3, 3, padding=1)
        for layer in (self.affine_head, self.flow_head):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, moving, fixed) -> DeformationField:
        if moving.shape != fixed.shape:
            raise ValueError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} differ")
        feats, bottleneck = self.forward_features(torch.cat([moving, fixed], dim=1))
        n = moving.shape[0]
        eye = torch.eye(3, 4, dtype=moving.dtype).expand(n, 3, 4)
        raw = self.affine_head(bottleneck.mean(dim=(2, 3, 4))).view(n, 3, 4)
        affine = eye + torch.tanh(raw) * self.cfg.affine_scale
        disp = torch.tanh(self.flow_head(feats)) * self.cfg.displacement_scale
        return DeformationField(affine, disp)


def build_regnet(cfg: RegNetConfig, seed: int = 0) -> RegNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = RegNet(cfg)
    return net


def reg_forward(net: RegNet, moving: torch.Tensor, fixed: torch.Tensor) -> DeformationField:
    """Deformation taking ``moving`` onto the grid of ``fixed``.

    Accepts batched ``(N, C, H, W, D)`` or unbatched ``(C, H, W, D)`` maps;
    ``fixed`` is broadcast over the batch when it is unbatched.
    """
    mb, _ = _batched(moving)
    fb, _ = _batched(fixed)
    if tuple(mb.shape[1:]) != tuple(fb.shape[1:]):
        raise ValueError(f"moving {tuple(mb.shape[1:])} and fixed {tuple(fb.shape[1:])} differ")
    if fb.shape[0] == 1 and mb.shape[0] > 1:
        fb = fb.expand_as(mb)
    elif mb.shape[0] == 1 and fb.shape[0] > 1:
        mb = mb.expand_as(fb)
    return net(mb, fb)
