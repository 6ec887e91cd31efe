"""Training and test-time objectives.

Probability maps are torch tensors shaped ``(N, C, H, W, D)``; unbatched
``(C, H, W, D)`` inputs are promoted to a batch of one. Every loss
returns a scalar averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .registration import reg_forward, warp

DICE_EPS = 1e-6
COS_EPS = 1e-12
CE_CLIP = 1e-7
RATIO_CLIP = 1e-8


def _t(a, dtype=None):
    if torch.is_tensor(a):
        return a if dtype is None else a.to(dtype)
    return torch.tensor(np.asarray(a), dtype=dtype)


def _b(p):
    p = _t(p)
    if p.dim() == 4:
        return p.unsqueeze(0)
    if p.dim() != 5:
        raise ValueError(f"expected a (C, H, W, D) or (N, C, H, W, D) map, got {tuple(p.shape)}")
    return p


def _same_shape(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"shape mismatch: {tuple(a.shape[1:])} vs {tuple(b.shape[1:])}")


def voxel_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of the channel vectors at each voxel, 0 when degenerate."""
    dot = (a * b).sum(dim=1)
    na2 = a.pow(2).sum(dim=1)
    nb2 = b.pow(2).sum(dim=1)
    ok = (na2 >= COS_EPS ** 2) & (nb2 >= COS_EPS ** 2)
    # substitute before the sqrt so masked voxels carry a zero (not NaN) gradient
    one = torch.ones_like(na2)
    denom = torch.where(ok, na2, one).sqrt() * torch.where(ok, nb2, one).sqrt()
    return torch.where(ok, dot / denom, torch.zeros_like(dot))


def atlas_loss(warped, atlas) -> torch.Tensor:
    """One minus the voxel-averaged cosine similarity to the atlas."""
    w = _b(warped)
    a = _b(_t(atlas, w.dtype))
    _same_shape(w, a)
    return 1.0 - voxel_cosine(w, a.expand_as(w)).mean()


def soft_dice_per_class(a, b, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice ``(2 sum ab + eps) / (sum a^2 + sum b^2 + eps)``, shape ``(N, C)``."""
    dims = (2, 3, 4)
    inter = (a * b).sum(dim=dims)
    denom = a.pow(2).sum(dim=dims) + b.pow(2).sum(dim=dims)
    return (2.0 * inter + eps) / (denom + eps)


def reg_loss(a, b) -> torch.Tensor:
    a, b = _b(a), _b(b)
    _same_shape(a, b)
    a, b = torch.broadcast_tensors(a, b)
    return (1.0 - soft_dice_per_class(a, b).mean(dim=1)).mean()


def bireg_terms(pred, atlas, regnet, detach_subject_term: bool = False) -> dict:
    """Both directional registration terms and the fields that produced them.

    ``to_subject`` compares ``pred`` with the atlas warped into subject space;
    ``to_atlas`` compares the atlas with ``pred`` warped into atlas space.
    With ``detach_subject_term`` the first term sees a detached prediction.
    """
    pred = _b(pred)
    atl = _b(_t(atlas, pred.dtype)).expand_as(pred)
    p_sub = pred.detach() if detach_subject_term else pred
    phi_a2i = reg_forward(regnet, atl, p_sub)
    phi_i2a = reg_forward(regnet, pred, atl)
    return {
        "to_subject": reg_loss(p_sub, warp(atl, phi_a2i)),
        "to_atlas": reg_loss(atl, warp(pred, phi_i2a)),
        "phi_a2i": phi_a2i,
        "phi_i2a": phi_i2a,
    }


def bireg_loss(pred, atlas, regnet) -> torch.Tensor:
    t = bireg_terms(pred, atlas, regnet)
    return t["to_subject"] + t["to_atlas"]


def _labels_b(gt):
    gt = torch.as_tensor(np.asarray(gt) if not torch.is_tensor(gt) else gt)
    if gt.dim() == 3:
        gt = gt.unsqueeze(0)
    if gt.dim() != 4:
        raise ValueError(f"expected (H, W, D) or (N, H, W, D) labels, got {tuple(gt.shape)}")
    return gt.long()


def supervised_loss(pred, gt) -> torch.Tensor:
    """Voxel-mean cross-entropy plus multi-class soft-Dice dissimilarity."""
    p = _b(pred)
    g = _labels_b(gt)
    c = p.shape[1]
    if g.shape[0] != p.shape[0] or g.shape[1:] != p.shape[2:]:
        raise ValueError(f"labels {tuple(g.shape)} do not match prediction {tuple(p.shape)}")
    if g.min() < 0 or g.max() >= c:
        raise ValueError(f"labels must lie in [0, {c - 1}]")
    picked = p.gather(1, g.unsqueeze(1)).squeeze(1)
    ce = -torch.log(picked.clamp_min(CE_CLIP)).mean()
    onehot = torch.nn.functional.one_hot(g, c).permute(0, 4, 1, 2, 3).to(p.dtype)
    return ce + (1.0 - soft_dice_per_class(p, onehot).mean(dim=1)).mean()


def voxel_entropy(pred) -> torch.Tensor:
    p = _b(pred)
    return -torch.xlogy(p, p).sum(dim=1)


def entropy_loss(pred) -> torch.Tensor:
    return voxel_entropy(pred).mean()


def default_eata_threshold(num_classes: int) -> float:
    return 0.4 * math.log(num_classes)


def eata_loss(pred, threshold: float) -> torch.Tensor:
    """Mean entropy over voxels whose entropy is below ``threshold``."""
    if not threshold > 0:
        raise ValueError("entropy threshold must be positive")
    ent = voxel_entropy(pred)
    mask = (ent < threshold).detach()
    if not mask.any():
        return ent.sum() * 0.0
    return ent[mask].mean()


@dataclass
class SourceStats:
    """Source-domain shape statistics used by the class-ratio and moment losses.

    Arrays are indexed by class; row 0 (background) of the moment arrays is
    carried along but unused.
    """
    class_ratio: np.ndarray     # (C,)
    centroid_mean: np.ndarray   # (C, 3)
    centroid_tol: np.ndarray    # (C, 3)
    moment_mean: np.ndarray     # (C, 3)
    moment_tol: np.ndarray      # (C, 3)

    def __post_init__(self):
        for name in ("class_ratio", "centroid_mean", "centroid_tol", "moment_mean", "moment_tol"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"SourceStats.{name} has non-finite entries")
            setattr(self, name, arr)
        if abs(self.class_ratio.sum() - 1.0) > 1e-6:
            raise ValueError("class_ratio must sum to 1")

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def normalized_grid(shape, dtype=torch.float64) -> torch.Tensor:
    axes = [torch.linspace(-1.0, 1.0, n, dtype=dtype) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)  # (3, H, W, D)


def soft_moments(pred):
    """Probability-weighted centroid and per-axis central second moments.

    Returns two ``(N, C, 3)`` tensors.
    """
    p = _b(pred)
    grid = normalized_grid(p.shape[2:], p.dtype)
    mass = p.sum(dim=(2, 3, 4)).clamp_min(RATIO_CLIP)
    centroid = torch.einsum("nchwd,ahwd->nca", p, grid) / mass[..., None]
    sq = torch.einsum("nchwd,ahwd->nca", p, grid.pow(2)) / mass[..., None]
    second = (sq - centroid.pow(2)).clamp_min(0.0)
    return centroid, second


def compute_source_stats(labels, num_classes: int) -> SourceStats:
    labels = [np.asarray(l) for l in labels]
    onehots = torch.stack([
        torch.nn.functional.one_hot(torch.as_tensor(l, dtype=torch.long), num_classes)
        .permute(3, 0, 1, 2).double() for l in labels
    ])
    ratios = onehots.mean(dim=(2, 3, 4)).mean(dim=0).numpy()
    centroid, second = soft_moments(onehots)
    centroid, second = centroid.numpy(), second.numpy()
    return SourceStats(
        class_ratio=ratios / ratios.sum(),
        centroid_mean=centroid.mean(axis=0),
        centroid_tol=centroid.std(axis=0),
        moment_mean=second.mean(axis=0),
        moment_tol=second.std(axis=0),
    )


def class_ratio_loss(pred, stats: SourceStats) -> torch.Tensor:
    """KL divergence from the source class-ratio prior to the predicted ratios."""
    p = _b(pred)
    tau = torch.as_tensor(stats.class_ratio, dtype=p.dtype)
    rho = p.mean(dim=(2, 3, 4)).clamp_min(RATIO_CLIP)
    kl = torch.xlogy(tau, tau) - tau * torch.log(rho)
    return kl.sum(dim=1).mean()


def shape_moment_loss(pred, stats: SourceStats) -> torch.Tensor:
    """Squared hinge on moment deviations beyond the source tolerance, summed over classes."""
    p = _b(pred)
    centroid, second = soft_moments(p)
    stat = torch.cat([centroid, second], dim=2)[:, 1:]
    prior = torch.as_tensor(np.concatenate([stats.centroid_mean, stats.moment_mean], axis=1)[1:],
                            dtype=p.dtype)
    tol = torch.as_tensor(np.concatenate([stats.centroid_tol, stats.moment_tol], axis=1)[1:],
                          dtype=p.dtype)
    excess = torch.relu((stat - prior).abs() - tol)
    return excess.pow(2).mean(dim=2).sum(dim=1).mean()
