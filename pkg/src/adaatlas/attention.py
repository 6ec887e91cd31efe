"""Sequential dual attention: a channel gate followed by a spatial gate.

Features are ``(N, c, h, w, d)`` tensors (an unbatched ``(c, h, w, d)``
tensor is accepted too). The six parameter tensors of a block are exactly
what test-time adaptation is allowed to move when attention targets are
selected.
"""
from __future__ import annotations

import torch
from torch import nn

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wconv", "bconv")
CHANNEL_PARAMS = ("W1", "b1", "W2", "b2")
SPATIAL_PARAMS = ("Wconv", "bconv")


def _batched(f: torch.Tensor):
    if f.dim() == 4:
        return f.unsqueeze(0), True
    if f.dim() == 5:
        return f, False
    raise ValueError(f"feature volume must be 4D or 5D, got shape {tuple(f.shape)}")


def channel_scores(f: torch.Tensor, p) -> torch.Tensor:
    """Channel gate ``sigmoid(W2 relu(W1 avgpool(f) + b1) + b2)``, shape ``(N, c)``."""
    f, _ = _batched(f)
    c = f.shape[1]
    if p.W1.shape[1] != c or p.W2.shape[0] != c:
        raise ValueError(f"channel attention built for {p.W1.shape[1]} channels, got {c}")
    squeezed = f.mean(dim=(2, 3, 4))
    hidden = torch.relu(squeezed @ p.W1.T + p.b1)
    return torch.sigmoid(hidden @ p.W2.T + p.b2)


def spatial_scores(fc: torch.Tensor, p) -> torch.Tensor:
    """Spatial gate from a 1x1x1 convolution, shape ``(N, 1, h, w, d)``."""
    fc, _ = _batched(fc)
    if p.Wconv.shape[0] != fc.shape[1]:
        raise ValueError(f"spatial attention built for {p.Wconv.shape[0]} channels, got {fc.shape[1]}")
    logits = torch.einsum("k,nkhwd->nhwd", p.Wconv, fc) + p.bconv
    return torch.sigmoid(logits).unsqueeze(1)


def dual_attention_forward(f: torch.Tensor, p) -> torch.Tensor:
    fb, unbatched = _batched(f)
    a_ch = channel_scores(fb, p)
    fc = fb * a_ch[:, :, None, None, None]
    out = fc * spatial_scores(fc, p)
    return out[0] if unbatched else out


class DualAttention(nn.Module):
    """Parameter container and module wrapper around :func:`dual_attention_forward`."""

    def __init__(self, channels: int, reduction: int = 2, init_std: float = 0.1):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.reduction = reduction
        self.W1 = nn.Parameter(torch.randn(hidden, channels) * init_std)
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.W2 = nn.Parameter(torch.randn(channels, hidden) * init_std)
        self.b2 = nn.Parameter(torch.zeros(channels))
        self.Wconv = nn.Parameter(torch.randn(channels) * init_std)
        self.bconv = nn.Parameter(torch.zeros(1))

    def forward(self, f):
        return dual_attention_forward(f, self)

    @staticmethod
    def param_count(channels: int, reduction: int = 2) -> int:
        hidden = max(channels // reduction, 1)
        return 2 * channels * hidden + hidden + 2 * channels + 1
