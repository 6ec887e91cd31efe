"""3D U-Net segmentation network with optional dual attention blocks."""
from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import CHANNEL_PARAMS, SPATIAL_PARAMS, DualAttention

BLOCK_TYPES = ("none", "norm_only", "dual_attention")
TARGETS = ("norm", "channel_only", "spatial_only", "dual_attention", "all")


class ConfigError(ValueError):
    pass


@dataclass
class SegNetConfig:
    num_classes: int = 3
    in_channels: int = 1
    depth: int = 3
    base_channels: int = 8
    block_type: str = "dual_attention"
    reduction: int = 2

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.base_channels < 2:
            raise ConfigError("base_channels must be >= 2")
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    def to_dict(self):
        return asdict(self)


class ChannelNorm(nn.Module):
    """Batch normalization that can switch to per-sample statistics.

    Training mode normalizes with batch statistics and updates the running
    buffers. Evaluation mode uses the running buffers unless
    ``sample_stats`` is set, in which case each sample is normalized over
    its own spatial extent and the buffers are left untouched.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.momentum = momentum
        self.eps = eps
        self.sample_stats = False

    def forward(self, x):
        if self.training:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                training=True, momentum=self.momentum, eps=self.eps)
        if self.sample_stats:
            return F.instance_norm(x, weight=self.weight, bias=self.bias, eps=self.eps)
        return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                            training=False, eps=self.eps)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = ChannelNorm(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = ChannelNorm(cout)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class UNet3D(nn.Module):
    """Encoder-decoder backbone shared by the segmentation and registration nets.

    ``forward_features`` returns the full-resolution decoder output and the
    bottleneck features; heads are added by subclasses.
    """

    def __init__(self, in_channels: int, base_channels: int, depth: int,
                 attention: bool = False, reduction: int = 2):
        super().__init__()
        chans = [base_channels * 2 ** i for i in range(depth)]
        self.depth = depth
        self.channels = chans
        self.enc = nn.ModuleList()
        cin = in_channels
        for c in chans:
            self.enc.append(ConvBlock(cin, c))
            cin = c
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for lvl in reversed(range(depth - 1)):
            self.up.append(nn.Conv3d(chans[lvl + 1], chans[lvl], 3, padding=1))
            self.dec.append(ConvBlock(2 * chans[lvl], chans[lvl]))
        # one attention block after every conv block, encoder first
        self.attn = None
        if attention:
            block_chans = chans + [chans[lvl] for lvl in reversed(range(depth - 1))]
            self.attn = nn.ModuleList(DualAttention(c, reduction) for c in block_chans)

    def _gate(self, i, x):
        return x if self.attn is None else self.attn[i](x)

    def check_shape(self, shape):
        factor = 2 ** (self.depth - 1)
        bad = [s for s in shape if s % factor]
        if bad:
            pads = [(-s) % factor for s in shape]
            raise ValueError(
                f"spatial shape {tuple(shape)} must be divisible by {factor}; "
                f"pad each axis by {pads} voxels"
            )

    def forward_features(self, x):
        self.check_shape(x.shape[2:])
        skips = []
        k = 0
        for i, block in enumerate(self.enc):
            if i > 0:
                x = F.max_pool3d(x, 2)
            x = self._gate(k, block(x))
            k += 1
            skips.append(x)
        bottleneck = x
        for up, block, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
            x = up(x)
            x = self._gate(k, block(torch.cat([x, skip], dim=1)))
            k += 1
        return x, bottleneck


class SegNet(UNet3D):
    def __init__(self, cfg: SegNetConfig):
        super().__init__(cfg.in_channels, cfg.base_channels, cfg.depth,
                         attention=cfg.block_type == "dual_attention", reduction=cfg.reduction)
        self.cfg = cfg
        self.head = nn.Conv3d(self.channels[0], cfg.num_classes, 1)

    def logits(self, x):
        feats, _ = self.forward_features(x)
        return self.head(feats)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)

    def norm_modules(self):
        return [m for m in self.modules() if isinstance(m, ChannelNorm)]

    def set_sample_stats(self, flag: bool):
        for m in self.norm_modules():
            m.sample_stats = flag


def build_segnet(cfg: SegNetConfig, seed: int = 0) -> SegNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SegNet(cfg)
    return net


def seg_forward(net: SegNet, x) -> np.ndarray:
    """Evaluation-mode forward of a single ``(1, H, W, D)`` volume to a ProbMap."""
    dtype = next(net.parameters()).dtype
    xt = torch.as_tensor(np.asarray(x), dtype=dtype)
    if xt.dim() != 4 or xt.shape[0] != net.cfg.in_channels:
        raise ValueError(f"expected a ({net.cfg.in_channels}, H, W, D) volume, got {tuple(xt.shape)}")
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            p = net(xt[None])[0]
    finally:
        net.train(was_training)
    return p.numpy()


@dataclass
class ParamPartition:
    target: str
    adaptable: list = field(default_factory=list)
    frozen: list = field(default_factory=list)


def _norm_names(net):
    names = []
    for mod_name, m in net.named_modules():
        if isinstance(m, ChannelNorm):
            names += [f"{mod_name}.weight", f"{mod_name}.bias"]
    return set(names)


def _attn_names(net, which):
    if net.attn is None:
        return set()
    return {f"attn.{i}.{p}" for i in range(len(net.attn)) for p in which}


def partition_params(net: SegNet, target: str) -> ParamPartition:
    if target not in TARGETS:
        raise ConfigError(f"unknown adaptation target {target!r}; choose from {TARGETS}")
    if target in ("channel_only", "spatial_only", "dual_attention") and net.attn is None:
        raise ConfigError(f"target {target!r} requires a dual_attention network, "
                          f"got block_type {net.cfg.block_type!r}")
    names = [n for n, _ in net.named_parameters()]
    if target == "all":
        chosen = set(names)
    elif target == "norm":
        chosen = _norm_names(net)
    elif target == "channel_only":
        chosen = _attn_names(net, CHANNEL_PARAMS)
    elif target == "spatial_only":
        chosen = _attn_names(net, SPATIAL_PARAMS)
    else:
        chosen = _attn_names(net, CHANNEL_PARAMS + SPATIAL_PARAMS)
    return ParamPartition(
        target=target,
        adaptable=[n for n in names if n in chosen],
        frozen=[n for n in names if n not in chosen],
    )
