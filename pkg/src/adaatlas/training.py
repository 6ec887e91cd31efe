"""Joint source-domain training of segmentation net, registration net and atlas.

Also home of the ``.aackpt`` checkpoint container::

    offset  size  field
    0       8     magic b"AACKPT1\\n"
    8       4     manifest length M (uint32, little-endian)
    12      M     UTF-8 JSON manifest
    12+M    ...   concatenated ``.aavol`` blobs, located via the manifest's
                  ``tensors`` index (component, name, offset, nbytes, shape)

Tensors with more than four axes are stored flattened; the manifest
carries their true shape. The manifest also records a SHA-256 digest of
the blob region.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .atlas import Atlas, atlas_init, atlas_update
from .losses import SourceStats, bireg_terms, compute_source_stats, supervised_loss
from .registration import (
    DeformationField, RegNetConfig, build_regnet, reg_forward, smoothness_penalty, warp,
)
from .segnet import SegNetConfig, build_segnet
from .volumes import ContainerError, argmax_labels, decode_array, dice, encode_array

log = logging.getLogger(__name__)

CKPT_MAGIC = b"AACKPT1\n"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    # small batches: the registration net needs many updates, not large ones
    batch_size: int = 2
    lr: float = 3e-3
    lr_half_life: float = 60.0
    lambda_smooth: float = 0.1
    lambda_bireg: float = 1.0
    atlas_momentum: float = 0.9
    atlas_recenter: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "lr_half_life"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_smooth < 0 or self.lambda_bireg < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self):
        return asdict(self)


PROFILES = {
    "desk": TrainConfig(),
    "paper-scale": TrainConfig(epochs=800, batch_size=8, lr=1e-3, lr_half_life=400.0),
}


@dataclass
class Checkpoint:
    seg_cfg: SegNetConfig
    seg_state: dict
    reg_cfg: RegNetConfig
    reg_state: dict
    atlas: Atlas
    source_stats: SourceStats
    manifest: dict = field(default_factory=dict)

    def segnet(self):
        net = build_segnet(self.seg_cfg)
        net.load_state_dict(self.seg_state)
        return net.to(_state_dtype(self.seg_state))

    def regnet(self):
        net = build_regnet(self.reg_cfg)
        net.load_state_dict(self.reg_state)
        return net.to(_state_dtype(self.reg_state))

    @property
    def grid_shape(self):
        return self.atlas.shape


def _state_dtype(state):
    for v in state.values():
        if v.is_floating_point():
            return v.dtype
    return torch.float32


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffled subject order for one epoch, independent of any global RNG."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _batches(order, batch_size):
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def warp_labels_to_atlas(regnet, labels, atlas: Atlas, dtype=torch.float32, recenter: bool = False):
    """One-hot ground truth registered into atlas space with the current regnet.

    With ``recenter`` the mean deformation over the set is removed first
    (affine deviation and dense displacement), so the average subject-to-atlas
    map is the identity and the atlas cannot drift or inflate from one epoch
    to the next.
    """
    c = atlas.num_classes
    a = torch.tensor(atlas.probs, dtype=dtype)
    regnet.eval()
    with torch.no_grad():
        ohs = [torch.nn.functional.one_hot(torch.as_tensor(y), c).permute(3, 0, 1, 2).to(dtype)
               for y in labels]
        fields = [reg_forward(regnet, oh, a) for oh in ohs]
        if recenter:
            eye = torch.eye(3, 4, dtype=dtype)
            mean_aff = torch.stack([f.affine for f in fields]).mean(dim=0) - eye
            mean_disp = torch.stack([f.displacement for f in fields]).mean(dim=0)
            fields = [DeformationField(f.affine - mean_aff, f.displacement - mean_disp) for f in fields]
        return [warp(oh[None], phi)[0].double().numpy() for oh, phi in zip(ohs, fields)]


def train_joint(images, labels, cfg: TrainConfig, seg_cfg: SegNetConfig | None = None,
                reg_cfg: RegNetConfig | None = None, holdout=None, dtype=torch.float32,
                on_epoch=None) -> Checkpoint:
    """Train S and A jointly on source subjects and build the atlas.

    ``holdout`` is an optional ``(image, labels)`` pair on which the
    bidirectional registration loss is logged after every epoch.
    ``on_epoch(epoch, atlas)`` is called after each atlas update.
    """
    if len(images) < 1 or len(images) != len(labels):
        raise ValueError("need matching, non-empty image and label lists")
    shapes = {np.shape(y) for y in labels} | {np.shape(x)[1:] for x in images}
    if len(shapes) != 1:
        raise ValueError(f"subjects do not share one grid shape: {sorted(shapes)}")
    c = int(max(int(np.max(y)) for y in labels)) + 1
    seg_cfg = seg_cfg or SegNetConfig()
    reg_cfg = reg_cfg or RegNetConfig(num_classes=seg_cfg.num_classes)
    if c > seg_cfg.num_classes or reg_cfg.num_classes != seg_cfg.num_classes:
        raise ValueError("class counts of labels, segnet and regnet disagree")
    c = seg_cfg.num_classes

    segnet = build_segnet(seg_cfg, cfg.seed).to(dtype)
    regnet = build_regnet(reg_cfg, cfg.seed + 1).to(dtype)
    use_reg = cfg.lambda_bireg > 0 or cfg.lambda_smooth > 0
    params = list(segnet.parameters()) + (list(regnet.parameters()) if use_reg else [])
    opt = torch.optim.Adam(params, lr=cfg.lr)

    x_all = torch.as_tensor(np.stack(images), dtype=dtype)
    y_all = torch.as_tensor(np.stack(labels), dtype=torch.long)
    atlas = atlas_init(labels, c, cfg.atlas_momentum)
    curves = {k: [] for k in ("total", "supervised", "bireg", "smooth", "lr", "atlas_simplex_error")}
    if holdout is not None:
        curves["holdout_bireg"] = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 ** (epoch / cfg.lr_half_life)
        for g in opt.param_groups:
            g["lr"] = lr
        segnet.train()
        regnet.train()
        a_t = torch.tensor(atlas.probs, dtype=dtype)
        sums = dict(total=0.0, supervised=0.0, bireg=0.0, smooth=0.0)
        steps = 0
        for idx in _batches(epoch_order(cfg.seed, epoch, len(images)), cfg.batch_size):
            idx = torch.as_tensor(idx)
            pred = segnet(x_all[idx])
            sup = supervised_loss(pred, y_all[idx])
            loss = sup
            breg = smooth = torch.zeros((), dtype=dtype)
            if use_reg:
                t = bireg_terms(pred, a_t, regnet, detach_subject_term=True)
                breg = t["to_subject"] + t["to_atlas"]
                smooth = smoothness_penalty(t["phi_i2a"]) + smoothness_penalty(t["phi_a2i"])
                loss = loss + cfg.lambda_bireg * breg + cfg.lambda_smooth * smooth
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {idx.tolist()}: "
                    f"supervised={sup.item():.4g} bireg={breg.item():.4g} smooth={smooth.item():.4g}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in (("total", loss), ("supervised", sup), ("bireg", breg), ("smooth", smooth)):
                sums[k] += float(v.detach())
            steps += 1

        atlas = atlas_update(atlas, warp_labels_to_atlas(regnet, labels, atlas, dtype,
                                                          cfg.atlas_recenter))
        for k in sums:
            curves[k].append(sums[k] / steps)
        curves["lr"].append(lr)
        curves["atlas_simplex_error"].append(atlas.simplex_error())
        if holdout is not None:
            curves["holdout_bireg"].append(_holdout_bireg(segnet, regnet, atlas, holdout, dtype))
        if on_epoch is not None:
            on_epoch(epoch, atlas)
        log.info("epoch %d: total=%.4f sup=%.4f bireg=%.4f", epoch, curves["total"][-1],
                 curves["supervised"][-1], curves["bireg"][-1])

    segnet.eval()
    regnet.eval()
    train_dice = _train_dice(segnet, x_all, labels, c)
    manifest = {
        "train_config": cfg.to_dict(),
        "epochs_completed": cfg.epochs,
        "curves": curves,
        "train_mean_fg_dice": train_dice,
        "dtype": str(dtype).replace("torch.", ""),
    }
    return Checkpoint(
        seg_cfg=seg_cfg,
        seg_state={k: v.detach().clone() for k, v in segnet.state_dict().items()},
        reg_cfg=reg_cfg,
        reg_state={k: v.detach().clone() for k, v in regnet.state_dict().items()},
        atlas=atlas,
        source_stats=compute_source_stats(labels, c),
        manifest=manifest,
    )


def _holdout_bireg(segnet, regnet, atlas, holdout, dtype):
    x, _ = holdout
    segnet.eval()
    regnet.eval()
    with torch.no_grad():
        pred = segnet(torch.as_tensor(np.asarray(x), dtype=dtype)[None])
        t = bireg_terms(pred, torch.tensor(atlas.probs, dtype=dtype), regnet)
    segnet.train()
    regnet.train()
    return float(t["to_subject"] + t["to_atlas"])


def _train_dice(segnet, x_all, labels, c):
    with torch.no_grad():
        probs = segnet(x_all).double().numpy()
    return float(np.mean([dice(argmax_labels(p), y, c).mean_fg for p, y in zip(probs, labels)]))


# -- checkpoint IO ----------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    blobs = []
    index = []
    offset = 0

    def add(component, name, arr):
        nonlocal offset
        arr = np.asarray(arr)
        shape = list(arr.shape)
        data = encode_array(arr.reshape(-1) if arr.ndim > 4 else arr)
        index.append({"component": component, "name": name, "shape": shape,
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    for comp, state in (("segnet", ckpt.seg_state), ("regnet", ckpt.reg_state)):
        for name, t in state.items():
            add(comp, name, t.detach().cpu().numpy())
    add("atlas", "probs", ckpt.atlas.probs)
    payload = b"".join(blobs)
    manifest = {
        "format": "AACKPT1",
        "format_version": CKPT_VERSION,
        "package_version": __version__,
        "segnet_config": ckpt.seg_cfg.to_dict(),
        "regnet_config": ckpt.reg_cfg.to_dict(),
        "atlas_momentum": ckpt.atlas.momentum,
        "source_stats": ckpt.source_stats.to_dict(),
        "training": ckpt.manifest,
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.write_bytes(CKPT_MAGIC + struct.pack("<I", len(head)) + head + payload)
    return path


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:8] != CKPT_MAGIC:
        raise ContainerError(f"{path}: not a checkpoint (bad magic {buf[:8]!r})")
    (mlen,) = struct.unpack_from("<I", buf, 8)
    try:
        manifest = json.loads(buf[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version != CKPT_VERSION:
        raise ContainerError(f"{path}: checkpoint format version {version}, expected {CKPT_VERSION}")
    payload = buf[12 + mlen:]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ContainerError(f"{path}: tensor payload checksum mismatch")
    states = {"segnet": {}, "regnet": {}, "atlas": {}}
    for entry in manifest["tensors"]:
        arr = decode_array(payload[entry["offset"]:entry["offset"] + entry["nbytes"]])
        arr = arr.reshape(entry["shape"])
        states[entry["component"]][entry["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(
        seg_cfg=SegNetConfig(**manifest["segnet_config"]),
        seg_state=states["segnet"],
        reg_cfg=RegNetConfig(**manifest["regnet_config"]),
        reg_state=states["regnet"],
        atlas=Atlas(states["atlas"]["probs"].numpy(), manifest["atlas_momentum"]),
        source_stats=SourceStats.from_dict(manifest["source_stats"]),
        manifest=manifest["training"],
    )


def with_config(cfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(cfg, **overrides)
