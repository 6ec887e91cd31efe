"""Per-subject test-time adaptation and domain-level evaluation."""
from __future__ import annotations

import copy
import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field

import numpy as np
import torch

from .losses import (atlas_loss, class_ratio_loss, default_eata_threshold, eata_loss,
                     entropy_loss, reg_loss, shape_moment_loss)
from .registration import reg_forward, warp
from .segnet import ConfigError, partition_params
from .volumes import argmax_labels, dice

LOSSES = ("atlas", "entropy", "eata", "class_ratio", "shape_moment")
TTA_TARGETS = ("norm", "channel_only", "spatial_only", "dual_attention")
MODES = ("adapt_segnet", "ttr")
# "sample": every adaptation episode normalizes with the test volume's own
# statistics; "running": stored statistics unless the norm parameters
# themselves are the adaptation target
NORM_STATS = ("sample", "running")


@dataclass
class TTAConfig:
    loss: str = "atlas"
    target: str = "dual_attention"
    iterations: int = 50
    lr: float = 1e-3
    episodic: bool = True
    mode: str = "adapt_segnet"
    eata_threshold: float | None = None
    divergence_factor: float = 10.0
    norm_stats: str = "running"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown TTA loss {self.loss!r}; choose from {LOSSES}")
        if self.target not in TTA_TARGETS:
            raise ConfigError(f"unknown TTA target {self.target!r}; choose from {TTA_TARGETS}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown TTA mode {self.mode!r}; choose from {MODES}")
        if self.norm_stats not in NORM_STATS:
            raise ConfigError(f"unknown norm_stats {self.norm_stats!r}; choose from {NORM_STATS}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class TTAResult:
    prediction: np.ndarray
    prob: np.ndarray
    loss_trace: list
    adapted_param_names: list
    wall_time: float
    diverged: bool = False
    # state_dict of the adapted network (segnet, or regnet for TTR) after the episode
    adapted_state: dict | None = None


def tensor_checksums(named) -> dict:
    """SHA-256 per named tensor; accepts a module or a ``{name: tensor}`` mapping."""
    items = named.state_dict().items() if isinstance(named, torch.nn.Module) else named.items()
    return {k: hashlib.sha256(v.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
            for k, v in items}


class TTAEngine:
    """Holds the pretrained snapshot and runs adaptation episodes against it.

    The pretrained networks are never modified; every episode works on a
    private deep copy. With ``episodic=False`` the copy persists across
    calls (continual adaptation, not the default protocol).
    """

    def __init__(self, ckpt):
        self.ckpt = ckpt
        self.segnet = ckpt.segnet().eval()
        self.regnet = ckpt.regnet().eval()
        for p in list(self.segnet.parameters()) + list(self.regnet.parameters()):
            p.requires_grad_(False)
        self.dtype = next(self.segnet.parameters()).dtype
        self.atlas = torch.tensor(ckpt.atlas.probs, dtype=self.dtype)[None]
        self.num_classes = ckpt.seg_cfg.num_classes
        self._continual = None

    def _input(self, x):
        xt = torch.as_tensor(np.asarray(x), dtype=self.dtype)
        if xt.dim() == 4:
            xt = xt[None]
        if tuple(xt.shape[2:]) != tuple(self.ckpt.grid_shape) or xt.shape[1] != 1:
            raise ValueError(f"volume of shape {tuple(xt.shape[1:])} does not match the checkpoint "
                             f"grid (1, {', '.join(map(str, self.ckpt.grid_shape))})")
        return xt

    def baseline(self, x) -> np.ndarray:
        with torch.no_grad():
            return self.segnet(self._input(x))[0].double().numpy()

    def _loss(self, prob, cfg, regnet):
        if cfg.loss == "atlas":
            phi = reg_forward(regnet, prob, self.atlas)
            return atlas_loss(warp(prob, phi), self.atlas)
        if cfg.loss == "entropy":
            return entropy_loss(prob)
        if cfg.loss == "eata":
            e0 = cfg.eata_threshold or default_eata_threshold(self.num_classes)
            return eata_loss(prob, e0)
        if cfg.loss == "class_ratio":
            return class_ratio_loss(prob, self.ckpt.source_stats)
        return shape_moment_loss(prob, self.ckpt.source_stats)

    def _diverged(self, value, initial, cfg):
        return not math.isfinite(value) or value > cfg.divergence_factor * max(initial, 1e-3)

    def adapt(self, x, cfg: TTAConfig) -> TTAResult:
        if cfg.mode == "ttr":
            return self._ttr(x, cfg)
        t0 = time.perf_counter()
        xt = self._input(x)
        if cfg.episodic or self._continual is None:
            net = copy.deepcopy(self.segnet)
        else:
            net = self._continual
        start_state = {k: v.clone() for k, v in net.state_dict().items()}
        part = partition_params(net, cfg.target)
        named = dict(net.named_parameters())
        params = [named[n] for n in part.adaptable]
        for p in params:
            p.requires_grad_(True)
        net.eval()
        net.set_sample_stats(cfg.norm_stats == "sample" or cfg.target == "norm")
        opt = torch.optim.Adam(params, lr=cfg.lr)

        trace = []
        first_prob = None
        diverged = False
        for _ in range(cfg.iterations):
            prob = net(xt)
            loss = self._loss(prob, cfg, self.regnet)
            value = float(loss.detach())
            if first_prob is None:
                first_prob = prob.detach()
            trace.append(value)
            if self._diverged(value, trace[0], cfg):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()

        if diverged:
            net.load_state_dict(start_state)
            final = first_prob
        else:
            with torch.no_grad():
                final = net(xt)
        for p in params:
            p.requires_grad_(False)
        if not cfg.episodic:
            self._continual = net
        prob_np = final[0].double().numpy()
        return TTAResult(argmax_labels(prob_np), prob_np, trace, list(part.adaptable),
                         time.perf_counter() - t0, diverged, net.state_dict())

    def _ttr(self, x, cfg: TTAConfig) -> TTAResult:
        t0 = time.perf_counter()
        xt = self._input(x)
        with torch.no_grad():
            pred = self.segnet(xt)
        regnet = copy.deepcopy(self.regnet).eval()
        names = [n for n, _ in regnet.named_parameters()]
        params = list(regnet.parameters())
        for p in params:
            p.requires_grad_(True)
        opt = torch.optim.Adam(params, lr=cfg.lr)

        def warped_atlas():
            return warp(self.atlas, reg_forward(regnet, self.atlas, pred))

        trace = []
        diverged = False
        first = None
        for _ in range(cfg.iterations):
            moved = warped_atlas()
            loss = reg_loss(pred, moved)
            value = float(loss.detach())
            if first is None:
                first = moved.detach()
            trace.append(value)
            if self._diverged(value, trace[0], cfg):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        if diverged:
            final = first
        else:
            with torch.no_grad():
                final = warped_atlas()
        prob_np = final[0].double().numpy()
        return TTAResult(argmax_labels(prob_np), prob_np, trace, names,
                         time.perf_counter() - t0, diverged, regnet.state_dict())


def tta_adapt_subject(ckpt, x, cfg: TTAConfig) -> TTAResult:
    if cfg.mode != "adapt_segnet":
        raise ConfigError("tta_adapt_subject expects mode='adapt_segnet'; use ttr_adapt_subject")
    return TTAEngine(ckpt).adapt(x, cfg)


def ttr_adapt_subject(ckpt, x, cfg: TTAConfig) -> TTAResult:
    if cfg.mode != "ttr":
        raise ConfigError("ttr_adapt_subject expects mode='ttr'")
    return TTAEngine(ckpt).adapt(x, cfg)


@dataclass
class DomainEvaluation:
    rows: list = field(default_factory=list)   # one dict per subject
    mean_fg: float = float("nan")
    baseline_mean_fg: float = float("nan")
    rel_improvement: float = float("nan")
    diverged: int = 0


def relative_improvement(mean_tta: float, mean_base: float) -> float:
    return (mean_tta - mean_base) / mean_base if mean_base else float("nan")


def evaluate_domain(ckpt, subjects, cfg: TTAConfig | None, gts, workers: int = 1,
                    engine: TTAEngine | None = None) -> DomainEvaluation:
    """Adapt (or, with ``cfg=None``, just predict) every subject and score it.

    Episodic configurations are independent per subject, so they may run on
    a thread pool; results are reassembled in subject order.
    """
    if len(subjects) != len(gts):
        raise ValueError("subjects and ground truths must align")
    engine = engine or TTAEngine(ckpt)
    c = engine.num_classes

    def run(i):
        x, y = subjects[i], gts[i]
        base = dice(argmax_labels(engine.baseline(x)), y, c)
        if cfg is None:
            rep, trace, div = base, [], False
        else:
            res = engine.adapt(x, cfg)
            rep, trace, div = dice(res.prediction, y, c), res.loss_trace, res.diverged
        row = {"subject": i, **rep.as_row(), "baseline_mean_fg": base.mean_fg,
               "diverged": int(div),
               "loss_first": trace[0] if trace else float("nan"),
               "loss_last": trace[-1] if trace else float("nan")}
        return row

    idx = range(len(subjects))
    if workers > 1 and (cfg is None or cfg.episodic):
        # each episode deep-copies the snapshot, so the engine is only read concurrently
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run, idx))
    else:
        rows = [run(i) for i in idx]
    mean = float(np.mean([r["mean_fg"] for r in rows]))
    base = float(np.mean([r["baseline_mean_fg"] for r in rows]))
    return DomainEvaluation(rows, mean, base, relative_improvement(mean, base),
                            sum(r["diverged"] for r in rows))
