"""Probabilistic label atlas: mean-of-labels initialization and EMA refinement."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .volumes import one_hot

DEFAULT_MOMENTUM = 0.9


@dataclass(frozen=True)
class Atlas:
    probs: np.ndarray  # (C, H, W, D)
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 4:
            raise ValueError(f"atlas must be (C, H, W, D), got shape {probs.shape}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self):
        return self.probs.shape[0]

    @property
    def shape(self):
        return self.probs.shape[1:]

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.probs).tobytes()).hexdigest()

    def simplex_error(self) -> float:
        return float(np.abs(self.probs.sum(axis=0) - 1.0).max())


def atlas_init(labels, num_classes: int, momentum: float = DEFAULT_MOMENTUM) -> Atlas:
    labels = list(labels)
    if not labels:
        raise ValueError("atlas_init needs at least one label map")
    shapes = {np.shape(l) for l in labels}
    if len(shapes) != 1:
        raise ValueError(f"label maps have differing shapes: {sorted(shapes)}")
    acc = np.zeros((num_classes,) + shapes.pop(), dtype=np.float64)
    for l in labels:
        acc += one_hot(l, num_classes)
    return Atlas(acc / len(labels), momentum)


def atlas_update(atlas: Atlas, warped_labels) -> Atlas:
    """EMA step towards the mean of labels already warped into atlas space."""
    warped = [np.asarray(w, dtype=np.float64) for w in warped_labels]
    if not warped:
        raise ValueError("atlas_update needs at least one warped label map")
    for w in warped:
        if w.shape != atlas.probs.shape:
            raise ValueError(f"warped label shape {w.shape} does not match atlas {atlas.probs.shape}")
    mean = np.mean(warped, axis=0)
    m = atlas.momentum
    return Atlas(m * atlas.probs + (1.0 - m) * mean, m)
