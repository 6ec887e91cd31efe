"""Synthetic anatomy, one-hot maps, Dice and the volume container.

Run: python3 demos/01_volumes_and_dice.py
"""
import tempfile
from pathlib import Path

import numpy as np

from adaatlas.synthdata import ShapeSpec, generate_subject
from adaatlas.volumes import (argmax_labels, dice, load_labels, load_volume, one_hot,
                              save_volume)

# One 16^3 subject: an "organ" (class 1) with a "core" (class 2) inside it.
image, labels = generate_subject(ShapeSpec(), seed=0)
print("image", image.shape, "mean %.3f var %.3f" % (image.mean(), image.var()))
print("voxels per class", np.bincount(labels.ravel(), minlength=3))

# Labels <-> probability maps. argmax breaks ties towards the lower class.
probs = one_hot(labels, 3)
assert np.array_equal(argmax_labels(probs), labels)

# Dice of a prediction shifted by one voxel along the first axis.
shifted = np.roll(labels, 1, axis=0)
report = dice(shifted, labels, 3)
print("per-class Dice", {k: round(v, 3) for k, v in report.per_class.items()})
print("mean foreground Dice %.3f" % report.mean_fg)

# Volumes persist as a small header plus raw little-endian data.
with tempfile.TemporaryDirectory() as tmp:
    save_volume(Path(tmp) / "img.aavol", image.astype(np.float32))
    save_volume(Path(tmp) / "lab.aavol", labels[None].astype(np.uint8))
    back = load_volume(Path(tmp) / "img.aavol")
    assert np.array_equal(back, image.astype(np.float32))
    assert np.array_equal(load_labels(Path(tmp) / "lab.aavol"), labels)
print("container round trip ok")
