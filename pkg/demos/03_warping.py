"""Deformation fields and trilinear pull-back warping.

Run: python3 demos/03_warping.py
"""
import numpy as np
import torch

from adaatlas.registration import DeformationField, smoothness_penalty, warp
from adaatlas.synthdata import ShapeSpec, generate_subject
from adaatlas.volumes import argmax_labels, dice, one_hot

_, labels = generate_subject(ShapeSpec(), seed=1)
p = torch.as_tensor(one_hot(labels, 3))
shape = labels.shape

# Identity leaves the map alone.
same = warp(p, DeformationField.identity(shape))
print("identity max abs error %.2e" % (same - p).abs().max().item())

# Coordinates are normalized to [-1, 1], so one voxel is 2 / (n - 1).
step = 2.0 / (shape[0] - 1)
moved = warp(p, DeformationField.translation(shape, [step, 0.0, 0.0]))
expected = np.roll(labels, -1, axis=0)
print("one-voxel shift matches np.roll on the interior:",
      np.array_equal(argmax_labels(moved.numpy())[:-1], expected[:-1]))

# A random smooth displacement keeps every voxel a probability vector.
g = torch.Generator().manual_seed(0)
phi = DeformationField.identity(shape)
phi.displacement += 0.1 * torch.randn((1, 3) + shape, generator=g, dtype=torch.float64)
wobbly = warp(p, phi)
print("channel sums within %.1e of 1" % (wobbly.sum(0) - 1).abs().max().item())
print("Dice after the random warp %.3f" % dice(argmax_labels(wobbly.numpy()), labels, 3).mean_fg)
print("smoothness penalty %.4f" % smoothness_penalty(phi).item())
