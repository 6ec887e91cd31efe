"""Joint segmentation/registration training and the learned atlas.

A small run on a handful of source subjects: watch the loss curves, the
atlas staying on the probability simplex, and the atlas sharpening from
the plain label average it starts as.

Run: python3 demos/04_joint_training_and_atlas.py [out.aackpt]
"""
import sys

import numpy as np

from adaatlas.atlas import atlas_init
from adaatlas.registration import RegNetConfig
from adaatlas.segnet import SegNetConfig
from adaatlas.synthdata import ShapeSpec, generate_subject
from adaatlas.training import TrainConfig, load_checkpoint, save_checkpoint, train_joint

spec = ShapeSpec()
pairs = [generate_subject(spec, seed) for seed in range(9)]
images, labels = [p[0] for p in pairs[:8]], [p[1] for p in pairs[:8]]


def blur(probs):
    """Fraction of voxels whose most likely class is below 0.9."""
    return float((probs.max(axis=0) < 0.9).mean())


start = atlas_init(labels, 3)
print("label average: foreground mass %.0f, unsure voxels %.3f" % (start.probs[1:].sum(), blur(start.probs)))


def on_epoch(epoch, atlas):
    if epoch % 10 == 9:
        print("epoch %2d: simplex error %.1e, foreground mass %.0f, unsure voxels %.3f"
              % (epoch + 1, atlas.simplex_error(), atlas.probs[1:].sum(), blur(atlas.probs)))


# the desk defaults: 60 epochs of batch 2, about a minute here
ckpt = train_joint(images, labels, TrainConfig(), SegNetConfig(), RegNetConfig(),
                   holdout=pairs[8], on_epoch=on_epoch)

curves = ckpt.manifest["curves"]
for key in ("supervised", "bireg", "holdout_bireg"):
    print("%-13s first %.4f  last %.4f" % (key, curves[key][0], curves[key][-1]))
print("training mean foreground Dice %.3f" % ckpt.manifest["train_mean_fg_dice"])

out = sys.argv[1] if len(sys.argv) > 1 else "/tmp/adaatlas_demo.aackpt"
save_checkpoint(ckpt, out)
back = load_checkpoint(out)
print("checkpoint round trip keeps the atlas:", back.atlas.checksum() == ckpt.atlas.checksum())
print("class volumes in the atlas:", np.round(ckpt.atlas.probs.reshape(3, -1).sum(axis=1)).astype(int))
