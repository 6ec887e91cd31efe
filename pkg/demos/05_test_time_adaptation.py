"""Adapting one shifted subject with different losses and parameter sets.

Trains a small model (or loads the one demo 04 wrote), shifts a fresh
subject's appearance and compares Dice before and after each adaptation
episode. The pretrained snapshot is never modified.

A single subject from an 8-subject model is a noisy sample; the adapted
runs are best read against the test-statistics zero step, which shares
their normalization. The command-line benchmark averages ten subjects per
domain.

Run: python3 demos/05_test_time_adaptation.py [model.aackpt]
"""
import sys
from pathlib import Path

from adaatlas.registration import RegNetConfig
from adaatlas.segnet import SegNetConfig
from adaatlas.synthdata import DEFAULT_SHIFTS, ShapeSpec, apply_shift, generate_subject
from adaatlas.training import TrainConfig, load_checkpoint, train_joint
from adaatlas.tta import TTAConfig, TTAEngine, tensor_checksums
from adaatlas.volumes import argmax_labels, dice

spec = ShapeSpec()
path = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/adaatlas_demo.aackpt")
if path.exists():
    ckpt = load_checkpoint(path)
else:
    pairs = [generate_subject(spec, seed) for seed in range(8)]
    ckpt = train_joint([p[0] for p in pairs], [p[1] for p in pairs], TrainConfig(),
                       SegNetConfig(), RegNetConfig())

x, y = generate_subject(spec, seed=1234)
shifted = apply_shift(x, DEFAULT_SHIFTS["strong"], seed=99)

engine = TTAEngine(ckpt)
before = tensor_checksums(engine.segnet)
base = dice(argmax_labels(engine.baseline(shifted)), y, 3).mean_fg
print("no adaptation              Dice %.3f" % base)
# a zero step with test statistics: the normalization switch alone, no updates
zero = engine.adapt(shifted, TTAConfig(iterations=1, lr=0.0, norm_stats="sample"))
print("test-statistics norm only  Dice %.3f" % dice(zero.prediction, y, 3).mean_fg)

# the command-line benchmark settings
kw = dict(lr=5e-4, norm_stats="sample")
methods = {
    "entropy on norm (TENT)": TTAConfig(loss="entropy", target="norm", **kw),
    "atlas on norm": TTAConfig(loss="atlas", target="norm", **kw),
    "atlas on dual attention": TTAConfig(loss="atlas", target="dual_attention", **kw),
    "registration only (TTR)": TTAConfig(loss="atlas", target="norm", mode="ttr", **kw),
}
for name, cfg in methods.items():
    res = engine.adapt(shifted, cfg)
    d = dice(res.prediction, y, 3).mean_fg
    print("%-26s Dice %.3f  loss %.4f -> %.4f  (%d tensors adapted, %.1fs)"
          % (name, d, res.loss_trace[0], res.loss_trace[-1], len(res.adapted_param_names), res.wall_time))

print("pretrained snapshot untouched:", tensor_checksums(engine.segnet) == before)
