"""The command-line pipeline on a miniature benchmark.

Equivalent shell session:

    adaatlas --config small.json gen-data --out data
    adaatlas --config small.json train --data data --out model.aackpt
    adaatlas --config small.json adapt-eval --ckpt model.aackpt --data data --out eval
    adaatlas report --eval-dir eval

Run: python3 demos/06_cli_benchmark.py [work_dir]
"""
import json
import sys
import tempfile
from pathlib import Path

from adaatlas.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="adaatlas_"))
work.mkdir(parents=True, exist_ok=True)
config = {
    "data": {"n_source": 6, "n_target": 3, "n_identity": 3},
    "train": {"epochs": 10, "base_channels": 8},
    "tta": {"iterations": 20},
}
cfg = work / "small.json"
cfg.write_text(json.dumps(config, indent=2))

steps = [
    ["gen-data", "--out", str(work / "data"), "--force"],
    ["train", "--data", str(work / "data"), "--out", str(work / "model.aackpt"), "--force"],
    ["adapt-eval", "--ckpt", str(work / "model.aackpt"), "--data", str(work / "data"),
     "--out", str(work / "eval"), "--methods", "baseline,TENT,AdaAtlas-Norm,AdaAtlas-Attention",
     "--force"],
]
for step in steps:
    code = main(["--config", str(cfg)] + step)
    if code != 0:
        sys.exit(code)
print("results in", work / "eval")
