"""Command-line driver: ``gen-data``, ``train``, ``adapt-eval`` and ``report``.

Every command takes an optional JSON config (sections ``data``, ``train``,
``tta``, ``report``); anything not given falls back to the defaults in
:data:`DEFAULT_CONFIG`. Unknown keys are rejected so that typos fail loudly
instead of silently running the default experiment.

Exit codes: 0 success, 2 config error, 3 data error, 4 training or
adaptation divergence.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .segnet import ConfigError, SegNetConfig
from .synthdata import (
    DEFAULT_SHIFTS, ShapeSpec, ShiftSpec, identity_domain, make_domains, read_domain, read_manifest,
    write_dataset,
)
from .training import (
    PROFILES, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train_joint,
)
from .tta import TTAConfig, TTAEngine, evaluate_domain, relative_improvement
from .volumes import ContainerError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

# name -> (loss, target, mode); ``None`` is the no-adaptation baseline
DEFAULT_METHODS = {
    "baseline": None,
    "TENT": ["entropy", "norm", "adapt_segnet"],
    "EATA": ["eata", "norm", "adapt_segnet"],
    "AdaMI": ["class_ratio", "norm", "adapt_segnet"],
    "TTAS": ["shape_moment", "norm", "adapt_segnet"],
    "TTR": ["atlas", "norm", "ttr"],
    "AdaAtlas-Norm": ["atlas", "norm", "adapt_segnet"],
    "AdaAtlas-Channel": ["atlas", "channel_only", "adapt_segnet"],
    "AdaAtlas-Spatial": ["atlas", "spatial_only", "adapt_segnet"],
    "AdaAtlas-Attention": ["atlas", "dual_attention", "adapt_segnet"],
    "Entropy-Attention": ["entropy", "dual_attention", "adapt_segnet"],
    "Shape-Attention": ["shape_moment", "dual_attention", "adapt_segnet"],
}

# named data profiles: overrides of data.shape
DATA_PROFILES = {
    "desk": {"grid": 16},
    "slow": {"grid": 32},
}

DEFAULT_CONFIG = {
    "data": {
        "profile": "desk",
        "seed": 0,
        "n_source": 20,
        "n_target": 10,
        "n_identity": 10,  # fresh unshifted subjects for the no-harm check; 0 disables
        "shape": ShapeSpec().to_dict(),
        "shifts": {k: v.to_dict() for k, v in DEFAULT_SHIFTS.items()},
    },
    "train": {
        "profile": "desk",
        **PROFILES["desk"].to_dict(),
        "block_type": "dual_attention",
        "depth": SegNetConfig.depth,
        "base_channels": SegNetConfig.base_channels,
    },
    "tta": {
        "iterations": TTAConfig.iterations,
        # half the library default: at 1e-3 the entropy and norm-target
        # methods drift on unshifted subjects
        "lr": 5e-4,
        "episodic": True,
        # the benchmark normalizes each test volume with its own statistics
        "norm_stats": "sample",
        "eata_threshold": None,
        "domains": None,  # None: every domain except the training source
        "methods": DEFAULT_METHODS,
    },
    "report": {
        "decimals": 4,
    },
}

# keys whose values are free-form mappings, validated by their own constructors
_OPEN_KEYS = {("data", "shifts"), ("tta", "methods")}


class DataError(RuntimeError):
    pass


def _merge(base, override, path=()):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            where = ".".join(path + (key,))
            raise ConfigError(f"unknown config key {where!r}")
        if path + (key,) in _OPEN_KEYS:
            out[key] = copy.deepcopy(value)
        elif isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None, block_type=None) -> dict:
    """Resolve a config file against the defaults and apply CLI overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        if "profile" in user.get("data", {}):
            prof = user["data"]["profile"]
            if prof not in DATA_PROFILES:
                raise ConfigError(f"unknown data profile {prof!r}; choose from {sorted(DATA_PROFILES)}")
            cfg["data"]["shape"].update(DATA_PROFILES[prof])
            cfg["data"]["profile"] = prof
        if "profile" in user.get("train", {}):
            # a named profile supplies the schedule; explicit keys still win
            prof = user["train"]["profile"]
            if prof not in PROFILES:
                raise ConfigError(f"unknown training profile {prof!r}; choose from {sorted(PROFILES)}")
            cfg["train"].update(PROFILES[prof].to_dict(), profile=prof)
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["data"]["seed"] = seed
        cfg["train"]["seed"] = seed
    if block_type is not None:
        cfg["train"]["block_type"] = block_type
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    d = cfg["data"]
    for key, lo in (("n_source", 1), ("n_target", 1), ("n_identity", 0)):
        if not isinstance(d[key], int) or d[key] < lo:
            raise ConfigError(f"data.{key} must be an integer >= {lo}")
    if d["n_identity"] > 0 and "identity" in d["shifts"]:
        raise ConfigError("data.shifts may not name a domain 'identity' while data.n_identity > 0")
    shape_spec(cfg)
    shifts(cfg)
    train_configs(cfg)
    for name in cfg["tta"]["methods"]:
        tta_config(cfg, name)
    if int(cfg["report"]["decimals"]) < 1:
        raise ConfigError("report.decimals must be >= 1")


def shape_spec(cfg) -> ShapeSpec:
    try:
        return ShapeSpec(**cfg["data"]["shape"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"data.shape: {e}") from None


def shifts(cfg) -> dict:
    out = {}
    for name, s in cfg["data"]["shifts"].items():
        try:
            out[name] = ShiftSpec(**s)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"data.shifts.{name}: {e}") from None
    if not out:
        raise ConfigError("data.shifts needs at least one target domain")
    return out


def train_configs(cfg):
    t = dict(cfg["train"])
    seg = {k: t.pop(k) for k in ("block_type", "depth", "base_channels")}
    t.pop("profile")
    try:
        tc = TrainConfig(**t)
        sc = SegNetConfig(num_classes=cfg["data"]["shape"].get("num_classes", 3), **seg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from None
    return tc, sc


def tta_config(cfg, method: str) -> TTAConfig | None:
    triple = cfg["tta"]["methods"].get(method)
    if triple is None:
        if method not in cfg["tta"]["methods"]:
            raise ConfigError(f"unknown method {method!r}")
        return None
    if not isinstance(triple, (list, tuple)) or len(triple) != 3:
        raise ConfigError(f"method {method!r} must be a [loss, target, mode] triple")
    loss, target, mode = triple
    t = cfg["tta"]
    return TTAConfig(loss=loss, target=target, mode=mode, iterations=int(t["iterations"]),
                     lr=float(t["lr"]), episodic=bool(t["episodic"]),
                     norm_stats=t["norm_stats"], eata_threshold=t["eata_threshold"])


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def num_workers() -> int:
    raw = os.environ.get("AAATLAS_NUM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AAATLAS_NUM_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("AAATLAS_NUM_WORKERS must be >= 1")
    return n


# -- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: dict, out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if (out / "manifest.json").exists() and not force:
        raise DataError(f"{out} already holds a dataset; pass --force to overwrite")
    d = cfg["data"]
    man = make_domains(int(d["n_source"]), int(d["n_target"]), shifts(cfg), seed=int(d["seed"]),
                       shape=shape_spec(cfg))
    if int(d["n_identity"]) > 0:
        man.domains.append(identity_domain(man, int(d["n_identity"])))
    try:
        path = write_dataset(man, out)
    except OSError as e:
        raise DataError(f"could not write dataset to {out}: {e}") from None
    counts = ", ".join(f"{e.name}={len(e.subjects)}" for e in man.domains)
    print(f"wrote {path} ({counts})")
    return path


def _read(data_dir, name):
    try:
        return read_domain(data_dir, name)
    except (FileNotFoundError, ContainerError) as e:
        raise DataError(str(e)) from None


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(v, decimals):
    if isinstance(v, float):
        return "nan" if not np.isfinite(v) else f"{v:.{decimals}f}"
    return str(v)


def cmd_train(cfg: dict, data_dir, out_ckpt, force: bool = False) -> Path:
    out = Path(out_ckpt)
    if out.exists() and not force:
        raise DataError(f"{out} exists; pass --force to overwrite")
    try:
        read_manifest(data_dir)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    images, labels = _read(data_dir, "source")
    if not images:
        raise DataError(f"no source subjects under {data_dir}")
    tc, sc = train_configs(cfg)
    ckpt = train_joint(images, labels, tc, sc)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    curves = ckpt.manifest["curves"]
    keys = [k for k in ("total", "supervised", "bireg", "smooth", "lr", "atlas_simplex_error")
            if k in curves]
    rows = [[e + 1] + [_fmt(float(curves[k][e]), 8) for k in keys] for e in range(len(curves["total"]))]
    _write_csv(out.with_suffix(".loss.csv"), ["epoch"] + keys, rows)
    print(f"wrote {out} (train mean fg Dice {ckpt.manifest['train_mean_fg_dice']:.4f})")
    return out


def cmd_adapt_eval(cfg: dict, ckpt_path, data_dir, out_dir, force: bool = False) -> dict:
    out = Path(out_dir)
    if (out / "aggregate.csv").exists() and not force:
        raise DataError(f"{out} already holds results; pass --force to overwrite")
    try:
        ckpt = load_checkpoint(ckpt_path)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    except ContainerError as e:
        raise DataError(f"{ckpt_path}: {e}") from None
    try:
        man = read_manifest(data_dir)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    domains = cfg["tta"]["domains"] or [n for n in man.domain_names if n != "source"]
    missing = [d for d in domains if d not in man.domain_names]
    if missing:
        raise DataError(f"domains {missing} not in dataset {data_dir} ({man.domain_names})")
    methods = list(cfg["tta"]["methods"])
    dec = int(cfg["report"]["decimals"])
    workers = num_workers()
    engine = TTAEngine(ckpt)
    c = ckpt.seg_cfg.num_classes

    subject_rows, agg_rows, cells = [], [], {}
    for dom in domains:
        xs, ys = _read(data_dir, dom)
        for m in methods:
            try:
                res = evaluate_domain(ckpt, xs, tta_config(cfg, m), ys, workers=workers, engine=engine)
            except (ConfigError, ValueError, RuntimeError) as e:
                # a failing method is reported, not fatal to the others
                cells[(m, dom)] = None
                agg_rows.append([m, dom, "failed", "failed", "failed", "failed"])
                print(f"warning: {m} on {dom} failed: {e}", file=sys.stderr)
                continue
            cells[(m, dom)] = res
            agg_rows.append([m, dom, _fmt(res.mean_fg, dec), _fmt(res.baseline_mean_fg, dec),
                             _fmt(res.rel_improvement, dec), res.diverged])
            for r in res.rows:
                subject_rows.append([m, dom, r["subject"]] + [_fmt(r[f"dice_{k}"], dec) for k in range(1, c)]
                                    + [_fmt(r["mean_fg"], dec), _fmt(r["baseline_mean_fg"], dec),
                                       r["diverged"], _fmt(r["loss_first"], dec), _fmt(r["loss_last"], dec)])

    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "subjects.csv",
               ["method", "domain", "subject"] + [f"dice_{k}" for k in range(1, c)]
               + ["mean_fg", "baseline_mean_fg", "diverged", "loss_first", "loss_last"], subject_rows)
    _write_csv(out / "aggregate.csv",
               ["method", "domain", "mean_fg", "baseline_mean_fg", "rel_improvement", "diverged"], agg_rows)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    text = render_report(out, cfg)
    (out / "report.txt").write_text(text)
    print(text)
    if any(r is not None and r.diverged for r in cells.values()):
        print("note: some episodes diverged and fell back to the baseline prediction", file=sys.stderr)
    return cells


def read_aggregate(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def render_table(rows, decimals: int = 4) -> str:
    """Methods x domains Dice table, each adapted cell annotated with ``(+N%)``."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    domains = list(dict.fromkeys(r["domain"] for r in rows))
    by = {(r["method"], r["domain"]): r for r in rows}
    cells = {}
    for m in methods:
        for d in domains:
            r = by.get((m, d))
            if r is None or r["mean_fg"] == "failed":
                cells[m, d] = "failed"
                continue
            s = f"{float(r['mean_fg']):.{decimals}f}"
            if m != "baseline":
                pct = 100 * relative_improvement(float(r["mean_fg"]), float(r["baseline_mean_fg"]))
                s += f" ({pct:+.1f}%)"
            cells[m, d] = s
    # mean over target domains, the headline column
    targets = [d for d in domains if d not in ("source", "identity")]
    for m in methods:
        vals = [by.get((m, d)) for d in targets]
        if targets and all(v is not None and v["mean_fg"] != "failed" for v in vals):
            mean = np.mean([float(v["mean_fg"]) for v in vals])
            base = np.mean([float(v["baseline_mean_fg"]) for v in vals])
            s = f"{mean:.{decimals}f}"
            if m != "baseline":
                s += f" ({100 * relative_improvement(mean, base):+.1f}%)"
        else:
            s = "failed" if targets else ""
        cells[m, "mean(targets)"] = s
    cols = domains + (["mean(targets)"] if targets else [])
    w0 = max(len("method"), *(len(m) for m in methods))
    widths = [max(len(d), *(len(cells[m, d]) for m in methods)) for d in cols]
    lines = ["  ".join(["method".ljust(w0)] + [d.ljust(w) for d, w in zip(cols, widths)])]
    lines.append("  ".join(["-" * w0] + ["-" * w for w in widths]))
    for m in methods:
        lines.append("  ".join([m.ljust(w0)] + [cells[m, d].ljust(w) for d, w in zip(cols, widths)]))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def render_report(eval_dir, cfg: dict | None = None) -> str:
    eval_dir = Path(eval_dir)
    rows = read_aggregate(eval_dir / "aggregate.csv")
    if cfg is None:
        cfg_path = eval_dir / "config.json"
        cfg = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    dec = int(cfg.get("report", {}).get("decimals", 4))
    parts = [
        "Mean foreground Dice per method and domain (relative change vs. no adaptation)",
        "",
        render_table(rows, dec),
        f"version: {version_string()}",
        "resolved config:",
        json.dumps(cfg, indent=2, sort_keys=True),
        "",
    ]
    return "\n".join(parts)


def cmd_report(eval_dir) -> str:
    path = Path(eval_dir) / "aggregate.csv"
    if not path.exists():
        raise DataError(f"no aggregate.csv under {eval_dir}; run adapt-eval first")
    text = render_report(eval_dir)
    (Path(eval_dir) / "report.txt").write_text(text)
    print(text)
    return text


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaatlas", description=__doc__.split("\n")[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", default=None, help="JSON config with data/train/tta/report sections")
    p.add_argument("--seed", type=int, default=None, help="overrides data.seed and train.seed")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic multi-domain dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    t = sub.add_parser("train", help="jointly train segmentation and registration nets, build the atlas",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="checkpoint path (.aackpt)")
    t.add_argument("--block-type", default=None, choices=["none", "norm_only", "dual_attention"],
                   help="overrides train.block_type")
    t.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")

    a = sub.add_parser("adapt-eval", help="run every configured method on every domain",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    a.add_argument("--ckpt", required=True, help="checkpoint from train")
    a.add_argument("--data", required=True, help="dataset directory from gen-data")
    a.add_argument("--out", required=True, help="results directory")
    a.add_argument("--methods", default=None, help="comma-separated subset of configured methods")
    a.add_argument("--force", action="store_true", help="overwrite existing results")

    r = sub.add_parser("report", help="re-render the comparison table from adapt-eval results")
    r.add_argument("--eval-dir", required=True, help="results directory from adapt-eval")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.eval_dir)
            return EXIT_OK
        cfg = load_config(args.config, args.seed, getattr(args, "block_type", None))
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out, args.force)
        else:
            if args.methods:
                wanted = [m.strip() for m in args.methods.split(",") if m.strip()]
                unknown = [m for m in wanted if m not in cfg["tta"]["methods"]]
                if unknown:
                    raise ConfigError(f"unknown methods {unknown}; configured: {list(cfg['tta']['methods'])}")
                cfg["tta"]["methods"] = {m: cfg["tta"]["methods"][m] for m in wanted}
            cmd_adapt_eval(cfg, args.ckpt, args.data, args.out, args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
