"""``crossmatch`` command line: synth, train, eval, ablate, plot.

Anything that affects numerics lives in the config file; flags only pick paths and modes.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, CrossMatchError, DataError

log = logging.getLogger("crossmatch")

THREADS_ENV = "CROSSMATCH_NUM_THREADS"
MANIFEST = "manifest.json"
# loss-log columns that are bookkeeping rather than plottable series
_NOT_SERIES = {"step", "ms", "rng_hash", "encoder_calls", "decoder_calls", "sample"}


def _setup(verbosity):
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbosity, 2), stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    import torch

    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))


def write_manifest(out_dir, config_dict, config_hash, dataset_fp, seed, command):
    import torch

    manifest = {
        "command": command,
        "config": config_dict,
        "config_hash": config_hash,
        "dataset_fingerprint": dataset_fp,
        "seed": seed,
        "environment": {
            "python": platform.python_version(),
            "platform": platform.platform(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "threads": torch.get_num_threads(),
        },
    }
    path = Path(out_dir) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _load_synth_spec(path, count=None):
    from .datasets import SynthSpec

    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"spec file {path} not found") from e
    if "data" in raw:
        raw = (raw["data"] or {}).get("synth") or {}
    known = {f.name for f in fields(SynthSpec)}
    if set(raw) - known:
        raise ConfigError(f"unknown synth spec keys {sorted(set(raw) - known)}")
    raw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    if count is not None:
        raw["count"] = count
    return SynthSpec(**raw)


def cmd_synth(args):
    from .datasets import fingerprint, save_folder, synth_generate

    spec = _load_synth_spec(args.spec, args.count)
    records = synth_generate(spec)
    out = Path(args.out)
    save_folder(records, out)
    spec_dict = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
    (out / "synth_spec.yaml").write_text(yaml.safe_dump(spec_dict, sort_keys=True))
    fp = fingerprint(records)
    write_manifest(out, spec_dict, None, fp, spec.seed, "synth")
    print(f"wrote {len(records)} samples to {out} (fingerprint {fp[:16]})")
    return 0


def _load_data(data_dir, num_classes):
    from .datasets import load_dataset

    records = load_dataset(data_dir, num_classes)
    if not records:
        raise DataError(f"no samples found under {data_dir}")
    return records


def cmd_train(args):
    from .config import load_config
    from .datasets import fingerprint, holdout
    from .metrics import evaluate_model
    from .trainer import fit

    cfg = load_config(args.config)
    overrides = {}
    if args.method:
        overrides["method"] = args.method
    if args.naive:
        overrides["naive_mode"] = True
    if overrides:
        cfg = cfg.with_overrides(train=overrides)
    records = _load_data(args.data, cfg.data.num_classes)
    train, val = holdout(records, cfg.data.val_count, cfg.data.split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    write_manifest(out, cfg.to_dict(), cfg.config_hash(), fingerprint(records), cfg.train.seed, "train")
    state, runlog = fit(cfg, train, val, out_dir=out, resume=args.resume)
    if val:
        report = evaluate_model(state.model, val)
        (out / "final_metrics.jsonl").write_text(report.to_jsonl())
        print(report.table("final"))
    print(f"run complete: {state.step} steps, checkpoint {out / f'ckpt_{state.step}'}")
    return 0


def cmd_eval(args):
    from .metrics import evaluate_model
    from .trainer import load_checkpoint

    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} does not exist", file=sys.stderr)
        return DataError.exit_code
    state, _ = load_checkpoint(ckpt)
    records = _load_data(args.data, state.config.data.num_classes)
    missing = [r.id for r in records if r.eval_mask() is None]
    if missing:
        raise DataError(f"evaluation needs masks; missing for {missing[:3]}")
    report = evaluate_model(state.model, records)
    out = Path(args.out) if args.out else (ckpt if ckpt.is_dir() else ckpt.parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_metrics.jsonl").write_text(report.to_jsonl())
    (out / "eval_table.txt").write_text(report.table() + "\n")
    print(report.table())
    return 0


def cmd_ablate(args):
    from .ablation import GRIDS, SPLITS, run_ablation
    from .config import from_dict, load_config
    from .datasets import fingerprint, holdout, synth_generate

    try:
        grid = yaml.safe_load(Path(args.grid).read_text()) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"grid file {args.grid} not found") from e
    base_ref = grid.get("config", {})
    if isinstance(base_ref, str):
        base = load_config(Path(args.grid).parent / base_ref)
    else:
        base = from_dict(base_ref)
    names = grid.get("grids", list(GRIDS))
    splits = tuple(grid.get("splits", SPLITS))
    if grid.get("data"):
        records = _load_data(Path(args.grid).parent / grid["data"], base.data.num_classes)
    elif base.data.synth is not None:
        records = synth_generate(base.data.synth)
    else:
        raise ConfigError("grid file needs a data directory or config.data.synth")
    train, val = holdout(records, base.data.val_count, base.data.split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, {"base": base.to_dict(), "grids": names, "splits": list(splits),
                         "iterations": grid.get("iterations")},
                   base.config_hash(), fingerprint(records), base.train.seed, "ablate")
    table = run_ablation(names, base, train, val, splits, grid.get("iterations"))
    table.write(out)
    print(table.format())
    return 0


def _read_series(run_dir):
    run_dir = Path(run_dir)
    series = {}
    losses = run_dir / "losses.csv"
    if losses.exists():
        with open(losses) as f:
            rows = list(csv.DictReader(f))
        for key in (rows[0].keys() if rows else []):
            if key in _NOT_SERIES:
                continue
            steps, vals = [], []
            for r in rows:
                if r.get(key) not in (None, ""):
                    steps.append(int(r["step"]))
                    vals.append(float(r[key]))
            if steps:
                series[key] = (steps, vals)
    metrics = run_dir / "metrics.jsonl"
    if metrics.exists():
        rows = [json.loads(line) for line in metrics.read_text().splitlines() if line.strip()]
        for key in (rows[0].keys() if rows else []):
            if key in _NOT_SERIES:
                continue
            pts = [(r["step"], r[key]) for r in rows if r.get(key) is not None]
            if pts:
                series[f"val_{key}"] = ([p[0] for p in pts], [p[1] for p in pts])
    return series


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = _read_series(args.run)
    if not series:
        log.warning("no logged series under %s; nothing to plot", args.run)
        return 0
    out = Path(args.out)
    if out.suffix:
        out_dir, stem = out.parent, out.stem
    else:
        out_dir, stem = out, "curve"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, (steps, vals) in sorted(series.items()):
        fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
        ax.plot(steps, vals, lw=1.2)
        ax.set_xlabel("step")
        ax.set_title(name)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_dir / f"{stem}_{name}.png", metadata={"Software": None})
        plt.close(fig)
    print(f"wrote {len(series)} plots to {out_dir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="crossmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic shape dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--naive", action="store_true", help="run every stream as its own forward pass")
    t.add_argument("--method", choices=("crossmatch", "fixmatch", "dualstream", "supervised_only"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run ablation grids")
    a.add_argument("--grid", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="plot logged loss and metric curves")
    pl.add_argument("--run", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup(args.verbose)
    try:
        return args.func(args)
    except CrossMatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
