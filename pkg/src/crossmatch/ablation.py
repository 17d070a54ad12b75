"""Ablation grids over loss components, criteria and hyperparameters, and method comparisons."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .metrics import COLUMNS, HEADERS
from .trainer import fit

log = logging.getLogger(__name__)

SPLITS = (0.05, 0.10, 0.20)
# grids without a split axis run at 10% labels
SINGLE_SPLIT = 0.10

# row order is fixed so tables line up across runs
TKD_SUBSETS = (
    ("p_w_w", "p_s_s"),
    ("p_s_w", "p_w_s"),
    ("p_s_w", "p_w_s", "p_s_s"),
    ("p_w_w", "p_w_s", "p_s_s"),
    ("p_w_w", "p_s_w", "p_s_s"),
    ("p_w_w", "p_s_w", "p_w_s"),
    ("p_w_w", "p_s_w", "p_w_s", "p_s_s"),
)
DKD_SUBSETS = ((), ("w",), ("s",), ("w", "s"))
IP_SUBSETS = ((), ("s1",), ("s2",), ("s1", "s2"))
CRITERIA = (("kl", 1.0), ("kl", 2.0), ("ce", 1.0), ("dice", 1.0))
SUP_KINDS = ("ce", "dice", "mix")
ETAS = tuple(round(0.10 + 0.05 * i, 2) for i in range(9))
TAUS = (0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99)
GAPS = ((0.5, 0.5), (0.375, 0.625), (0.25, 0.75), (0.125, 0.875))
DROPOUT_KINDS = ("channel_dropout", "alpha_dropout", "feature_alpha_dropout")

GRIDS = ("dkd", "tkd", "ip", "sup_type", "loss_type", "eta", "tau", "gap", "dropout_kind")


@dataclass
class GridRow:
    grid: str
    axes: dict
    overrides: dict
    full: bool = False


def _split_rows(grid, splits, inner):
    rows = []
    for frac in splits:
        for axes, overrides, full in inner:
            ov = {k: dict(v) for k, v in overrides.items()}
            ov.setdefault("data", {})["labeled_fraction"] = frac
            rows.append(GridRow(grid, {"labeled_fraction": frac, **axes}, ov, full))
    return rows


def _single_rows(grid, inner):
    return _split_rows(grid, (SINGLE_SPLIT,), inner)


def grid_rows(name, splits=SPLITS):
    """Row definitions of one ablation grid. ``full`` marks the all-components default row."""
    if name == "dkd":
        return _split_rows(name, splits, [
            ({"dkd_w": "w" in s, "dkd_s": "s" in s}, {"loss": {"dkd_terms": list(s)}}, s == ("w", "s"))
            for s in DKD_SUBSETS
        ])
    if name == "tkd":
        return _single_rows(name, [
            ({f"tkd_{n}": n in s for n in ("p_w_w", "p_s_w", "p_w_s", "p_s_s")},
             {"loss": {"tkd_students": list(s)}}, len(s) == 4)
            for s in TKD_SUBSETS
        ])
    if name == "ip":
        return _split_rows(name, splits, [
            ({"ip_s1": "s1" in s, "ip_s2": "s2" in s}, {"loss": {"ip_streams": list(s)}}, s == ("s1", "s2"))
            for s in IP_SUBSETS
        ])
    if name == "sup_type":
        return _single_rows(name, [({"sup_kind": k}, {"loss": {"sup_kind": k}}, k == "mix") for k in SUP_KINDS])
    if name == "loss_type":
        return _split_rows(name, splits, [
            ({"h_kind": k, "temperature": t}, {"loss": {"h_kind": k, "temperature": t}}, k == "dice")
            for k, t in CRITERIA
        ])
    if name == "eta":
        return _single_rows(name, [({"eta": e}, {"loss": {"eta": e}}, e == 0.3) for e in ETAS])
    if name == "tau":
        return _single_rows(name, [({"tau": t}, {"loss": {"tau": t}}, t == 0.85) for t in TAUS])
    if name == "gap":
        return _single_rows(name, [
            ({"weak_rate": lo, "strong_rate": hi, "gap": round(hi - lo, 3)},
             {"perturb": {"weak_rate": lo, "strong_rate": hi}}, (lo, hi) == (0.25, 0.75))
            for lo, hi in GAPS
        ])
    if name == "dropout_kind":
        return _split_rows(name, splits, [
            ({"dropout_kind": k}, {"perturb": {"kind": k}}, k == "channel_dropout") for k in DROPOUT_KINDS
        ])
    raise ConfigError(f"unknown ablation grid {name!r}; expected one of {GRIDS}")


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        with open(out_dir / "ablation.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)
        with open(out_dir / "ablation.jsonl", "w") as f:
            for r in self.rows:
                f.write(json.dumps(r) + "\n")
        (out_dir / "ablation.txt").write_text(self.format())

    def format(self):
        lines = []
        for grid in dict.fromkeys(r["grid"] for r in self.rows):
            rows = [r for r in self.rows if r["grid"] == grid]
            axes = [k for k in rows[0] if k.startswith("axis.")]
            head = "".join(f"{a[5:]:>18}" for a in axes) + "".join(f"{h:>12}" for h in HEADERS)
            lines.append(f"[{grid}]")
            lines.append(head)
            for r in rows:
                cells = "".join(f"{str(r[a]):>18}" for a in axes)
                cells += "".join(f"{'n/a':>12}" if r.get(c) is None else f"{r[c]:>12.2f}" for c in COLUMNS)
                lines.append(cells + ("  *" if r["full"] else ""))
            lines.append("")
        return "\n".join(lines)


def run_ablation(grids, base: RunConfig, train_records, val_records, splits=SPLITS, iterations=None):
    """Train one model per grid row from identical seeds and collect final-weight metrics."""
    table = AblationTable()
    for name in grids:
        for row in grid_rows(name, splits):
            overrides = {k: dict(v) for k, v in row.overrides.items()}
            if iterations is not None:
                overrides.setdefault("train", {})["iterations"] = iterations
            cfg = base.with_overrides(**overrides)
            log.info("ablation %s %s", name, row.axes)
            _, runlog = fit(cfg, train_records, val_records)
            final = runlog.metrics[-1] if runlog.metrics else {}
            residual = max((abs(r["total"] - (r["sup"] + r["ip"] + (1 - cfg.loss.eta) * r["tkd"]
                                              + cfg.loss.eta * r["dkd"])) for r in runlog.losses), default=0.0)
            last = runlog.losses[-1] if runlog.losses else {}
            table.rows.append({
                "grid": name,
                **{f"axis.{k}": v for k, v in row.axes.items()},
                "full": row.full,
                "seed": cfg.train.seed,
                "config_hash": cfg.config_hash(),
                **{c: final.get(c) for c in COLUMNS},
                **{f"loss.{k}": last.get(k) for k in ("sup", "ip", "tkd", "dkd", "total")},
                "eta": cfg.loss.eta,
                "affine_residual": residual,
            })
    return table


def compare_methods(base: RunConfig, train_records, val_records, methods, seeds):
    """Final validation Dice per (method, seed) and the seed mean per method."""
    results = {}
    for method in methods:
        dices = []
        for seed in seeds:
            cfg = base.with_overrides(train={"method": method, "seed": seed}, data={"split_seed": seed})
            _, runlog = fit(cfg, train_records, val_records)
            dices.append(runlog.metrics[-1]["dice_pct"])
            log.info("%s seed %d dice %.2f", method, seed, dices[-1])
        results[method] = {"per_seed": dices, "mean": float(np.mean(dices))}
    return results
