"""Dice, Jaccard, 95% Hausdorff distance and average surface distance on hard masks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

COLUMNS = ("dice_pct", "jaccard_pct", "hd95", "asd")
HEADERS = ("Dice(%)", "Jaccard(%)", "95HD(px)", "ASD(px)")
_CROSS = ndimage.generate_binary_structure(2, 1)


def dice_jaccard(pred, gt, num_classes=2):
    """Percent Dice and Jaccard averaged over foreground classes. Both empty counts as 100."""
    dices, jacs = [], []
    for c in range(1, num_classes):
        p, g = pred == c, gt == c
        inter = np.logical_and(p, g).sum()
        ps, gs = p.sum(), g.sum()
        if ps + gs == 0:
            dices.append(100.0)
            jacs.append(100.0)
            continue
        dices.append(100.0 * 2 * inter / (ps + gs))
        jacs.append(100.0 * inter / (ps + gs - inter))
    return float(np.mean(dices)), float(np.mean(jacs))


def boundary(mask):
    """Foreground pixels with a 4-neighbour in the background; outside the image is background."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _directed(src, dst):
    # nearest dst boundary pixel for every src boundary pixel, via the exact EDT feature transform
    _, (iy, ix) = ndimage.distance_transform_edt(~dst, return_indices=True)
    ys, xs = np.nonzero(src)
    dy = (ys - iy[ys, xs]).astype(np.float64)
    dx = (xs - ix[ys, xs]).astype(np.float64)
    return np.sqrt(dy * dy + dx * dx)


def surface_distances(pred, gt) -> Optional[np.ndarray]:
    """Sorted bidirectional boundary-to-boundary distances; None when either mask is empty."""
    bp, bg = boundary(pred), boundary(gt)
    if not bp.any() or not bg.any():
        return None
    return np.sort(np.concatenate([_directed(bp, bg), _directed(bg, bp)]))


def hd95(distances):
    return float(np.percentile(distances, 95, method="linear"))


def asd(distances):
    return float(np.mean(distances))


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    empty_pred: int = 0
    empty_gt: int = 0
    undefined_distance: int = 0

    def to_dict(self):
        return {
            "mean": self.mean, "rows": self.rows, "empty_pred": self.empty_pred,
            "empty_gt": self.empty_gt, "undefined_distance": self.undefined_distance,
        }

    def to_jsonl(self):
        lines = [json.dumps({"sample": r["id"], **{k: r[k] for k in COLUMNS}}) for r in self.rows]
        lines.append(json.dumps({"sample": "__mean__", **self.mean,
                                 "empty_pred": self.empty_pred, "empty_gt": self.empty_gt,
                                 "undefined_distance": self.undefined_distance}))
        return "\n".join(lines) + "\n"

    def table(self, title="mean"):
        head = f"{'':<12}" + "".join(f"{h:>12}" for h in HEADERS)
        vals = []
        for k in COLUMNS:
            v = self.mean.get(k)
            vals.append(f"{'n/a':>12}" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:>12.2f}")
        return head + "\n" + f"{title:<12}" + "".join(vals)


def _nanmean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_masks(preds, gts, num_classes=2, ids=None) -> MetricsReport:
    """Per-sample metrics; distances are per foreground class, then averaged over defined classes."""
    report = MetricsReport()
    ids = ids or [str(i) for i in range(len(preds))]
    for sid, pred, gt in zip(ids, preds, gts):
        pred, gt = np.asarray(pred), np.asarray(gt)
        dice, jac = dice_jaccard(pred, gt, num_classes)
        hds, asds = [], []
        for c in range(1, num_classes):
            d = surface_distances(pred == c, gt == c)
            if d is not None:
                hds.append(hd95(d))
                asds.append(asd(d))
        fg_pred, fg_gt = bool((pred > 0).any()), bool((gt > 0).any())
        report.empty_pred += not fg_pred
        report.empty_gt += not fg_gt
        if not hds:
            report.undefined_distance += 1
        report.rows.append({
            "id": sid, "dice_pct": dice, "jaccard_pct": jac,
            "hd95": _nanmean(hds), "asd": _nanmean(asds),
        })
    report.mean = {k: _nanmean(r[k] for r in report.rows) for k in COLUMNS}
    return report


def evaluate_model(model, records, batch_size=16, num_classes=None) -> MetricsReport:
    """Argmax of the unperturbed forward pass against each record's evaluation mask."""
    import torch

    num_classes = num_classes or model.cfg.num_classes
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    try:
        with torch.no_grad():
            for i in range(0, len(records), batch_size):
                chunk = records[i:i + batch_size]
                x = torch.from_numpy(np.stack([_as_chw(r.image) for r in chunk])).to(dtype)
                preds.extend(model(x).argmax(1).numpy())
    finally:
        model.train(was_training)
    return evaluate_masks(preds, [r.eval_mask() for r in records], num_classes, [r.id for r in records])


def _as_chw(image):
    return image[None] if image.ndim == 2 else image
