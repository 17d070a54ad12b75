"""Training loop: batch assembly, stream forward, loss combination, optimisation, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses as L
from .augment import make_unlabeled_batch, weak_augment
from .config import RunConfig
from .datasets import SplitSpec, batch_schedule, make_split
from .errors import ConfigError, NumericError
from .metrics import COLUMNS, evaluate_model
from .model import UNet, forward_fixmatch, forward_streams, forward_supervised

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def step_seed(seed, step):
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1, dtype=np.uint64)[0] >> 1)


def step_rng(seed, step):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), 1]))


@dataclass
class TrainState:
    config: RunConfig
    model: UNet
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    step: int = 0

    @property
    def dtype(self):
        return DTYPES[self.config.train.dtype]


@dataclass
class RunLog:
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    def deterministic_losses(self):
        """Loss rows without the wall-clock column."""
        return [{k: v for k, v in row.items() if k != "ms"} for row in self.losses]

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.losses:
            keys = list(dict.fromkeys(k for row in self.losses for k in row))
            with open(out_dir / "losses.csv", "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=keys)
                w.writeheader()
                w.writerows(self.losses)
        with open(out_dir / "metrics.jsonl", "w") as f:
            for row in self.metrics:
                f.write(json.dumps(row) + "\n")


def _effective_lr_lambda(cfg):
    total = max(1, cfg.iterations)
    if cfg.lr_schedule == "constant":
        return lambda step: 1.0
    return lambda step: max(0.0, 1.0 - step / total) ** cfg.poly_power


def build_state(config: RunConfig) -> TrainState:
    tc = config.train
    torch.manual_seed(tc.seed)
    model = UNet(config.net).to(DTYPES[tc.dtype])
    if tc.optimizer == "sgd_momentum":
        opt = torch.optim.SGD(model.parameters(), lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    else:
        opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, betas=tuple(tc.betas), weight_decay=tc.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _effective_lr_lambda(tc))
    return TrainState(config, model, opt, sched)


def _chw(image):
    return image[None] if image.ndim == 2 else image


def _tensor(arrays, dtype):
    return torch.from_numpy(np.stack([_chw(a) for a in arrays]).astype(np.float64)).to(dtype)


def _mix_tensor(mix):
    if mix is None:
        return None
    boxes, partners = mix
    return torch.from_numpy(boxes), torch.from_numpy(partners).long()


def compute_losses(state: TrainState, labeled_batch, unlabeled_batch, rng, seed_for_step, naive=None):
    """Forward every stream for one step and return (total tensor, LossReport)."""
    cfg = state.config
    method = cfg.train.method
    lcfg = cfg.loss
    if method == "dualstream":
        lcfg = L.LossConfig(**{**lcfg.to_dict(), "tkd_students": ("p_w_w", "p_s_s")})
    naive = cfg.train.naive_mode if naive is None else naive
    model, dtype = state.model, state.dtype

    views = [weak_augment(s, rng, cfg.augment.weak)[0] for s in labeled_batch]
    x_l = _tensor([v.image for v in views], dtype)
    y_l = torch.from_numpy(np.stack([v.mask for v in views]).astype(np.int64))
    zero = torch.zeros((), dtype=dtype)
    coverage = {}

    if method == "supervised_only" or not unlabeled_batch:
        sup_logits = forward_supervised(model, x_l)
        sup = L.supervised_loss(sup_logits, y_l, lcfg.sup_kind, lcfg.dice_smooth)
        return L.total_loss(sup, zero, zero, zero, lcfg.eta)

    n_strong = 1 if method == "fixmatch" else 2
    weak, strong, mixes = make_unlabeled_batch(unlabeled_batch, rng, cfg.augment, n_strong)
    x_w = _tensor(list(weak), dtype)
    xs = [_tensor(list(s), dtype) for s in strong]

    if method == "fixmatch":
        sup_logits, p_w, p_s = forward_fixmatch(model, x_w, xs[0], x_l)
        sup = L.supervised_loss(sup_logits, y_l, lcfg.sup_kind, lcfg.dice_smooth)
        teacher = L.mix_teacher(p_w.detach(), _mix_tensor(mixes[0]))
        mask = L.confidence_mask(L.softmax_probs(teacher), lcfg.tau)
        coverage["ip_s1"] = float(mask.mean())
        ip = L.distill(teacher, p_s, mask, lcfg, kind="dice")
        return L.total_loss(sup, ip, zero, zero, lcfg.eta, coverage)

    sup_logits, streams = forward_streams(
        model, x_w, xs[0], xs[1], cfg.perturb, seed_for_step, x_l=x_l, naive=naive,
    )
    streams.mix_s1, streams.mix_s2 = _mix_tensor(mixes[0]), _mix_tensor(mixes[1])
    sup = L.supervised_loss(sup_logits, y_l, lcfg.sup_kind, lcfg.dice_smooth)
    ip = L.ip_loss(streams, lcfg, coverage)
    tkd = L.tkd_loss(streams, lcfg, coverage)
    dkd = L.dkd_loss(streams, lcfg, coverage)
    return L.total_loss(sup, ip, tkd, dkd, lcfg.eta, coverage)


def train_step(state: TrainState, labeled_batch, unlabeled_batch, naive=None) -> L.LossReport:
    """One optimizer update. All randomness derives from (train.seed, state.step)."""
    seed = state.config.train.seed
    rng = step_rng(seed, state.step)
    state.model.counter.reset()
    state.model.train()
    total, report = compute_losses(state, labeled_batch, unlabeled_batch, rng, step_seed(seed, state.step), naive)
    terms = {k: getattr(report, k) for k in ("sup", "ip", "tkd", "dkd", "total")}
    if not all(math.isfinite(v) for v in terms.values()):
        raise NumericError(f"non-finite loss at step {state.step}: {terms}", terms)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    return report


def _rng_hash(seed, step):
    return hashlib.sha1(f"{seed}:{step}:{step_seed(seed, step)}".encode()).hexdigest()[:12]


def save_checkpoint(state: TrainState, runlog: RunLog, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "checkpoint.pt"
    torch.save({
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "step": state.step,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "losses": runlog.losses,
        "metrics": runlog.metrics,
    }, path)
    return path


def _ckpt_file(path):
    path = Path(path)
    return path / "checkpoint.pt" if path.is_dir() else path


def load_checkpoint(path, config: Optional[RunConfig] = None):
    """Restore (TrainState, RunLog). With ``config`` given, its hash must match the checkpoint's."""
    from .config import from_dict

    path = _ckpt_file(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    saved = from_dict(blob["config"])
    if config is not None and config.config_hash() != blob["config_hash"]:
        raise ConfigError(
            f"config hash {config.config_hash()} does not match checkpoint hash {blob['config_hash']}; refusing to resume"
        )
    state = build_state(saved)
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.scheduler.load_state_dict(blob["scheduler"])
    state.step = blob["step"]
    torch.set_rng_state(blob["torch_rng"])
    return state, RunLog(list(blob["losses"]), list(blob["metrics"]))


def total_iterations(config: RunConfig, n_labeled, n_unlabeled):
    tc = config.train
    if tc.epochs is None:
        return tc.iterations
    half = tc.batch_size // 2
    pool = max(n_labeled, n_unlabeled if tc.method != "supervised_only" else 0)
    return tc.epochs * math.ceil(pool / half)


def _eval_row(state, val, step):
    report = evaluate_model(state.model, val)
    return {"step": step, **{k: report.mean[k] for k in COLUMNS},
            "empty_pred": report.empty_pred, "undefined_distance": report.undefined_distance}


def fit(config: RunConfig, train_records, val_records=None, out_dir=None, resume=None, stop_at=None):
    """Run the batch schedule to completion (or to ``stop_at``). Returns (TrainState, RunLog).

    Evaluation uses the final weights. Checkpoints go to ``<out_dir>/ckpt_<step>``.
    """
    labeled, unlabeled = make_split(
        train_records, SplitSpec(config.data.labeled_fraction, config.data.split_seed, config.data.num_classes)
    )
    if config.train.method == "supervised_only":
        unlabeled = []
    iterations = total_iterations(config, len(labeled), len(unlabeled))
    if resume is not None:
        state, runlog = load_checkpoint(resume, config)
    else:
        state, runlog = build_state(config), RunLog()
    tc = config.train
    schedule = batch_schedule(labeled, unlabeled, tc.batch_size, iterations, tc.seed)
    end = iterations if stop_at is None else min(stop_at, iterations)
    for lb, ub in itertools.islice(schedule, state.step, end):
        t0 = time.perf_counter()
        step = state.step
        report = train_step(state, lb, ub)
        row = {"step": step, **report.row(), "lr": state.optimizer.param_groups[0]["lr"],
               "encoder_calls": state.model.counter.encoder, "decoder_calls": state.model.counter.decoder,
               "rng_hash": _rng_hash(tc.seed, step), "ms": 1000.0 * (time.perf_counter() - t0)}
        runlog.losses.append(row)
        if tc.eval_every and val_records and state.step % tc.eval_every == 0 and state.step < iterations:
            runlog.metrics.append(_eval_row(state, val_records, state.step))
        if out_dir is not None and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
            save_checkpoint(state, runlog, Path(out_dir) / f"ckpt_{state.step}")
        if step % 100 == 0:
            log.info("step %d total %.4f sup %.4f", step, report.total, report.sup)
    if val_records and state.step == iterations:
        runlog.metrics.append(_eval_row(state, val_records, state.step))
    if out_dir is not None:
        save_checkpoint(state, runlog, Path(out_dir) / f"ckpt_{state.step}")
        runlog.save(out_dir)
    return state, runlog


def parameter_vector(model):
    return torch.cat([p.detach().reshape(-1).to(torch.float64) for p in model.parameters()])


def measure_step_cost(config: RunConfig, train_records, n_steps=10, warmup=2, naive=None):
    """Mean wall-clock ms per step after warmup, with encoder/decoder call counts of the last step."""
    labeled, unlabeled = make_split(
        train_records, SplitSpec(config.data.labeled_fraction, config.data.split_seed, config.data.num_classes)
    )
    if config.train.method == "supervised_only":
        unlabeled = []
    state = build_state(config)
    sched = batch_schedule(labeled, unlabeled, config.train.batch_size, warmup + n_steps, config.train.seed)
    times = []
    for i, (lb, ub) in enumerate(sched):
        t0 = time.perf_counter()
        train_step(state, lb, ub, naive=naive)
        if i >= warmup:
            times.append(1000.0 * (time.perf_counter() - t0))
    return {
        "method": config.train.method,
        "naive": config.train.naive_mode if naive is None else naive,
        "ms_per_step": float(np.mean(times)) if times else float("nan"),
        "encoder_calls": state.model.counter.encoder,
        "decoder_calls": state.model.counter.decoder,
    }
