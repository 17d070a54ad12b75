"""Bottleneck feature perturbations and batch-axis stacking of perturbed streams."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import ConfigError, InternalError

KINDS = ("none", "channel_dropout", "alpha_dropout", "feature_alpha_dropout")
# SELU negative saturation value, -lambda * alpha
_ALPHA = 1.7580993408473766


@dataclass(frozen=True)
class FeaturePerturbSpec:
    kind: str = "channel_dropout"
    rate: float = 0.0
    scale_correction: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown feature perturbation kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")

    @property
    def is_identity(self):
        return self.kind == "none" or self.rate == 0.0


NONE = FeaturePerturbSpec("none", 0.0)


@dataclass(frozen=True)
class PerturbConfig:
    kind: str = "channel_dropout"
    weak_rate: float = 0.25
    strong_rate: float = 0.75
    scale_correction: bool = True

    def __post_init__(self):
        if self.weak_rate > self.strong_rate:
            raise ConfigError(
                f"weak dropout rate {self.weak_rate} exceeds strong rate {self.strong_rate}"
            )
        # construct once to validate kind and rates
        self.weak, self.strong

    @property
    def weak(self):
        return FeaturePerturbSpec(self.kind, self.weak_rate, self.scale_correction)

    @property
    def strong(self):
        return FeaturePerturbSpec(self.kind, self.strong_rate, self.scale_correction)


def substream(step_seed: int, block_index: int) -> torch.Generator:
    """Independent generator for one perturbation block, reproducible from (step_seed, block_index)."""
    state = np.random.SeedSequence([int(step_seed), int(block_index)]).generate_state(2, dtype=np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 31 | int(state[1]) >> 1)
    return g


def perturb(features: torch.Tensor, spec: FeaturePerturbSpec, generator: torch.Generator) -> torch.Tensor:
    if features.dim() < 2:
        raise InternalError(f"features must be [B, C, ...], got shape {tuple(features.shape)}")
    if spec.is_identity:
        return features
    p = spec.rate
    if spec.kind == "alpha_dropout":
        noise_shape = features.shape
    else:
        noise_shape = features.shape[:2] + (1,) * (features.dim() - 2)
    keep = (torch.rand(noise_shape, generator=generator, dtype=torch.float64) >= p).to(features.dtype)
    if spec.kind == "channel_dropout":
        if spec.scale_correction:
            keep = keep / (1.0 - p)
        return features * keep
    a = 1.0 / np.sqrt((_ALPHA * _ALPHA * p + 1.0) * (1.0 - p))
    b = (keep - 1.0) * (_ALPHA * a) + _ALPHA * a * p
    return features * (keep * a) + b


class BlockKey(NamedTuple):
    stream: str
    perturbation: str


class BlockEntry(NamedTuple):
    key: BlockKey
    start: int
    stop: int


@dataclass
class StackedFeatures:
    skips: list
    bottleneck: torch.Tensor
    index: tuple
    block_size: int

    def validate(self, batch=None):
        validate_index(self.index, self.block_size, self.bottleneck.shape[0] if batch is None else batch)


def validate_index(index: Sequence[BlockEntry], block_size: int, batch: int):
    if block_size <= 0 or len(index) * block_size != batch:
        raise InternalError(f"index map covers {len(index)}x{block_size} rows, tensor has {batch}")
    seen = set()
    for i, entry in enumerate(index):
        if entry.start != i * block_size or entry.stop != (i + 1) * block_size:
            raise InternalError(f"index map entry {i} {entry} is not contiguous in stacking order")
        if entry.key in seen:
            raise InternalError(f"duplicate block {entry.key} in index map")
        seen.add(entry.key)


def stack_for_decoder(h_w, h_s, specs, step_seed: int) -> StackedFeatures:
    """Perturb each (source, perturbation) block and concatenate along the batch axis.

    ``h_w`` and ``h_s`` are feature pyramids (``.skips`` list and ``.bottleneck``). ``specs`` is a
    sequence of ``(stream, name, FeaturePerturbSpec)`` with stream in {"w", "s"}. Only the
    bottleneck is perturbed; block ``i`` draws from ``substream(step_seed, i)``.
    """
    sources = {"w": h_w, "s": h_s}
    if len(h_w.skips) != len(h_s.skips) or h_w.bottleneck.shape != h_s.bottleneck.shape or any(
        a.shape != b.shape for a, b in zip(h_w.skips, h_s.skips)
    ):
        raise InternalError("weak and strong feature pyramids differ in shape")
    if not specs:
        raise InternalError("no perturbation blocks requested")
    bsz = h_w.bottleneck.shape[0]
    bottlenecks, skips, index = [], [[] for _ in h_w.skips], []
    for i, (stream, name, spec) in enumerate(specs):
        src = sources[stream]
        bottlenecks.append(perturb(src.bottleneck, spec, substream(step_seed, i)))
        for level, s in enumerate(src.skips):
            skips[level].append(s)
        index.append(BlockEntry(BlockKey(stream, name), i * bsz, (i + 1) * bsz))
    cat = lambda ts: ts[0] if len(ts) == 1 else torch.cat(ts, dim=0)
    return StackedFeatures([cat(s) for s in skips], cat(bottlenecks), tuple(index), bsz)


def unstack(stacked, index=None, block_size=None) -> dict:
    """Split a stacked tensor (or StackedFeatures bottleneck) back into blocks keyed by (stream, perturbation)."""
    if isinstance(stacked, StackedFeatures):
        index, block_size, tensor = stacked.index, stacked.block_size, stacked.bottleneck
    else:
        tensor = stacked
    if index is None or block_size is None:
        raise InternalError("unstack needs the index map of the stacked call")
    validate_index(index, block_size, tensor.shape[0])
    return {e.key: tensor[e.start:e.stop] for e in index}
