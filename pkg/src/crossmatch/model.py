"""2D U-Net with an exposed bottleneck, and assembly of the seven unlabeled prediction streams."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigError
from .featperturb import PerturbConfig, perturb, stack_for_decoder, substream, unstack

STREAM_NAMES = ("p_w_n", "p_w_w", "p_w_s", "p_s_w", "p_s_s", "p_s1", "p_s2")
# block order of the stacked perturbed decoder call; rng sub-stream i belongs to block i
PERTURBED_BLOCKS = (("w", "w"), ("w", "s"), ("s", "w"), ("s", "s"))


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 16
    depth: int = 4
    normalization: str = "group"

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.normalization not in ("group", "instance", "batch"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class FeaturePyramid:
    skips: list
    bottleneck: torch.Tensor

    def split(self, sizes):
        parts = [torch.split(s, sizes, dim=0) for s in self.skips]
        bns = torch.split(self.bottleneck, sizes, dim=0)
        return [FeaturePyramid([p[i] for p in parts], bns[i]) for i in range(len(sizes))]


@dataclass
class StreamSet:
    p_w_n: torch.Tensor
    p_w_w: torch.Tensor
    p_w_s: torch.Tensor
    p_s_w: torch.Tensor
    p_s_s: torch.Tensor
    p_s1: torch.Tensor
    p_s2: torch.Tensor
    # CutMix bookkeeping for the strong views: (box mask [B,H,W] bool, partner index [B]) or None
    mix_s1: Optional[tuple] = None
    mix_s2: Optional[tuple] = None

    def __getitem__(self, name):
        return getattr(self, name)

    def maps(self):
        return {n: getattr(self, n) for n in STREAM_NAMES}


@dataclass
class CallCounter:
    encoder: int = 0
    decoder: int = 0

    def reset(self):
        self.encoder = self.decoder = 0


def _norm(kind, ch):
    if kind == "group":
        return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True)
    return nn.BatchNorm2d(ch)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, norm):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            _norm(norm, cout),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            _norm(norm, cout),
            nn.LeakyReLU(0.01, inplace=True),
        )


class UNet(nn.Module):
    """U-Net whose forward pass is split into ``encode`` and ``decode``.

    Encoder level ``i`` has ``base_width * 2**i`` channels; after ``depth`` poolings the
    bottleneck has ``base_width * 2**depth`` channels at ``1 / 2**depth`` resolution.
    """

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        w = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for i in range(cfg.depth):
            self.down.append(ConvBlock(cin, w[i], cfg.normalization))
            cin = w[i]
        self.pool = nn.MaxPool2d(2)
        self.bottom = ConvBlock(w[-2], w[-1], cfg.normalization)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up.append(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2))
            self.dec.append(ConvBlock(2 * w[i], w[i], cfg.normalization))
        self.head = nn.Conv2d(w[0], cfg.num_classes, 1)
        self.counter = CallCounter()

    def encode(self, x: torch.Tensor) -> FeaturePyramid:
        factor = 2**self.cfg.depth
        if x.dim() != 4 or x.shape[-1] % factor or x.shape[-2] % factor:
            raise ConfigError(f"input {tuple(x.shape)} must be [B,C,H,W] with H, W divisible by {factor}")
        self.counter.encoder += 1
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        return FeaturePyramid(skips, self.bottom(x))

    def decode(self, pyramid) -> torch.Tensor:
        self.counter.decoder += 1
        x = pyramid.bottleneck
        for up, dec, skip in zip(self.up, self.dec, reversed(pyramid.skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def forward(self, x):
        return self.decode(self.encode(x))


def forward_supervised(model: UNet, x_l: torch.Tensor) -> torch.Tensor:
    return model.decode(model.encode(x_l))


def _perturbed_specs(perturb_cfg: PerturbConfig):
    specs = {"w": perturb_cfg.weak, "s": perturb_cfg.strong}
    return [(i, j, specs[j]) for i, j in PERTURBED_BLOCKS]


def forward_streams(model: UNet, x_w, x_s1, x_s2, perturb_cfg: PerturbConfig, step_seed: int,
                    x_l=None, naive: bool = False):
    """Compute the seven unlabeled streams, plus supervised logits when ``x_l`` is given.

    Stacked mode: one encoder call on {x_l, x_w, x_s2}, one on x_s1; one decoder call for the
    unperturbed {sup, p_w_n, p_s2}, one stacked call for the four perturbed streams, one for p_s1.
    Naive mode runs every stream separately (3 encoder and 7 decoder calls) and draws the same
    dropout masks, so both modes agree up to float rounding.
    Returns ``(sup_logits or None, StreamSet)``.
    """
    n_l = 0 if x_l is None else x_l.shape[0]
    bu = x_w.shape[0]
    specs = _perturbed_specs(perturb_cfg)
    if naive:
        first = x_w if x_l is None else torch.cat([x_l, x_w], dim=0)
        pyr_first = model.encode(first)
        pyr_s1 = model.encode(x_s1)
        pyr_s = model.encode(x_s2)
        out_first = model.decode(pyr_first)
        sup = out_first[:n_l] if n_l else None
        p_w_n = out_first[n_l:]
        pyr_w = pyr_first.split([n_l, bu])[1] if n_l else pyr_first
        pert = {}
        for i, (stream, name, spec) in enumerate(specs):
            src = pyr_w if stream == "w" else pyr_s
            feats = FeaturePyramid(src.skips, perturb(src.bottleneck, spec, substream(step_seed, i)))
            pert[(stream, name)] = model.decode(feats)
        p_s1 = model.decode(pyr_s1)
        p_s2 = model.decode(pyr_s)
    else:
        parts = [x_w, x_s2] if x_l is None else [x_l, x_w, x_s2]
        pyr = model.encode(torch.cat(parts, dim=0))
        sizes = [p.shape[0] for p in parts]
        out = model.decode(pyr)
        pieces = torch.split(out, sizes, dim=0)
        sup = pieces[0] if n_l else None
        p_w_n, p_s2 = pieces[-2], pieces[-1]
        pyr_w, pyr_s = pyr.split(sizes)[-2:]
        stacked = stack_for_decoder(pyr_w, pyr_s, specs, step_seed)
        logits = model.decode(stacked)
        pert = unstack(logits, stacked.index, stacked.block_size)
        p_s1 = model.decode(model.encode(x_s1))
    streams = StreamSet(
        p_w_n=p_w_n,
        p_w_w=pert[("w", "w")], p_w_s=pert[("w", "s")],
        p_s_w=pert[("s", "w")], p_s_s=pert[("s", "s")],
        p_s1=p_s1, p_s2=p_s2,
    )
    return sup, streams


def forward_fixmatch(model: UNet, x_w, x_s, x_l=None):
    """One encoder and one decoder call on {x_l, x_w, x_s}: (sup_logits, weak_logits, strong_logits)."""
    parts = [x_w, x_s] if x_l is None else [x_l, x_w, x_s]
    out = model(torch.cat(parts, dim=0))
    pieces = torch.split(out, [p.shape[0] for p in parts], dim=0)
    sup = pieces[0] if x_l is not None else None
    return sup, pieces[-2], pieces[-1]
