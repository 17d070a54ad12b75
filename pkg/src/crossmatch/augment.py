"""Weak (geometric) and strong (intensity + CutMix) image perturbations with replayable traces."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError

KINDS = (
    "flip_h", "flip_v", "rot90", "crop_resize", "brightness",
    "contrast", "gamma", "gauss_blur", "gauss_noise", "cutmix",
)
GEOMETRIC = ("flip_h", "flip_v", "rot90", "crop_resize")


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class WeakConfig:
    flip_p: float = 0.5
    rotate: bool = True
    crop_p: float = 0.5
    crop_scale: tuple = (0.7, 1.0)
    # output (h, w); None keeps the input size
    crop_size: Optional[tuple] = None


@dataclass(frozen=True)
class StrongConfig:
    brightness_p: float = 0.5
    brightness: float = 0.25
    contrast_p: float = 0.5
    contrast: tuple = (0.75, 1.25)
    gamma_p: float = 0.5
    gamma: tuple = (0.75, 1.25)
    blur_p: float = 0.5
    blur_sigma: tuple = (0.0, 1.5)
    noise_p: float = 0.5
    noise_sigma: float = 0.05
    cutmix_p: float = 0.5
    cutmix_area: tuple = (0.1, 0.4)

    @classmethod
    def disabled(cls):
        return cls(brightness_p=0, contrast_p=0, gamma_p=0, blur_p=0, noise_p=0, cutmix_p=0)


@dataclass(frozen=True)
class AugmentConfig:
    weak: WeakConfig = WeakConfig()
    strong: StrongConfig = StrongConfig()

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        weak = {k: tuple(v) if isinstance(v, list) else v for k, v in (d.get("weak") or {}).items()}
        strong = {k: tuple(v) if isinstance(v, list) else v for k, v in (d.get("strong") or {}).items()}
        try:
            return cls(WeakConfig(**weak), StrongConfig(**strong))
        except TypeError as e:
            raise ConfigError(f"bad augment section: {e}") from e

    def to_dict(self):
        return asdict(self)


class UnlabeledViews(NamedTuple):
    weak: np.ndarray
    strong1: np.ndarray
    strong2: np.ndarray
    traces: tuple


def _spatial(fn, image):
    if image.ndim == 2:
        return fn(image)
    return np.stack([fn(c) for c in image])


def _resize_crop(arr, box, out_hw, order):
    y0, x0, ch, cw = box
    oh, ow = out_hw
    ys = y0 + (np.arange(oh) + 0.5) * ch / oh - 0.5
    xs = x0 + (np.arange(ow) + 0.5) * cw / ow - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(arr, grid, order=order, mode="nearest").astype(arr.dtype)


def _apply_geometric(op, image, mask):
    p = op.params
    if op.kind == "flip_h":
        fn = lambda a: a[:, ::-1]
    elif op.kind == "flip_v":
        fn = lambda a: a[::-1, :]
    elif op.kind == "rot90":
        fn = lambda a: np.rot90(a, p["k"])
    else:
        box, out = p["box"], p["size"]
        image = _spatial(lambda a: _resize_crop(a.astype(np.float64), box, out, 1), image).astype(np.float32)
        mask = None if mask is None else _resize_crop(mask, box, out, 0)
        return image, mask
    image = np.ascontiguousarray(_spatial(fn, image))
    mask = None if mask is None else np.ascontiguousarray(fn(mask))
    return image, mask


def _apply_intensity(op, image, partner=None):
    p = op.params
    x = image.astype(np.float64)
    if op.kind == "brightness":
        x = x + p["delta"]
    elif op.kind == "contrast":
        mean = x.mean()
        x = (x - mean) * p["factor"] + mean
    elif op.kind == "gamma":
        x = np.power(x, p["gamma"])
    elif op.kind == "gauss_blur":
        sigma = p["sigma"] if x.ndim == 2 else (0, p["sigma"], p["sigma"])
        x = ndimage.gaussian_filter(x, sigma)
    elif op.kind == "gauss_noise":
        x = x + np.random.default_rng(p["seed"]).normal(0.0, p["sigma"], size=x.shape)
    elif op.kind == "cutmix":
        if partner is None:
            raise ConfigError("replaying a cutmix op needs the partner image")
        y0, x0, y1, x1 = p["box"]
        x = x.copy()
        x[..., y0:y1, x0:x1] = np.asarray(partner, dtype=np.float64)[..., y0:y1, x0:x1]
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def apply_op(op: AugmentOp, image, mask=None, partner=None):
    if op.kind in GEOMETRIC:
        return _apply_geometric(op, image, mask)
    return _apply_intensity(op, image, partner), mask


def replay(trace, image, mask=None, partner=None):
    """Re-apply a recorded trace. Bit-identical to the call that produced it."""
    for op in trace:
        image, mask = apply_op(op, image, mask, partner)
    return image, mask


def _weak_ops(shape, rng, cfg: WeakConfig):
    h, w = shape
    out = tuple(cfg.crop_size) if cfg.crop_size else (h, w)
    if out[0] > h or out[1] > w:
        raise ConfigError(f"crop size {out} larger than image {(h, w)}")
    ops = []
    if rng.random() < cfg.flip_p:
        ops.append(AugmentOp("flip_h"))
    if rng.random() < cfg.flip_p:
        ops.append(AugmentOp("flip_v"))
    k = int(rng.integers(0, 4)) if cfg.rotate else 0
    if k:
        ops.append(AugmentOp("rot90", {"k": k}))
        if k % 2:
            h, w = w, h
    if rng.random() < cfg.crop_p:
        s = rng.uniform(*cfg.crop_scale)
        # the region never shrinks below the output size
        ch, cw = max(out[0], int(round(s * h))), max(out[1], int(round(s * w)))
        y0, x0 = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        if (ch, cw) != (h, w) or out != (h, w):
            ops.append(AugmentOp("crop_resize", {"box": (y0, x0, ch, cw), "size": out}))
    elif out != (h, w):
        y0, x0 = int(rng.integers(0, h - out[0] + 1)), int(rng.integers(0, w - out[1] + 1))
        ops.append(AugmentOp("crop_resize", {"box": (y0, x0, out[0], out[1]), "size": out}))
    return ops


def weak_augment(sample, rng, cfg: WeakConfig = WeakConfig()):
    """Random flips, 90-degree rotation and crop-resize; the mask follows the image."""
    if sample.image.min() < 0 or sample.image.max() > 1:
        raise ConfigError(f"sample {sample.id!r} image is outside [0, 1]")
    trace = _weak_ops(sample.image.shape[-2:], rng, cfg)
    image, mask = replay(trace, sample.image, sample.mask)
    return replace(sample, image=image, mask=mask, _heldout_mask=None), trace


def _cutmix_box(shape, rng, area):
    h, w = shape
    frac = rng.uniform(*area)
    ratio = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    bh = min(h, max(1, int(round(np.sqrt(frac * h * w * ratio)))))
    bw = min(w, max(1, int(round(np.sqrt(frac * h * w / ratio)))))
    y0, x0 = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
    return (y0, x0, y0 + bh, x0 + bw)


def _strong_ops(shape, rng, cfg: StrongConfig, has_partner):
    ops = []
    if rng.random() < cfg.brightness_p:
        ops.append(AugmentOp("brightness", {"delta": float(rng.uniform(-cfg.brightness, cfg.brightness))}))
    if rng.random() < cfg.contrast_p:
        ops.append(AugmentOp("contrast", {"factor": float(rng.uniform(*cfg.contrast))}))
    if rng.random() < cfg.gamma_p:
        ops.append(AugmentOp("gamma", {"gamma": float(rng.uniform(*cfg.gamma))}))
    if rng.random() < cfg.blur_p:
        ops.append(AugmentOp("gauss_blur", {"sigma": float(rng.uniform(*cfg.blur_sigma))}))
    if rng.random() < cfg.noise_p:
        ops.append(AugmentOp("gauss_noise", {
            "sigma": float(rng.uniform(0, cfg.noise_sigma)),
            "seed": int(rng.integers(0, 2**63 - 1)),
        }))
    if has_partner and rng.random() < cfg.cutmix_p:
        ops.append(AugmentOp("cutmix", {"box": _cutmix_box(shape, rng, cfg.cutmix_area)}))
    return ops


def strong_augment(weak_sample, rng, partner=None, cfg: StrongConfig = StrongConfig()):
    """Intensity jitter, blur, noise and optional CutMix on top of a weak view. Image only.

    ``partner`` is another weak sample (or its image array) used as the CutMix source.
    """
    partner_image = getattr(partner, "image", partner)
    trace = _strong_ops(weak_sample.image.shape[-2:], rng, cfg, partner_image is not None)
    image, _ = replay(trace, weak_sample.image, None, partner_image)
    return replace(weak_sample, image=image), trace


def cutmix_box(trace):
    """The (y0, x0, y1, x1) CutMix box of a strong trace, or None."""
    for op in trace:
        if op.kind == "cutmix":
            return tuple(op.params["box"])
    return None


def make_unlabeled_views(sample, rng, partner=None, cfg: AugmentConfig = AugmentConfig()) -> UnlabeledViews:
    """x_w, then two independent strong draws on top of it."""
    weak, wtrace = weak_augment(sample, rng, cfg.weak)
    s1, t1 = strong_augment(weak, rng, partner, cfg.strong)
    s2, t2 = strong_augment(weak, rng, partner, cfg.strong)
    return UnlabeledViews(weak.image, s1.image, s2.image, (wtrace, t1, t2))


def box_mask(box, shape):
    m = np.zeros(shape, dtype=bool)
    if box is not None:
        y0, x0, y1, x1 = box
        m[y0:y1, x0:x1] = True
    return m


def make_unlabeled_batch(samples, rng, cfg: AugmentConfig = AugmentConfig(), n_strong=2):
    """Weak views of a batch plus ``n_strong`` strong views each.

    Sample ``b`` takes its CutMix partner from weak view ``(b + 1) % B``. Returns
    ``(weak [B,...], [strong_k [B,...]], [(box_masks [B,H,W], partner_idx [B]) or None])``.
    """
    weak = [weak_augment(s, rng, cfg.weak)[0] for s in samples]
    n = len(weak)
    partners = [(b + 1) % n for b in range(n)]
    strong, mixes = [], []
    for _ in range(n_strong):
        imgs, boxes = [], []
        for b, w in enumerate(weak):
            partner = weak[partners[b]].image if n > 1 else None
            s, trace = strong_augment(w, rng, partner, cfg.strong)
            imgs.append(s.image)
            boxes.append(cutmix_box(trace))
        strong.append(np.stack(imgs))
        shape = weak[0].image.shape[-2:]
        mixes.append(None if all(b is None for b in boxes)
                     else (np.stack([box_mask(b, shape) for b in boxes]), np.array(partners)))
    return np.stack([w.image for w in weak]), strong, mixes
