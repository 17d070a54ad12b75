"""Synthetic shape data, folder ingestion, seeded splits and batch schedules."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from matplotlib.path import Path as MplPath
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")
# synthetic intensities are snapped to this grid so 16-bit PNG storage is lossless
INTENSITY_LEVELS = 65535


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    labeled: bool = False
    # ground truth of unlabeled samples, only reachable through eval_mask()
    _heldout_mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.labeled and self.mask is None:
            raise DataError(f"sample {self.id!r} is labeled but has no mask")
        if self.mask is not None and self.mask.shape != self.image.shape[-2:]:
            raise DataError(
                f"sample {self.id!r}: mask shape {self.mask.shape} does not match "
                f"image shape {self.image.shape[-2:]}"
            )

    def withhold_mask(self) -> "SampleRecord":
        """Unlabeled copy; the mask moves behind eval_mask()."""
        gt = self.mask if self.mask is not None else self._heldout_mask
        return replace(self, mask=None, labeled=False, _heldout_mask=gt)

    def eval_mask(self) -> Optional[np.ndarray]:
        """Ground truth for evaluation only. Never feed this into training."""
        return self.mask if self.mask is not None else self._heldout_mask


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: float
    seed: int = 0
    num_classes: int = 2


@dataclass(frozen=True)
class SynthSpec:
    count: int = 200
    height: int = 128
    width: int = 128
    num_classes: int = 2
    shapes_per_image: tuple = (1, 3)
    noise_sigma: float = 0.08
    blur_sigma: float = 1.0
    seed: int = 0
    # shape size as a fraction of min(height, width): semi-axis / polygon radius
    size_range: tuple = (0.1, 0.25)
    # intensity offset of a shape above the local background
    contrast_range: tuple = (0.12, 0.35)
    # amplitude of the linear background bias field
    bias_amplitude: float = 0.15

    def validate(self):
        if self.count < 0:
            raise ConfigError("synth count must be >= 0")
        if self.height < 8 or self.width < 8:
            raise ConfigError("synth images must be at least 8x8")
        if self.num_classes < 2:
            raise ConfigError("synth num_classes must be >= 2")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ConfigError("shapes_per_image must be a range with lower bound >= 1")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("noise_sigma and blur_sigma must be >= 0")
        smin, smax = self.size_range
        if not 0 < smin <= smax < 0.5:
            raise ConfigError("size_range must satisfy 0 < lo <= hi < 0.5")


def quantize(image):
    return (np.round(np.clip(image, 0.0, 1.0) * INTENSITY_LEVELS) / INTENSITY_LEVELS).astype(np.float32)


def _ellipse_mask(rng, h, w, radius):
    cy, cx = rng.uniform(radius, h - radius), rng.uniform(radius, w - radius)
    ry = radius * rng.uniform(0.5, 1.0)
    rx = radius * rng.uniform(0.5, 1.0)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _polygon_mask(rng, h, w, radius):
    cy, cx = rng.uniform(radius, h - radius), rng.uniform(radius, w - radius)
    n = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = radius * rng.uniform(0.6, 1.0, size=n)
    verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return MplPath(verts).contains_points(pts).reshape(h, w)


def _render(spec: SynthSpec, rng):
    """Clean (pre-noise, pre-blur) image and its exact mask."""
    h, w = spec.height, spec.width
    while True:
        base = rng.uniform(0.2, 0.45)
        gy, gx = rng.uniform(-1, 1, size=2) * spec.bias_amplitude
        yy, xx = np.mgrid[0:h, 0:w]
        clean = base + gy * (yy / (h - 1) - 0.5) + gx * (xx / (w - 1) - 0.5)
        mask = np.zeros((h, w), dtype=np.uint8)
        n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
        for _ in range(n_shapes):
            radius = rng.uniform(*spec.size_range) * min(h, w)
            region = np.zeros((h, w), dtype=bool)
            # reject slivers (near-collinear polygons)
            while region.sum() < 0.5 * radius * radius:
                region = _ellipse_mask(rng, h, w, radius) if rng.random() < 0.5 else _polygon_mask(rng, h, w, radius)
            cls = int(rng.integers(1, spec.num_classes))
            offset = rng.uniform(*spec.contrast_range)
            clean = np.where(region, clean + offset * cls / (spec.num_classes - 1), clean)
            mask[region] = cls
        if mask.any():
            return np.clip(clean, 0.0, 1.0), mask


def synth_generate(spec: SynthSpec) -> list[SampleRecord]:
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    records = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        clean, mask = _render(spec, rng)
        image = ndimage.gaussian_filter(clean, spec.blur_sigma) if spec.blur_sigma > 0 else clean
        if spec.noise_sigma > 0:
            image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
        records.append(SampleRecord(id=f"synth_{i:05d}", image=quantize(image), mask=mask, labeled=True))
    return records


def fingerprint(records: Sequence[SampleRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.id.encode())
        h.update(np.ascontiguousarray(r.image).tobytes())
        gt = r.eval_mask()
        if gt is not None:
            h.update(np.ascontiguousarray(gt).tobytes())
    return h.hexdigest()


def _read_image(path):
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.dtype == np.uint8:
        img = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.uint16, np.int32, np.uint32):
        img = arr.astype(np.float64) / INTENSITY_LEVELS
    elif np.issubdtype(arr.dtype, np.floating):
        img = arr.astype(np.float64)
    else:
        raise DataError(f"unsupported image dtype {arr.dtype} in {path}")
    if img.ndim == 3:
        img = img[..., :3].transpose(2, 0, 1)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _find(directory: Path, stem: str):
    for suffix in IMAGE_SUFFIXES:
        p = directory / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def load_folder(images_dir, masks_dir=None, num_classes=2) -> list[SampleRecord]:
    """Load ``images_dir`` (and masks with matching stems from ``masks_dir``).

    With ``masks_dir`` given every image is declared labeled and must have a mask.
    """
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise DataError(f"image directory {images_dir} does not exist")
    paths = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        log.warning("no images found in %s", images_dir)
        return []
    records = []
    for p in paths:
        image = _read_image(p)
        mask = None
        if masks_dir is not None:
            mp = _find(Path(masks_dir), p.stem)
            if mp is None:
                raise DataError(f"missing mask for labeled sample {p.stem!r}")
            with Image.open(mp) as im:
                mask = np.array(im)
            if mask.ndim != 2:
                raise DataError(f"mask {mp} must be single-channel")
            if mask.shape != image.shape[-2:]:
                raise DataError(f"shape mismatch for {p.stem!r}: image {image.shape[-2:]} vs mask {mask.shape}")
            if mask.size and int(mask.max()) >= num_classes:
                raise DataError(f"mask {mp} has class id {int(mask.max())} >= num_classes={num_classes}")
            mask = mask.astype(np.uint8 if num_classes <= 256 else np.int64)
        records.append(SampleRecord(id=p.stem, image=image, mask=mask, labeled=mask is not None))
    return records


def save_folder(records: Sequence[SampleRecord], root) -> Path:
    """Write ``<root>/images/<id>.png`` (16-bit grayscale) and ``<root>/masks/<id>.png``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for r in records:
        if r.image.ndim != 2:
            raise DataError("save_folder only writes grayscale images")
        levels = np.round(np.clip(r.image, 0, 1) * INTENSITY_LEVELS).astype(np.uint16)
        Image.fromarray(levels).save(root / "images" / f"{r.id}.png")
        gt = r.eval_mask()
        if gt is not None:
            Image.fromarray(gt.astype(np.uint8)).save(root / "masks" / f"{r.id}.png")
    return root


def load_dataset(root, num_classes=2) -> list[SampleRecord]:
    root = Path(root)
    masks = root / "masks"
    return load_folder(root / "images", masks if masks.is_dir() else None, num_classes)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def make_split(records: Sequence[SampleRecord], spec: SplitSpec):
    """Seeded random labeled/unlabeled partition. Order of ``records`` is preserved in both parts."""
    if not 0 < spec.labeled_fraction <= 1:
        raise ConfigError(f"labeled_fraction must be in (0, 1], got {spec.labeled_fraction}")
    n_labeled = _round_half_up(spec.labeled_fraction * len(records))
    if n_labeled < 1:
        raise ConfigError("split would leave no labeled samples")
    for r in records:
        if r.eval_mask() is None:
            raise DataError(f"sample {r.id!r} has no mask and cannot be split")
        if int(r.eval_mask().max()) >= spec.num_classes:
            raise DataError(f"sample {r.id!r} has class ids >= {spec.num_classes}")
    rng = np.random.default_rng(spec.seed)
    chosen = set(rng.permutation(len(records))[:n_labeled].tolist())
    labeled, unlabeled = [], []
    for i, r in enumerate(records):
        if i in chosen:
            labeled.append(replace(r, mask=r.eval_mask(), labeled=True, _heldout_mask=None))
        else:
            unlabeled.append(r.withhold_mask())
    return labeled, unlabeled


def holdout(records: Sequence[SampleRecord], count: int, seed: int):
    """Seeded (train, val) partition with ``count`` validation samples."""
    if not 0 <= count <= len(records):
        raise ConfigError(f"cannot hold out {count} of {len(records)} samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A1]))
    val_idx = set(rng.permutation(len(records))[:count].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def _cycle(n, rng):
    while True:
        yield from rng.permutation(n).tolist()


def batch_schedule(labeled, unlabeled, batch_size, iterations, seed) -> Iterator[tuple[list, list]]:
    """Yield ``iterations`` pairs of (labeled_batch, unlabeled_batch), each of size batch_size / 2.

    Each pool is consumed as a stream of per-epoch permutations, so the smaller pool cycles
    with a fresh shuffle every epoch. An empty unlabeled pool yields empty unlabeled batches.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch_size must be even and >= 2, got {batch_size}")
    if not labeled:
        raise ConfigError("labeled pool is empty")
    half = batch_size // 2
    ss_l, ss_u = np.random.SeedSequence(seed).spawn(2)
    lab_ids = _cycle(len(labeled), np.random.default_rng(ss_l))
    unl_ids = _cycle(len(unlabeled), np.random.default_rng(ss_u)) if unlabeled else None
    for _ in range(iterations):
        lb = [labeled[next(lab_ids)] for _ in range(half)]
        ub = [unlabeled[next(unl_ids)] for _ in range(half)] if unl_ids is not None else []
        yield lb, ub
