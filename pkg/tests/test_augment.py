import numpy as np
import pytest

from crossmatch.augment import (
    AugmentConfig, AugmentOp, StrongConfig, WeakConfig, make_unlabeled_batch, make_unlabeled_views,
    replay, strong_augment, weak_augment,
)
from crossmatch.datasets import SampleRecord
from crossmatch.errors import ConfigError

IDENTITY_WEAK = WeakConfig(flip_p=0.0, rotate=False, crop_p=0.0)


def _sample(rng, h=16, w=16, labeled=True):
    img = rng.random((h, w)).astype(np.float32)
    mask = (rng.random((h, w)) > 0.5).astype(np.uint8) if labeled else None
    return SampleRecord("s", img, mask, labeled)


def test_weak_identity_draws(rng):
    s = _sample(rng)
    out, trace = weak_augment(s, rng, IDENTITY_WEAK)
    assert trace == []
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_flip_is_involution(rng):
    s = _sample(rng)
    img, mask = replay([AugmentOp("flip_h"), AugmentOp("flip_h")], s.image, s.mask)
    np.testing.assert_array_equal(img, s.image)
    np.testing.assert_array_equal(mask, s.mask)


def test_flip_frequency():
    rng = np.random.default_rng(0)
    s = _sample(rng, 8, 8)
    n = 10_000
    hits = sum(any(op.kind == "flip_h" for op in weak_augment(s, rng)[1]) for _ in range(n))
    assert abs(hits / n - 0.5) <= 0.02


def test_crop_larger_than_image(rng):
    with pytest.raises(ConfigError):
        weak_augment(_sample(rng, 8, 8), rng, WeakConfig(crop_size=(16, 16)))


def test_weak_crop_size_honoured(rng):
    out, _ = weak_augment(_sample(rng, 16, 16), rng, WeakConfig(crop_size=(8, 8), crop_p=1.0))
    assert out.image.shape == (8, 8) and out.mask.shape == (8, 8)


def test_weak_rejects_out_of_range(rng):
    s = SampleRecord("x", np.full((8, 8), 1.5, np.float32))
    with pytest.raises(ConfigError):
        weak_augment(s, rng)


def test_mask_alignment_geometric():
    rng = np.random.default_rng(3)
    for _ in range(200):
        mask = (rng.random((12, 12)) > 0.5).astype(np.uint8)
        s = SampleRecord("m", mask.astype(np.float32), mask, True)
        out, trace = weak_augment(s, rng, WeakConfig(crop_p=0.0))
        np.testing.assert_array_equal(out.image, out.mask.astype(np.float32))


def test_mask_alignment_crop_resize():
    # blocky mask: nearest-neighbour mask and bilinear image agree away from block edges
    rng = np.random.default_rng(4)
    for _ in range(50):
        mask = np.kron((rng.random((4, 4)) > 0.5).astype(np.uint8), np.ones((8, 8), np.uint8))
        s = SampleRecord("m", mask.astype(np.float32), mask, True)
        out, _ = weak_augment(s, rng, WeakConfig(crop_p=1.0))
        agree = (np.round(out.image) == out.mask).mean()
        assert agree >= 0.97


def test_weak_trace_replay(rng):
    s = _sample(rng, 16, 16)
    for _ in range(20):
        out, trace = weak_augment(s, rng, WeakConfig(crop_p=1.0))
        img, mask = replay(trace, s.image, s.mask)
        assert img.tobytes() == out.image.tobytes()
        assert mask.tobytes() == out.mask.tobytes()


def test_strong_all_skipped(rng):
    s = _sample(rng)
    out, trace = strong_augment(s, rng, _sample(rng), StrongConfig.disabled())
    assert trace == []
    np.testing.assert_array_equal(out.image, s.image)


def test_strong_output_clipped():
    rng = np.random.default_rng(9)
    cfg = StrongConfig(brightness_p=1, contrast_p=1, gamma_p=1, blur_p=1, noise_p=1, cutmix_p=1)
    for _ in range(100):
        s = _sample(rng)
        out, _ = strong_augment(s, rng, _sample(rng), cfg)
        assert out.image.min() >= 0 and out.image.max() <= 1


def test_strong_leaves_mask_untouched(rng):
    s = _sample(rng)
    cfg = StrongConfig(brightness_p=1, cutmix_p=1)
    out, _ = strong_augment(s, rng, _sample(rng), cfg)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_strong_trace_replay_with_partner(rng):
    s, partner = _sample(rng), _sample(rng)
    cfg = StrongConfig(cutmix_p=1.0, noise_p=1.0)
    out, trace = strong_augment(s, rng, partner, cfg)
    img, _ = replay(trace, s.image, None, partner.image)
    assert img.tobytes() == out.image.tobytes()


def test_distinct_seeds_give_distinct_traces():
    s = _sample(np.random.default_rng(0))
    differ = 0
    for t in range(100):
        _, a = strong_augment(s, np.random.default_rng(2 * t), s)
        _, b = strong_augment(s, np.random.default_rng(2 * t + 1), s)
        differ += [op.to_dict() for op in a] != [op.to_dict() for op in b]
    assert differ / 100 >= 0.99


def test_views_zero_strong_probability(rng):
    cfg = AugmentConfig(strong=StrongConfig.disabled())
    v = make_unlabeled_views(_sample(rng, labeled=False), rng, cfg=cfg)
    np.testing.assert_array_equal(v.strong1, v.weak)
    np.testing.assert_array_equal(v.strong2, v.weak)


def test_views_share_geometry():
    # labeled sample whose image equals its mask: strong views keep the weak view's geometry
    rng = np.random.default_rng(5)
    mask = np.kron((rng.random((4, 4)) > 0.5).astype(np.uint8), np.ones((4, 4), np.uint8))
    s = SampleRecord("g", mask.astype(np.float32), mask, True)
    cfg = AugmentConfig(strong=StrongConfig(brightness_p=1, contrast_p=1, gamma_p=0, blur_p=0, noise_p=0))
    for _ in range(20):
        v = make_unlabeled_views(s, rng, cfg=cfg)
        assert v.weak.shape == v.strong1.shape == v.strong2.shape
        assert all(op.kind not in ("flip_h", "flip_v", "rot90", "crop_resize") for t in v.traces[1:] for op in t)
        weak_fg = v.weak > 0.5
        for strong in (v.strong1, v.strong2):
            # brightness/contrast are monotone maps: the foreground argmax pattern is preserved
            if strong.max() > strong.min():
                assert np.array_equal(strong >= strong[weak_fg].min(), weak_fg) or not weak_fg.any()


def test_unlabeled_batch_cutmix_bookkeeping(rng):
    samples = [_sample(rng, labeled=False) for _ in range(3)]
    cfg = AugmentConfig(strong=StrongConfig(cutmix_p=1.0, brightness_p=0, contrast_p=0, gamma_p=0,
                                            blur_p=0, noise_p=0))
    weak, strong, mixes = make_unlabeled_batch(samples, rng, cfg)
    assert weak.shape == (3, 16, 16) and len(strong) == 2
    for s, (boxes, partners) in zip(strong, mixes):
        np.testing.assert_array_equal(partners, [1, 2, 0])
        for b in range(3):
            expect = np.where(boxes[b], weak[partners[b]], weak[b])
            np.testing.assert_array_equal(s[b], expect)
