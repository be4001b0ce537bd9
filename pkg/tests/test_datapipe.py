import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autoseg3d.datapipe import (DEFAULT_AUGMENTATION, AugmentationConfig, PatchPair, augment, make_elastic_field,
                                normalize, reflect_pad, resample, resampled_dims, sample_patch)
from autoseg3d.volume import SegmentationMap, Spacing, Volume
from oracles import band_limited

NO_AUG = AugmentationConfig(per_transform_probability=0.0)
ALWAYS = AugmentationConfig(per_transform_probability=1.0)


def test_identity_resample_is_bit_exact(rng):
    v = Volume(rng.standard_normal((5, 6, 7)).astype(np.float32), (0.5, 0.7, 3.0))
    out = resample(v, (0.5, 0.7, 3.0))
    assert out.data.tobytes() == v.data.tobytes()
    lab = SegmentationMap(rng.integers(0, 4, (5, 6, 7)), (1, 1, 1))
    assert resample(lab, (1, 1, 1)).labels.tobytes() == lab.labels.tobytes()


def test_resample_dims_formula():
    v = Volume(np.zeros((10, 10, 10), np.float32), (2, 2, 2))
    out = resample(v, (1, 1, 1))
    assert out.dims == (20, 20, 20) and out.spacing == Spacing(1, 1, 1)
    assert resampled_dims((3, 3, 3), (1, 1, 1), (10, 10, 10)) == (1, 1, 1)
    assert resampled_dims((5, 5, 5), (1, 1, 1), (2, 2, 2)) == (3, 3, 3)  # 2.5 rounds half up


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(1, 12)] * 3), st.tuples(*[st.floats(0.3, 4)] * 3), st.floats(-50, 50))
def test_constants_survive_resampling(dims, target, c):
    v = Volume(np.full(dims, c, np.float32), (1, 1, 1))
    out = resample(v, target)
    np.testing.assert_allclose(out.data, np.float32(c), rtol=1e-6, atol=1e-6)


def test_round_trip_band_limited():
    worst = 0.0
    for seed in range(60):
        rng = np.random.default_rng(seed)
        dims = tuple(int(v) for v in rng.integers(12, 40, 3))
        sp, tgt = rng.uniform(0.5, 3, 3), rng.uniform(0.5, 3, 3)
        v = Volume(band_limited(dims, sp, tgt, rng).astype(np.float32), Spacing.of(sp))
        back = resample(resample(v, tgt), sp, dims)
        assert back.dims == dims and back.spacing == v.spacing
        worst = max(worst, float(np.abs(back.data - v.data).max()))
    assert worst < 0.02


@pytest.mark.parametrize("seed", range(10))
def test_label_closure(seed):
    rng = np.random.default_rng(seed)
    present = rng.choice(6, size=int(rng.integers(1, 4)), replace=False)
    labels = rng.choice(present, size=tuple(rng.integers(3, 15, 3))).astype(np.uint8)
    m = SegmentationMap(labels, rng.uniform(0.5, 2, 3))
    out = resample(m, rng.uniform(0.5, 2, 3))
    assert set(np.unique(out.labels)) <= set(present)


def test_normalize_examples(rng):
    assert not normalize(Volume(np.full((3, 3, 3), 7.0, np.float32), (1, 1, 1))).data.any()
    two = np.zeros((2, 2, 2), np.float32)
    two.reshape(-1)[::2] = 2
    np.testing.assert_allclose(np.unique(normalize(Volume(two, (1, 1, 1))).data), [-1, 1])
    v = Volume((rng.standard_normal((6, 7, 8)) * 40 + 100).astype(np.float32), (1, 1, 1))
    once = normalize(v).data
    np.testing.assert_allclose(normalize(Volume(once, (1, 1, 1))).data, once, atol=1e-6)


def test_reflect_pad_mirror_without_edge():
    a = np.array([1, 2, 3]).reshape(3, 1, 1)
    assert reflect_pad(a, (2, 0, 0), (0, 0, 0)).ravel().tolist() == [3, 2, 1, 2, 3]
    # wider than the data: reflection iterates
    assert reflect_pad(a, (0, 0, 0), (5, 0, 0)).ravel().tolist() == [1, 2, 3, 2, 1, 2, 3, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 20), st.integers(0, 20))
def test_reflect_pad_index_by_index(n, before, after):
    a = np.arange(n).reshape(n, 1, 1) + 10
    out = reflect_pad(a, (before, 0, 0), (after, 0, 0)).ravel()
    period = max(2 * n - 2, 1)
    for i, v in enumerate(out):
        j = (i - before) % period
        j = j if j < n else period - j
        assert v == a[j if n > 1 else 0, 0, 0]


def test_sample_patch_ranges():
    img = np.zeros((30, 100, 100), np.float32)
    lab = np.zeros((30, 100, 100), np.uint8)
    seen = set()
    for seed in range(200):
        p = sample_patch(img, lab, (32, 64, 64), seed)
        assert p.image.shape == (32, 64, 64) == p.labels.shape
        assert p.origin[0] == 0
        assert 0 <= p.origin[1] <= 36 and 0 <= p.origin[2] <= 36
        seen.add(p.origin[1])
    assert min(seen) == 0 and max(seen) == 36


def test_sample_patch_padded_region_is_mirror(rng):
    img = rng.standard_normal((5, 20, 20)).astype(np.float32)
    lab = rng.integers(0, 3, (5, 20, 20)).astype(np.uint8)
    p = sample_patch(img, lab, (8, 8, 8), 3)
    ref = np.pad(img, ((p.pad_before[0], 3 - p.pad_before[0]), (0, 0), (0, 0)), mode="reflect")
    o = p.origin
    np.testing.assert_array_equal(p.image, ref[:, o[1]:o[1] + 8, o[2]:o[2] + 8])


def test_sample_patch_deterministic(rng):
    img = rng.standard_normal((20, 20, 20)).astype(np.float32)
    lab = (img > 0).astype(np.uint8)
    a, b = sample_patch(img, lab, (8, 8, 8), [4, 2]), sample_patch(img, lab, (8, 8, 8), [4, 2])
    assert a.origin == b.origin and np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)


def test_sample_patch_mismatch():
    with pytest.raises(ValueError, match="differ"):
        sample_patch(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)), (2, 2, 2), 0)


def test_elastic_trivial_cases():
    assert not make_elastic_field((6, 6, 6), (1, 1, 1), rng_seed=1, magnitude_mm=0.0).any()
    a = make_elastic_field((6, 7, 8), (1, 2, 1), rng_seed=5)
    assert a.shape == (3, 6, 7, 8)
    assert np.array_equal(a, make_elastic_field((6, 7, 8), (1, 2, 1), rng_seed=5))


def test_elastic_voxel_displacement_scales_with_spacing():
    acc = np.zeros(3)
    for seed in range(300):
        f = make_elastic_field((12, 24, 24), (2, 1, 1), rng_seed=seed, magnitude_mm=4.0)
        acc += (f ** 2).mean(axis=(1, 2, 3))
    voxel_std = np.sqrt(acc / 300)
    assert voxel_std[0] / voxel_std[1] == pytest.approx(0.5, rel=0.05)
    assert voxel_std[0] / voxel_std[2] == pytest.approx(0.5, rel=0.05)


def _pair(rng, dims=(12, 12, 12)):
    img = rng.standard_normal(dims).astype(np.float32)
    return PatchPair(img, rng.integers(0, 3, dims).astype(np.uint8))


def test_augment_noop(rng):
    pair = _pair(rng)
    out = augment(pair, (1, 1, 2), NO_AUG, 9)
    assert np.array_equal(out.image, pair.image) and np.array_equal(out.labels, pair.labels)


def test_augment_noise_statistics():
    cfg = AugmentationConfig(noise_sigma_range=(0.05, 0.05), per_transform_probability=1.0,
                             rotation_range_deg=0.0, scale_range=(1.0, 1.0), elastic_magnitude_mm=(0.0, 0.0))
    pair = PatchPair(np.zeros((64, 64, 64), np.float32), np.zeros((64, 64, 64), np.uint8))
    out = augment(pair, (1, 1, 1), cfg, 0).image
    assert abs(out.mean()) < 0.001
    assert out.std() == pytest.approx(0.05, rel=0.02)


@pytest.mark.parametrize("seed", range(8))
def test_augment_label_closure_and_shape(seed):
    rng = np.random.default_rng(seed)
    pair = _pair(rng, (10, 14, 8))
    labels = pair.labels.copy()
    labels[labels == 1] = 4
    pair = PatchPair(pair.image, labels)
    out = augment(pair, (1, 1, 2.5), ALWAYS, seed)
    assert out.image.shape == out.labels.shape == (10, 14, 8)
    assert set(np.unique(out.labels)) <= {0, 2, 4}
    assert out.extra["applied"] == {"rotate": True, "scale": True, "elastic": True, "noise": True}


def test_augment_deterministic(rng):
    pair = _pair(rng)
    a, b = augment(pair, (1, 1, 1), ALWAYS, [3, 1]), augment(pair, (1, 1, 1), ALWAYS, [3, 1])
    assert a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    c = augment(pair, (1, 1, 1), ALWAYS, [3, 2])
    assert c.image.tobytes() != a.image.tobytes()


def test_scaling_changes_physical_size():
    # a centred bright cube shrinks in voxels when the sampling grid is scaled up
    cfg = AugmentationConfig(per_transform_probability=1.0, rotation_range_deg=0.0, scale_range=(1.1, 1.1),
                             elastic_magnitude_mm=(0.0, 0.0), noise_sigma_range=(0.0, 0.0))
    img = np.zeros((21, 21, 21), np.float32)
    img[5:16, 5:16, 5:16] = 1
    out = augment(PatchPair(img, img.astype(np.uint8)), (1, 1, 1), cfg, 0)
    assert out.labels.sum() < img.sum()


def test_default_config_values():
    cfg = DEFAULT_AUGMENTATION
    assert cfg.per_transform_probability == 0.15
    assert cfg.rotation_range_deg == 15.0
    assert cfg.scale_range == (0.85, 1.15)
    assert cfg.elastic_grid_points == 8 and cfg.elastic_sigma_mm == 12.0
    assert AugmentationConfig.from_dict(cfg.to_dict()) == cfg
