"""Elastic positive-pair construction: field contract, warps, retries."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regioncontrast.elastic import (DisplacementField, ElasticParams,
                                    elastic_pair, gen_field, warp_image,
                                    warp_labels)
from regioncontrast.images import Image, RegionMap


def _two_half_map(h=8, w=8):
    labels = np.zeros((h, w), dtype=np.int64)
    labels[:, w // 2:] = 1
    return RegionMap(labels)


# ---------------------------------------------------------------------------
# field generation


def test_zero_alpha_gives_zero_field():
    f = gen_field(ElasticParams(alpha=0.0, seed=3), 6, 7)
    assert f.dx.shape == (6, 7) and f.dy.shape == (6, 7)
    assert not f.dx.any() and not f.dy.any()


def test_field_determinism():
    p = ElasticParams(alpha=2.0, sigma_e=3.0, seed=11)
    a = gen_field(p, 12, 12)
    b = gen_field(p, 12, 12)
    np.testing.assert_array_equal(a.dx, b.dx)
    np.testing.assert_array_equal(a.dy, b.dy)
    c = gen_field(ElasticParams(alpha=2.0, sigma_e=3.0, seed=12), 12, 12)
    assert not np.array_equal(a.dx, c.dx)


@given(st.floats(0.5, 10.0), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_field_peak_equals_alpha(alpha, seed):
    f = gen_field(ElasticParams(alpha=alpha, seed=seed), 16, 16)
    assert abs(np.abs(f.dx).max() - alpha) <= 1e-9
    assert abs(np.abs(f.dy).max() - alpha) <= 1e-9


def test_param_validation():
    with pytest.raises(ValueError):
        ElasticParams(alpha=-1.0)
    with pytest.raises(ValueError):
        ElasticParams(sigma_e=0.0)
    with pytest.raises(ValueError):
        ElasticParams(max_retries=0)


def test_field_shape_validation():
    with pytest.raises(ValueError):
        DisplacementField(dx=np.zeros((3, 3)), dy=np.zeros((4, 3)))
    with pytest.raises(ValueError):
        DisplacementField(dx=np.full((3, 3), np.nan), dy=np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# warps


def test_zero_field_warp_is_identity(flat_image):
    f = gen_field(ElasticParams(alpha=0.0), 16, 16)
    rng = np.random.default_rng(0)
    img = Image(rng.random((16, 16)))
    np.testing.assert_array_equal(warp_image(img, f).data, img.data)
    rmap = _two_half_map(16, 16)
    np.testing.assert_array_equal(warp_labels(rmap, f).labels, rmap.labels)


def test_constant_image_warps_to_itself():
    f = gen_field(ElasticParams(alpha=3.0, seed=5), 10, 10)
    img = Image(np.full((10, 10), 0.42))
    np.testing.assert_allclose(warp_image(img, f).data, 0.42, atol=1e-12)


def test_unit_translation_shifts_ramp():
    # +1 displacement in x samples the next column; last column clamps
    h, w = 6, 8
    ramp = np.tile(np.linspace(0, 1, w), (h, 1))
    field = DisplacementField(dx=np.ones((h, w)), dy=np.zeros((h, w)))
    out = warp_image(Image(ramp), field).data[:, :, 0]
    np.testing.assert_allclose(out[:, :-1], ramp[:, 1:], atol=1e-12)
    np.testing.assert_allclose(out[:, -1], ramp[:, -1], atol=1e-12)


def test_unit_translation_shifts_label_boundary():
    rmap = _two_half_map(6, 8)
    field = DisplacementField(dx=np.ones((6, 8)), dy=np.zeros((6, 8)))
    warped = warp_labels(rmap, field)
    expected = np.zeros((6, 8), dtype=np.int64)
    expected[:, 3:] = 1  # boundary moved one column left
    np.testing.assert_array_equal(warped.labels, expected)


def test_warp_dimension_mismatch():
    f = gen_field(ElasticParams(alpha=1.0), 4, 4)
    with pytest.raises(ValueError):
        warp_image(Image(np.zeros((5, 5))), f)
    with pytest.raises(ValueError):
        warp_labels(_two_half_map(5, 5), f)


def test_warp_labels_never_invents_labels():
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 4, size=(12, 12))
    _, labels = np.unique(labels, return_inverse=True)
    rmap = RegionMap(labels.reshape(12, 12).astype(np.int64))
    f = gen_field(ElasticParams(alpha=4.0, seed=2), 12, 12)
    warped = warp_labels(rmap, f)
    assert set(np.unique(warped.labels)) <= set(np.unique(rmap.labels))
    assert warped.region_count == rmap.region_count


# ---------------------------------------------------------------------------
# elastic_pair


def test_alpha_zero_pair_is_identity(small_phantoms):
    _, images, _ = small_phantoms
    img = images[0]
    labels = np.zeros((img.height, img.width), dtype=np.int64)
    labels[4:12, 4:12] = 1
    rmap = RegionMap(labels)
    warped, wmap, surviving = elastic_pair(img, rmap, ElasticParams(alpha=0.0, seed=1))
    np.testing.assert_array_equal(warped.data, img.data)
    np.testing.assert_array_equal(wmap.labels, rmap.labels)
    assert surviving == [0, 1]


def test_pair_keeps_large_regions():
    rng = np.random.default_rng(4)
    img = Image(rng.random((16, 16)))
    rmap = _two_half_map(16, 16)
    _, wmap, surviving = elastic_pair(img, rmap, ElasticParams(alpha=2.0, seed=8))
    assert surviving == [0, 1]
    assert set(np.unique(wmap.labels)) == {0, 1}


def test_pair_drops_pathological_pixel_region():
    # a 1-pixel region at a corner with huge displacement usually vanishes;
    # the surviving list must then exclude it (and K shrinks downstream)
    img = Image(np.zeros((12, 12)))
    labels = np.zeros((12, 12), dtype=np.int64)
    labels[0, 0] = 1
    rmap = RegionMap(labels)
    params = ElasticParams(alpha=10.0, sigma_e=2.0, seed=0, max_retries=2)
    _, wmap, surviving = elastic_pair(img, rmap, params)
    present = set(np.unique(wmap.labels))
    assert set(surviving) == present
    assert 0 in surviving


@given(st.integers(0, 2_000))
@settings(max_examples=50, deadline=None)
def test_pair_survivors_match_warped_labels(seed):
    rng = np.random.default_rng(seed)
    img = Image(rng.random((16, 16)))
    labels = np.zeros((16, 16), dtype=np.int64)
    labels[2:8, 3:9] = 1
    labels[10:15, 9:15] = 2
    rmap = RegionMap(labels)
    params = ElasticParams(alpha=3.0, sigma_e=4.0, seed=seed, max_retries=3)
    warped, wmap, surviving = elastic_pair(img, rmap, params)
    assert warped.data.shape == img.data.shape
    assert sorted(surviving) == sorted(np.unique(wmap.labels).tolist())
    assert wmap.region_count == rmap.region_count  # domain preserved
    assert 0.0 <= warped.data.min() and warped.data.max() <= 1.0


def test_retry_counter_used_on_label_loss():
    # tiny region + strong field: first attempts may lose it; when a later
    # attempt keeps every label elastic_pair must return that field's warp
    img = Image(np.zeros((10, 10)))
    labels = np.zeros((10, 10), dtype=np.int64)
    labels[5, 5] = 1
    rmap = RegionMap(labels)
    for seed in range(20):
        params = ElasticParams(alpha=6.0, sigma_e=2.0, seed=seed, max_retries=8)
        _, wmap, surviving = elastic_pair(img, rmap, params)
        if surviving == [0, 1]:
            assert set(np.unique(wmap.labels)) == {0, 1}
            break
    else:
        pytest.fail("no retry chain ever preserved the 1-pixel region")
