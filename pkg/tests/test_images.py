"""Image/RegionMap contracts, Gaussian smoothing oracle, netpbm round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regioncontrast.images import (Image, RegionMap, gaussian_smooth,
                                   region_sizes, smooth2d)
from regioncontrast.netpbm import (read_pgm, read_region_pgm, write_pgm,
                                   write_ppm, write_region_pgm)


# ---------------------------------------------------------------------------
# Image


def test_image_accepts_2d_and_adds_channel():
    im = Image(np.zeros((4, 5)))
    assert im.data.shape == (4, 5, 1)
    assert (im.height, im.width, im.channels) == (4, 5, 1)


def test_image_rejects_out_of_range():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        Image(np.full((3, 3), 1.5))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        Image(np.full((3, 3), -0.1))


def test_image_rejects_bad_rank_and_empty():
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2, 2, 2)))
    with pytest.raises(ValueError):
        Image(np.zeros((0, 4)))


def test_gray_is_channel_mean():
    rng = np.random.default_rng(3)
    data = rng.random((6, 7, 3))
    np.testing.assert_allclose(Image(data).gray(), data.mean(axis=2))
    one = rng.random((6, 7))
    np.testing.assert_array_equal(Image(one).gray(), one)


# ---------------------------------------------------------------------------
# RegionMap


def test_region_map_full_requires_contiguous_labels():
    ok = RegionMap(np.array([[0, 1], [2, 0]]))
    assert ok.region_count == 3
    with pytest.raises(ValueError, match="all present"):
        RegionMap(np.array([[0, 2], [2, 0]]))  # label 1 missing


def test_region_map_domain_mode_allows_missing_labels():
    warped = RegionMap(np.array([[0, 2], [2, 0]]), region_count=3, validate="domain")
    assert warped.region_count == 3
    np.testing.assert_array_equal(warped.present_labels(), [0, 2])
    with pytest.raises(ValueError, match="outside domain"):
        RegionMap(np.array([[0, 5]]), region_count=3, validate="domain")


def test_region_map_rejects_bad_input():
    with pytest.raises(ValueError, match="integers"):
        RegionMap(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="negative"):
        RegionMap(np.array([[-1, 0]]))
    with pytest.raises(ValueError, match=r"\(H, W\)"):
        RegionMap(np.zeros(4, dtype=np.int64))
    with pytest.raises(ValueError, match="validate"):
        RegionMap(np.zeros((2, 2), dtype=np.int64), validate="loose")


def test_region_sizes_examples():
    uniform = RegionMap(np.zeros((4, 4), dtype=np.int64))
    np.testing.assert_array_equal(region_sizes(uniform), [16])
    halves = np.zeros((8, 8), dtype=np.int64)
    halves[:, 4:] = 1
    np.testing.assert_array_equal(region_sizes(RegionMap(halves)), [32, 32])


@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_region_sizes_partition_property(h, w, seed):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 4, size=(h, w))
    # relabel contiguously so the "full" validation holds
    _, labels = np.unique(raw, return_inverse=True)
    rmap = RegionMap(labels.reshape(h, w).astype(np.int64))
    counts = region_sizes(rmap)
    assert counts.sum() == h * w
    assert (counts > 0).all()


# ---------------------------------------------------------------------------
# smoothing


def test_smooth_sigma_zero_is_identity():
    rng = np.random.default_rng(5)
    im = Image(rng.random((9, 9)))
    out = gaussian_smooth(im, 0.0)
    np.testing.assert_array_equal(out.data, im.data)


def test_smooth_constant_stays_constant():
    im = Image(np.full((12, 12), 0.37))
    out = gaussian_smooth(im, 2.5)
    np.testing.assert_allclose(out.data, 0.37, atol=1e-12)


def test_smooth_impulse_matches_sampled_gaussian():
    # impulse response of the separable blur == normalized sampled 2-D kernel
    sigma = 1.0
    n = 15
    arr = np.zeros((n, n))
    arr[n // 2, n // 2] = 1.0
    out = smooth2d(arr, sigma)

    radius = int(np.ceil(3 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    g2 = np.exp(-0.5 * (xs[:, None] ** 2 + xs[None, :] ** 2) / sigma**2)
    g2 /= g2.sum()
    window = out[n // 2 - radius:n // 2 + radius + 1,
                 n // 2 - radius:n // 2 + radius + 1]
    np.testing.assert_allclose(window, g2, atol=1e-6)
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-12)


def test_smooth2d_validates_input():
    with pytest.raises(ValueError, match="2-D"):
        smooth2d(np.zeros((2, 2, 2)), 1.0)
    with pytest.raises(ValueError, match="sigma"):
        smooth2d(np.zeros((2, 2)), -1.0)


@given(st.floats(0.2, 3.0), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_smooth_stays_within_input_range(sigma, seed):
    rng = np.random.default_rng(seed)
    arr = rng.random((10, 10))
    out = smooth2d(arr, sigma)
    assert out.min() >= arr.min() - 1e-12
    assert out.max() <= arr.max() + 1e-12


# ---------------------------------------------------------------------------
# netpbm


def test_pgm_roundtrip_8bit(tmp_path):
    rng = np.random.default_rng(7)
    vals = rng.random((11, 6))
    path = tmp_path / "a.pgm"
    write_pgm(path, vals, maxval=255)
    back = read_pgm(path)
    assert back.shape == vals.shape
    assert np.abs(back - vals).max() <= 0.5 / 255 + 1e-12  # quantization only


def test_pgm_roundtrip_16bit(tmp_path):
    rng = np.random.default_rng(8)
    vals = rng.random((5, 9))
    path = tmp_path / "b.pgm"
    write_pgm(path, vals, maxval=65535)
    back = read_pgm(path)
    assert np.abs(back - vals).max() <= 0.5 / 65535 + 1e-12


def test_pgm_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.pgm"
    payload = bytes([0, 128, 255, 64])
    path.write_bytes(b"P5\n# a comment\n2 2\n# another\n255\n" + payload)
    img = read_pgm(path)
    np.testing.assert_allclose(img, np.array(
        [[0, 128], [255, 64]]) / 255.0)


def test_region_pgm_roundtrip_exact(tmp_path):
    labels = np.arange(24, dtype=np.int64).reshape(4, 6) * 1000
    path = tmp_path / "r.pgm"
    write_region_pgm(path, labels)
    np.testing.assert_array_equal(read_region_pgm(path), labels)


def test_netpbm_error_paths(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(ValueError, match="expected P5"):
        read_pgm(path)
    path.write_bytes(b"P5\n2 2\n255\n\x00")  # payload too short
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(path)
    path.write_bytes(b"P5\n2 x\n255\n")
    with pytest.raises(ValueError, match="malformed"):
        read_pgm(path)
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ValueError, match="16-bit"):
        read_region_pgm(path)
    with pytest.raises(ValueError, match="maxval"):
        write_pgm(path, np.zeros((2, 2)), maxval=0)
    with pytest.raises(ValueError, match="labels outside"):
        write_region_pgm(path, np.array([[70000]]))
    with pytest.raises(ValueError, match="uint8"):
        write_ppm(path, np.zeros((2, 2, 3)))


def test_write_ppm_layout(tmp_path):
    rgb = np.zeros((2, 3, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[1, 2] = (0, 255, 0)
    path = tmp_path / "o.ppm"
    write_ppm(path, rgb)
    data = path.read_bytes()
    assert data.startswith(b"P6\n3 2\n255\n")
    assert data[len(b"P6\n3 2\n255\n"):] == rgb.tobytes()
