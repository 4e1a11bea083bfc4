"""K-Means and purity oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from regioncontrast.clustering import (KMeansResult, cluster_purity, kmeans,
                                       subsample_points)


def test_k1_centroid_is_global_mean():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(100, 3))
    res = kmeans(pts, 1, seed=0)
    assert_allclose(res.centroids[0], pts.mean(axis=0), rtol=1e-12)
    # inertia = sum of squared distances to the mean = M * total variance
    expected = ((pts - pts.mean(axis=0)) ** 2).sum()
    assert_allclose(res.inertia, expected, rtol=1e-12)
    assert_array_equal(res.assignments, np.zeros(100, dtype=np.int64))


def test_k_equals_m_zero_inertia():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(8, 2)) * 10.0
    res = kmeans(pts, 8, seed=3)
    # expansion-trick distances leave ~1e-15 of rounding dust at zero
    assert res.inertia <= 1e-12
    assert len(np.unique(res.assignments)) == 8


def test_two_blobs_recovered_across_seeds():
    """Well-separated blobs: >= 99% of points follow their blob over 10 seeds."""
    rng = np.random.default_rng(42)
    a = rng.normal(loc=(0.0, 0.0), scale=0.3, size=(200, 2))
    b = rng.normal(loc=(8.0, 8.0), scale=0.3, size=(200, 2))
    pts = np.vstack([a, b])
    blob = np.repeat([0, 1], 200)
    for seed in range(10):
        res = kmeans(pts, 2, seed=seed)
        agreement = cluster_purity(res.assignments, blob)
        assert agreement >= 0.99


def test_determinism_in_seed():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(50, 4))
    r1 = kmeans(pts, 3, seed=11)
    r2 = kmeans(pts, 3, seed=11)
    assert_array_equal(r1.assignments, r2.assignments)
    assert_allclose(r1.centroids, r2.centroids, rtol=0, atol=0)
    assert r1.inertia == r2.inertia


def test_validation():
    pts = np.zeros((5, 2))
    with pytest.raises(ValueError, match="k"):
        kmeans(pts, 6)
    with pytest.raises(ValueError, match="k"):
        kmeans(pts, 0)
    with pytest.raises(ValueError, match="points"):
        kmeans(np.zeros((0, 2)), 1)
    with pytest.raises(ValueError, match="points"):
        kmeans(np.zeros(5), 1)


def test_duplicate_points_do_not_crash_init():
    # all mass on one location: k-means++ falls back to uniform choice
    pts = np.ones((10, 2))
    res = kmeans(pts, 3, seed=0)
    assert res.inertia == 0.0


def test_empty_cluster_reseeded():
    """With k=3 on two tight far-apart pairs plus one outlier, every
    cluster ends non-empty (the farthest-point re-seed rule)."""
    pts = np.array([[0.0, 0], [0.1, 0], [10, 0], [10.1, 0], [100, 0]])
    res = kmeans(pts, 3, seed=0)
    assert len(np.unique(res.assignments)) == 3
    assert res.inertia < 1.0  # each tight group got its own centroid


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_inertia_never_negative_and_assignments_in_range(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 2))
    res = kmeans(pts, k, seed=seed)
    assert res.inertia >= 0.0
    assert res.assignments.min() >= 0 and res.assignments.max() < k
    assert res.n_iter >= 1


def test_lloyd_improves_over_init():
    """Final inertia is no worse than the inertia right after init."""
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(120, 3))
    ref = kmeans(pts, 4, seed=9, max_iter=1)
    out = kmeans(pts, 4, seed=9, max_iter=100)
    assert out.inertia <= ref.inertia + 1e-12


# ---------------------------------------------------------------- purity


def test_purity_identical_is_one():
    labels = np.array([0, 1, 2, 1, 0])
    assert cluster_purity(labels, labels) == 1.0


def test_purity_single_cluster_two_equal_classes():
    assignments = np.zeros(10, dtype=int)
    reference = np.repeat([0, 1], 5)
    assert cluster_purity(assignments, reference) == 0.5


def test_purity_is_majority_fraction():
    # cluster 0: labels 0,0,1 -> majority 2; cluster 1: labels 1,1 -> 2
    assignments = np.array([0, 0, 0, 1, 1])
    reference = np.array([0, 0, 1, 1, 1])
    assert cluster_purity(assignments, reference) == 4 / 5


def test_purity_random_assignment_approaches_1_over_c():
    rng = np.random.default_rng(0)
    m, c = 10_000, 4
    reference = np.tile(np.arange(c), m // c)
    assignments = rng.integers(0, c, size=m)
    p = cluster_purity(assignments, reference)
    assert abs(p - 1.0 / c) < 0.05


def test_purity_label_permutation_invariance():
    rng = np.random.default_rng(3)
    assignments = rng.integers(0, 5, size=200)
    reference = rng.integers(0, 3, size=200)
    base = cluster_purity(assignments, reference)
    # renaming cluster ids must not change purity
    renamed = (assignments * 7 + 13) % 31
    assert cluster_purity(renamed, reference) == base


def test_purity_validation():
    with pytest.raises(ValueError, match="shapes"):
        cluster_purity(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="shapes"):
        cluster_purity(np.zeros(0), np.zeros(0))


# ---------------------------------------------------------------- subsampling


def test_subsample_passthrough_when_small():
    pts = np.arange(12.0).reshape(6, 2)
    out = subsample_points(pts, 6, seed=0)
    assert out is pts


def test_subsample_shape_seeded_and_sorted():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(500, 2))
    a = subsample_points(pts, 100, seed=4)
    b = subsample_points(pts, 100, seed=4)
    c = subsample_points(pts, 100, seed=5)
    assert a.shape == (100, 2)
    assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    # rows keep their original relative order (indices sorted)
    idx = [np.flatnonzero((pts == row).all(axis=1))[0] for row in a]
    assert (np.diff(idx) > 0).all()
