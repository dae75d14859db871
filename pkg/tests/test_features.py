"""Tests for pair features and FPFH descriptors."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from toothfuse.errors import CoincidentPoints
from toothfuse.features import (
    FPFH_BINS,
    FPFH_DIM,
    compute_fpfh,
    compute_spfh,
    compute_spfh_all,
    pair_features,
)
from toothfuse.geometry import PointCloud


def _plane_grid(n: int = 10) -> PointCloud:
    xs, ys = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64))
    points = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(n * n)])
    return PointCloud(points, np.tile([0.0, 0.0, 1.0], (n * n, 1)))


def _random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Pair features
# ---------------------------------------------------------------------------


class TestPairFeatures:
    """Tests for the Darboux-frame angles of one point pair."""

    def test_coincident_points(self) -> None:
        p = np.array([1.0, 2.0, 3.0])
        n = np.array([0.0, 0.0, 1.0])
        with pytest.raises(CoincidentPoints):
            pair_features(p, n, p.copy(), n)

    def test_distance_reported(self) -> None:
        n = np.array([0.0, 0.0, 1.0])
        *_, d = pair_features(np.zeros(3), n, np.array([3.0, 4.0, 0.0]), n)
        assert d == pytest.approx(5.0)

    def test_order_independent(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(20):
            p_s, p_t = rng.normal(size=(2, 3))
            n_s, n_t = _random_unit(rng, 2)
            forward = pair_features(p_s, n_s, p_t, n_t)
            backward = pair_features(p_t, n_t, p_s, n_s)
            assert forward == pytest.approx(backward, abs=1e-12)

    def test_ranges(self) -> None:
        rng = np.random.default_rng(1)
        for _ in range(50):
            p_s, p_t = rng.normal(size=(2, 3))
            n_s, n_t = _random_unit(rng, 2)
            alpha, phi, theta, _ = pair_features(p_s, n_s, p_t, n_t)
            assert -1.0 <= alpha <= 1.0
            assert -1.0 <= phi <= 1.0
            assert -np.pi < theta <= np.pi

    def test_coplanar_parallel_normals(self) -> None:
        n = np.array([0.0, 0.0, 1.0])
        alpha, phi, theta, _ = pair_features(np.zeros(3), n, np.array([1.0, 1.0, 0.0]), n)
        assert (alpha, phi, theta) == pytest.approx((0.0, 0.0, 0.0), abs=1e-15)


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------


class TestFpfh:
    """Tests for SPFH and FPFH histograms."""

    def test_shape(self) -> None:
        fpfh = compute_fpfh(_plane_grid(), radius=1.5)
        assert fpfh.shape == (100, FPFH_DIM)

    def test_flat_plane_concentrates_in_middle_bins(self) -> None:
        fpfh = compute_fpfh(_plane_grid(), radius=1.5)
        middle = FPFH_BINS // 2
        for block in range(3):
            np.testing.assert_allclose(fpfh[:, block * FPFH_BINS + middle], 100.0, rtol=1e-12)

    def test_blocks_sum_to_100(self) -> None:
        rng = np.random.default_rng(2)
        cloud = PointCloud(rng.random((300, 3)) * 5.0, _random_unit(rng, 300))
        fpfh = compute_fpfh(cloud, radius=1.0)
        sums = fpfh.reshape(-1, 3, FPFH_BINS).sum(axis=2)
        assert np.all(np.isclose(sums, 100.0) | (sums == 0.0))

    def test_isolated_point_is_zero(self) -> None:
        grid = _plane_grid(4)
        points = np.vstack([grid.points, [[100.0, 100.0, 100.0]]])
        assert grid.normals is not None
        normals = np.vstack([grid.normals, [[0.0, 0.0, 1.0]]])
        fpfh = compute_fpfh(PointCloud(points, normals), radius=1.5)
        np.testing.assert_array_equal(fpfh[-1], np.zeros(FPFH_DIM))

    def test_single_point_spfh_matches_batch(self) -> None:
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.random((200, 3)) * 4.0, _random_unit(rng, 200))
        spfh, *_ = compute_spfh_all(cloud, radius=1.0)
        np.testing.assert_allclose(compute_spfh(cloud, 17, radius=1.0), spfh[17], atol=1e-12)

    def test_requires_normals(self) -> None:
        with pytest.raises(ValueError, match="normals"):
            compute_fpfh(PointCloud(np.zeros((4, 3))), radius=1.0)

    def test_rigid_motion_invariant(self) -> None:
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.random((150, 3)) * 4.0, _random_unit(rng, 150))
        rot = Rotation.from_euler("xyz", [10, 20, 30], degrees=True).as_matrix()
        assert cloud.normals is not None
        moved = PointCloud(cloud.points @ rot.T + 5.0, cloud.normals @ rot.T)
        a = compute_fpfh(cloud, radius=1.2)
        b = compute_fpfh(moved, radius=1.2)
        # bins can flip for values sitting on a bin edge
        assert np.mean(np.abs(a - b) < 1e-6) > 0.95
