"""Tests for rigid estimation, RANSAC and point-to-plane ICP."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tests.shapes import box
from toothfuse.errors import DegenerateConfiguration, NoValidModel
from toothfuse.geometry import (
    PointCloud,
    RigidTransform,
    apply_transform,
    inverse,
    sample_surface,
)
from toothfuse.registration import (
    DEFAULT_SCHEDULE,
    CorrespondenceSet,
    IcpScheduleLevel,
    RansacParams,
    RegistrationResult,
    estimate_rigid,
    icp_point_to_plane,
    match_features,
    ransac_align,
    rotation_error_deg,
    translation_error,
)


def _transform(angles_deg: list[float], translation: list[float]) -> RigidTransform:
    rot = Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()
    return RigidTransform(rot, translation)


# ---------------------------------------------------------------------------
# Rigid estimation
# ---------------------------------------------------------------------------


class TestEstimateRigid:
    """Tests for the closed-form least-squares rigid fit."""

    def test_identity(self) -> None:
        pts = np.random.default_rng(0).random((10, 3))
        t = estimate_rigid(pts, pts)
        np.testing.assert_allclose(t.as_matrix(), np.eye(4), atol=1e-12)

    def test_recovers_known_transform(self) -> None:
        pts = np.random.default_rng(1).random((10, 3)) * 20.0
        truth = RigidTransform(Rotation.random(random_state=7).as_matrix(), [3.0, -1.0, 8.0])
        t = estimate_rigid(pts, truth.apply_points(pts))
        np.testing.assert_allclose(t.as_matrix(), truth.as_matrix(), atol=1e-9)

    def test_never_reflects(self) -> None:
        pts = np.random.default_rng(2).random((8, 3))
        mirrored = pts * np.array([-1.0, 1.0, 1.0])
        t = estimate_rigid(pts, mirrored)
        assert np.linalg.det(t.rotation) == pytest.approx(1.0)

    def test_collinear(self) -> None:
        pts = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfiguration):
            estimate_rigid(pts, pts)

    def test_too_few_pairs(self) -> None:
        with pytest.raises(DegenerateConfiguration):
            estimate_rigid(np.eye(3)[:2], np.eye(3)[:2])


# ---------------------------------------------------------------------------
# Matching and RANSAC
# ---------------------------------------------------------------------------


class TestMatchFeatures:
    """Tests for mutual nearest-neighbor descriptor matching."""

    def test_identical_descriptors(self) -> None:
        desc = np.random.default_rng(0).random((50, 33))
        corr = match_features(desc, desc)
        np.testing.assert_array_equal(corr.source, np.arange(50))
        np.testing.assert_array_equal(corr.target, np.arange(50))

    def test_only_mutual_pairs(self) -> None:
        src = np.array([[0.0], [0.1]])
        dst = np.array([[0.04]])
        corr = match_features(src, dst)
        assert len(corr) == 1

    def test_empty(self) -> None:
        with pytest.raises(ValueError):
            match_features(np.zeros((0, 33)), np.zeros((3, 33)))


class TestRansac:
    """Tests for RANSAC alignment over correspondences."""

    def test_identical_clouds(self) -> None:
        pts = np.random.default_rng(0).random((100, 3)) * 10.0
        cloud = PointCloud(pts)
        result = ransac_align(
            cloud, cloud, CorrespondenceSet.identity(100), RansacParams(distance_threshold=0.5)
        )
        assert result.fitness == 1.0
        assert result.inlier_rmse < 1e-9
        np.testing.assert_allclose(result.transform.as_matrix(), np.eye(4), atol=1e-9)

    def test_recovers_with_outliers(self) -> None:
        rng = np.random.default_rng(1)
        pts = rng.random((200, 3)) * 50.0
        truth = _transform([10.0, -15.0, 20.0], [5.0, 2.0, -3.0])
        target = rng.permutation(200)
        outliers = rng.choice(200, size=60, replace=False)
        matched = np.arange(200)
        matched[outliers] = target[outliers]
        corr = CorrespondenceSet(np.arange(200), matched)
        params = RansacParams(max_iterations=2000, distance_threshold=1.0, seed=3)
        result = ransac_align(PointCloud(pts), PointCloud(truth.apply_points(pts)), corr, params)
        assert rotation_error_deg(result.transform, truth) < 2.0
        assert translation_error(result.transform, truth) < 1.0
        assert result.fitness >= 0.69

    def test_random_correspondences(self) -> None:
        rng = np.random.default_rng(2)
        pts = rng.random((200, 3)) * 50.0
        corr = CorrespondenceSet(np.arange(200), rng.permutation(200))
        params = RansacParams(max_iterations=2000, distance_threshold=1.0)
        try:
            result = ransac_align(PointCloud(pts), PointCloud(pts), corr, params)
        except NoValidModel:
            return
        assert result.fitness < 0.1

    def test_too_few_correspondences(self) -> None:
        cloud = PointCloud(np.eye(3))
        with pytest.raises(NoValidModel):
            ransac_align(cloud, cloud, CorrespondenceSet.identity(2), RansacParams())

    def test_deterministic(self) -> None:
        rng = np.random.default_rng(4)
        pts = rng.random((80, 3)) * 30.0
        corr = CorrespondenceSet(np.arange(80), rng.permutation(80))
        corr = CorrespondenceSet(
            np.arange(80), np.where(np.arange(80) < 50, np.arange(80), corr.target)
        )
        params = RansacParams(max_iterations=500, distance_threshold=1.0, seed=9)
        a = ransac_align(PointCloud(pts), PointCloud(pts), corr, params)
        b = ransac_align(PointCloud(pts), PointCloud(pts), corr, params)
        np.testing.assert_array_equal(a.transform.as_matrix(), b.transform.as_matrix())

    def test_default_threshold_scales_with_voxel(self) -> None:
        assert RansacParams().threshold_for(2.0) == 3.0
        assert RansacParams(distance_threshold=0.7).threshold_for(2.0) == 0.7

    def test_invalid_params(self) -> None:
        with pytest.raises(ValueError):
            RansacParams(sample_size=2)
        with pytest.raises(ValueError):
            RansacParams(similarity=1.0)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


class TestIcp:
    """Tests for point-to-plane ICP."""

    @pytest.fixture
    def target(self) -> PointCloud:
        return sample_surface(box((10.0, 8.0, 6.0)), 5000, seed=0)

    def test_converged_at_truth(self, target: PointCloud) -> None:
        result = icp_point_to_plane(target, target, RigidTransform.identity(), 1.0, 50)
        assert result.inlier_rmse == pytest.approx(0.0, abs=1e-12)
        assert result.iterations <= 2
        assert result.fitness == 1.0

    def test_recovers_small_perturbation(self, target: PointCloud) -> None:
        truth = _transform([3.0, -2.0, 4.0], [0.6, -0.5, 0.4])
        source = apply_transform(inverse(truth), target)
        result = icp_point_to_plane(source, target, RigidTransform.identity(), 5.0, 50)
        assert rotation_error_deg(result.transform, truth) < 0.1
        assert translation_error(result.transform, truth) < 0.02

    def test_trace_non_increasing(self, target: PointCloud) -> None:
        truth = _transform([5.0, 0.0, -3.0], [1.0, 0.0, 0.5])
        source = apply_transform(inverse(truth), target)
        result = icp_point_to_plane(source, target, RigidTransform.identity(), 5.0, 30)
        assert len(result.trace) >= 2
        assert all(b <= a for a, b in zip(result.trace, result.trace[1:], strict=False))

    def test_no_correspondences(self, target: PointCloud) -> None:
        far = apply_transform(_transform([0.0, 0.0, 0.0], [100.0, 0.0, 0.0]), target)
        init = RigidTransform.identity()
        result = icp_point_to_plane(far, target, init, 1.0, 10)
        assert result.no_correspondences
        assert result.transform is init

    def test_requires_target_normals(self, target: PointCloud) -> None:
        with pytest.raises(ValueError, match="normals"):
            icp_point_to_plane(
                target, PointCloud(target.points), RigidTransform.identity(), 1.0, 10
            )


# ---------------------------------------------------------------------------
# Result types and error measures
# ---------------------------------------------------------------------------


class TestTypes:
    """Tests for registration value types and error measures."""

    def test_default_schedule(self) -> None:
        assert [level.voxel for level in DEFAULT_SCHEDULE] == [1.0, 0.5, 0.25]
        assert all(level.max_distance == 2.0 * level.voxel for level in DEFAULT_SCHEDULE)

    def test_schedule_level_validation(self) -> None:
        with pytest.raises(ValueError):
            IcpScheduleLevel(voxel=0.0, max_distance=1.0, iterations=10)

    def test_fitness_range(self) -> None:
        with pytest.raises(ValueError):
            RegistrationResult(RigidTransform.identity(), fitness=1.5, inlier_rmse=0.0)

    def test_error_measures(self) -> None:
        a = _transform([0.0, 0.0, 30.0], [1.0, 2.0, 2.0])
        b = RigidTransform.identity()
        assert rotation_error_deg(a, b) == pytest.approx(30.0)
        assert translation_error(a, b) == pytest.approx(3.0)
