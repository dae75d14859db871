"""Tests for synthetic teeth and sphere families."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from toothfuse.geometry import RigidTransform, TriMesh, connected_components, is_watertight
from toothfuse.registration import rotation_error_deg
from toothfuse.synth import (
    SyntheticToothSpec,
    crown_of,
    random_transform,
    sphere_family,
    sphere_mesh,
    sphere_radii,
    synth_tooth,
    tooth_bounds,
    tooth_field,
)

FAST = SyntheticToothSpec(resolution=32)


# ---------------------------------------------------------------------------
# Spec
# ---------------------------------------------------------------------------


class TestSyntheticToothSpec:
    """Tests for tooth parameters and family variation."""

    @pytest.mark.parametrize(
        "changes",
        [
            {"root_count": 3},
            {"decimation": 0.0},
            {"resolution": 4},
            {"cut_height": 10.0},
            {"root_taper": 0.0},
            {"noise_sigma": -0.1},
        ],
    )
    def test_invalid(self, changes: dict[str, object]) -> None:
        with pytest.raises(ValueError):
            replace(SyntheticToothSpec(), **changes)  # type: ignore[arg-type]

    def test_varied_is_deterministic(self) -> None:
        base = SyntheticToothSpec()
        assert base.varied(3) == base.varied(3)
        assert base.varied(3) != base.varied(4)

    def test_varied_stays_close(self) -> None:
        base = SyntheticToothSpec()
        for seed in range(10):
            member = base.varied(seed, spread=0.1)
            assert member.seed == seed
            assert member.root_count in (1, 2)
            assert abs(member.crown_a / base.crown_a - 1.0) <= 0.1
            assert member.resolution == base.resolution


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


class TestToothField:
    """Tests for the implicit tooth."""

    def test_inside_and_outside(self) -> None:
        field = tooth_field(SyntheticToothSpec())
        values = field(np.array([[0.0, 0.0, 0.0], [50.0, 0.0, 0.0], [0.0, 0.0, -30.0]]))
        assert values[0] < 0
        assert values[1] > 0
        assert values[2] > 0

    def test_root_reaches_below_crown(self) -> None:
        spec = SyntheticToothSpec()
        field = tooth_field(spec)
        # a point on the first root axis well below the crown
        assert field(np.array([[1.5, 0.2, -3.0]]))[0] < 0

    def test_bounds_contain_surface(self) -> None:
        spec = SyntheticToothSpec(resolution=32)
        lo, hi = tooth_bounds(spec)
        gt = synth_tooth(spec).ground_truth
        assert np.all(gt.vertices.min(axis=0) > np.array(lo))
        assert np.all(gt.vertices.max(axis=0) < np.array(hi))


class TestSynthTooth:
    """Tests for the generated mesh set."""

    def test_clean_unmoved_copy_equals_ground_truth(self) -> None:
        spec = replace(
            FAST, noise_sigma=0.0, decimation=1.0, max_rotation_deg=0.0, max_translation=0.0
        )
        tooth = synth_tooth(spec)
        np.testing.assert_allclose(tooth.degraded_full.vertices, tooth.ground_truth.vertices)
        np.testing.assert_array_equal(tooth.degraded_full.triangles, tooth.ground_truth.triangles)

    def test_crown_above_cut(self) -> None:
        tooth = synth_tooth(FAST)
        assert tooth.crown.n_triangles > 0
        assert np.all(tooth.crown.vertices[:, 2] > FAST.cut_height)
        assert tooth.crown.n_triangles < tooth.ground_truth.n_triangles

    def test_degraded_is_coarser(self) -> None:
        tooth = synth_tooth(FAST)
        assert tooth.degraded_full.n_triangles < tooth.ground_truth.n_triangles

    def test_true_transform_realigns(self) -> None:
        spec = replace(FAST, noise_sigma=0.0, decimation=1.0)
        tooth = synth_tooth(spec)
        back = tooth.true_transform.apply_points(tooth.degraded_full.vertices)
        np.testing.assert_allclose(back, tooth.ground_truth.vertices, atol=1e-9)

    def test_deterministic(self) -> None:
        a = synth_tooth(FAST)
        b = synth_tooth(FAST)
        np.testing.assert_array_equal(a.degraded_full.vertices, b.degraded_full.vertices)
        np.testing.assert_array_equal(a.true_transform.as_matrix(), b.true_transform.as_matrix())

    def test_crown_of(self, cube: TriMesh) -> None:
        top = crown_of(cube, 0.5)
        # only the z = 1 face has every corner above the cut
        assert top.n_triangles == 2

    @pytest.mark.slow
    def test_ground_truth_watertight(self) -> None:
        tooth = synth_tooth(SyntheticToothSpec())
        assert is_watertight(tooth.ground_truth)
        assert len(connected_components(tooth.ground_truth)) == 1


class TestRandomTransform:
    """Tests for the misalignment draw."""

    def test_within_limits(self) -> None:
        for seed in range(20):
            t = random_transform(np.random.default_rng(seed), 30.0, 10.0)
            assert rotation_error_deg(t, RigidTransform.identity()) <= 30.0 + 1e-9
            assert np.linalg.norm(t.translation) <= 10.0 + 1e-9

    def test_zero_limits(self) -> None:
        t = random_transform(np.random.default_rng(0), 0.0, 0.0)
        np.testing.assert_allclose(t.as_matrix(), np.eye(4), atol=1e-15)


# ---------------------------------------------------------------------------
# Spheres
# ---------------------------------------------------------------------------


class TestSpheres:
    """Tests for the sphere family used for smoke training."""

    def test_radii(self) -> None:
        assert sphere_radii(5) == pytest.approx([0.3, 0.4, 0.5, 0.6, 0.7])
        with pytest.raises(ValueError):
            sphere_radii(0)

    def test_sphere_mesh(self) -> None:
        mesh = sphere_mesh(0.5, resolution=40)
        assert is_watertight(mesh)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.max(np.abs(radii - 0.5)) < 0.01

    def test_radius_must_fit(self) -> None:
        with pytest.raises(ValueError):
            sphere_mesh(1.2)

    def test_family(self) -> None:
        family = sphere_family(3, resolution=24)
        assert len(family) == 3
        sizes = [np.linalg.norm(m.vertices, axis=1).mean() for m in family]
        assert sizes == sorted(sizes)
