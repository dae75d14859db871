"""Tests for k-d tree queries, exact closest points and the worker pool."""

from __future__ import annotations

import os
from unittest.mock import patch

import numpy as np
import pytest

from tests.shapes import icosphere
from toothfuse.errors import EmptyMesh
from toothfuse.geometry import TriMesh, face_normals, sample_surface
from toothfuse.spatial import (
    REGION_EDGE_AB,
    REGION_FACE,
    REGION_VERTEX_A,
    SpatialIndex,
    brute_force_closest,
    closest_on_triangles,
    closest_point,
)
from toothfuse.workers import THREADS_ENV, chunk_ranges, map_ordered, thread_count

# ---------------------------------------------------------------------------
# Point-triangle primitive
# ---------------------------------------------------------------------------

_TRI = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _one(p: list[float]) -> tuple[np.ndarray, np.ndarray, int]:
    a, b, c = (np.array([v]) for v in _TRI)
    pts, bary, region = closest_on_triangles(a, b, c, np.array([p]))
    return pts[0], bary[0], int(region[0])


class TestClosestOnTriangles:
    """Tests for the Voronoi-region closest point on a triangle."""

    def test_above_face(self) -> None:
        pt, bary, region = _one([0.2, 0.3, 2.0])
        np.testing.assert_allclose(pt, [0.2, 0.3, 0.0], atol=1e-15)
        assert region == REGION_FACE
        assert bary.sum() == pytest.approx(1.0)

    def test_beyond_vertex(self) -> None:
        pt, _, region = _one([-1.0, -1.0, 0.5])
        np.testing.assert_array_equal(pt, [0.0, 0.0, 0.0])
        assert region == REGION_VERTEX_A

    def test_beside_edge(self) -> None:
        pt, _, region = _one([0.5, -2.0, 0.0])
        np.testing.assert_allclose(pt, [0.5, 0.0, 0.0], atol=1e-15)
        assert region == REGION_EDGE_AB

    def test_degenerate_triangle(self) -> None:
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[1.0, 0.0, 0.0]])
        c = np.array([[2.0, 0.0, 0.0]])
        pts, _, _ = closest_on_triangles(a, b, c, np.array([[1.5, 1.0, 0.0]]))
        np.testing.assert_allclose(pts[0], [1.5, 0.0, 0.0], atol=1e-12)


# ---------------------------------------------------------------------------
# SpatialIndex
# ---------------------------------------------------------------------------


class TestClosestPoint:
    """Tests for exact closest-point queries against a mesh."""

    def test_on_surface(self, sphere: TriMesh) -> None:
        x = sphere.corners[10].mean(axis=0)
        _, dist, _ = closest_point(SpatialIndex.from_mesh(sphere), x)
        assert dist == pytest.approx(0.0, abs=1e-12)

    def test_along_face_normal(self, sphere: TriMesh) -> None:
        tri = 37
        x = sphere.corners[tri].mean(axis=0) + 0.01 * face_normals(sphere)[tri]
        _, dist, tri_id = closest_point(SpatialIndex.from_mesh(sphere), x)
        assert dist == pytest.approx(0.01, abs=1e-12)
        assert tri_id == tri

    def test_matches_brute_force(self, sphere: TriMesh) -> None:
        rng = np.random.default_rng(0)
        queries = rng.normal(size=(100, 3)) * 0.8
        hits = SpatialIndex.from_mesh(sphere).closest_points(queries)
        points, dists, _ = brute_force_closest(sphere, queries)
        np.testing.assert_allclose(hits.distances, dists, atol=1e-12)
        np.testing.assert_allclose(hits.points, points, atol=1e-12)

    def test_far_queries_match_brute_force(self) -> None:
        mesh = icosphere(radius=3.0, subdivisions=2)
        queries = np.random.default_rng(1).normal(size=(50, 3)) * 20.0
        hits = SpatialIndex.from_mesh(mesh).closest_points(queries)
        _, dists, _ = brute_force_closest(mesh, queries)
        np.testing.assert_allclose(hits.distances, dists, atol=1e-12)

    def test_threaded_matches_single(self, sphere: TriMesh) -> None:
        queries = sample_surface(sphere, 9000, seed=3).points * 1.1
        single = SpatialIndex.from_mesh(sphere).closest_points(queries)
        with patch.dict(os.environ, {THREADS_ENV: "4"}):
            threaded = SpatialIndex.from_mesh(sphere).closest_points(queries)
        np.testing.assert_array_equal(threaded.distances, single.distances)
        np.testing.assert_array_equal(threaded.triangles, single.triangles)

    def test_empty_mesh(self) -> None:
        with pytest.raises(EmptyMesh):
            SpatialIndex.from_mesh(TriMesh.empty()).closest_points([[0.0, 0.0, 0.0]])

class TestOversizedTriangles:
    """Tests for meshes mixing one huge triangle with many small ones."""

    @pytest.fixture
    def mixed(self) -> TriMesh:
        n = 40
        ticks = np.linspace(0.0, 10.0, n + 1)
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        grid = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
        tris = []
        for i in range(n):
            for j in range(n):
                v = i * (n + 1) + j
                tris += [[v, v + n + 1, v + 1], [v + 1, v + n + 1, v + n + 2]]
        huge = np.array([[-100.0, -100.0, 5.0], [200.0, -100.0, 5.0], [-100.0, 200.0, 5.0]])
        k = len(grid)
        tris.append([k, k + 1, k + 2])
        return TriMesh(np.vstack([grid, huge]), np.array(tris))

    def test_matches_brute_force(self, mixed: TriMesh) -> None:
        rng = np.random.default_rng(5)
        near_grid = np.column_stack([rng.uniform(1.0, 9.0, (60, 2)), np.full(60, 0.1)])
        near_huge = np.column_stack([rng.uniform(20.0, 40.0, (20, 2)), np.full(20, 4.9)])
        queries = np.vstack([near_grid, near_huge])
        hits = SpatialIndex.from_mesh(mixed).closest_points(queries)
        points, dists, tris = brute_force_closest(mixed, queries)
        np.testing.assert_allclose(hits.distances, dists, atol=1e-12)
        np.testing.assert_allclose(hits.points, points, atol=1e-12)
        np.testing.assert_array_equal(hits.triangles, tris)
        assert np.all(hits.triangles[60:] == mixed.n_triangles - 1)

    def test_search_stays_local(self, mixed: TriMesh) -> None:
        index = SpatialIndex.from_mesh(mixed)
        assert index.search_radii[0] < 0.5
        assert index.search_radii[-1] > 100.0
        xs = np.linspace(1.0, 9.0, 100)
        queries = np.column_stack([xs, np.full(100, 5.0), np.full(100, 0.1)])
        with patch("toothfuse.spatial.closest_on_triangles", wraps=closest_on_triangles) as spy:
            index.closest_points(queries)
        evaluated = len(spy.call_args_list[-1].args[3])
        assert evaluated < 50 * len(queries)



class TestPointQueries:
    """Tests for nearest, k-nearest and radius queries on points."""

    def test_nearest(self) -> None:
        pts = np.random.default_rng(0).random((200, 3))
        q = np.random.default_rng(1).random((20, 3))
        d, i = SpatialIndex.from_points(pts).nearest(q)
        brute = np.linalg.norm(q[:, None] - pts[None], axis=2)
        np.testing.assert_array_equal(i, np.argmin(brute, axis=1))
        np.testing.assert_allclose(d, brute.min(axis=1), atol=1e-12)

    def test_knn_sorted(self) -> None:
        pts = np.random.default_rng(2).random((100, 3))
        d, _ = SpatialIndex.from_points(pts).knn(pts[:5], k=4)
        assert np.all(np.diff(d, axis=1) >= 0)
        np.testing.assert_array_equal(d[:, 0], 0.0)

    def test_radius_sorted_and_complete(self) -> None:
        pts = np.random.default_rng(3).random((300, 3))
        found = SpatialIndex.from_points(pts).radius(pts[0], 0.2)
        expected = np.flatnonzero(np.linalg.norm(pts - pts[0], axis=1) <= 0.2)
        np.testing.assert_array_equal(found[0], expected)

    def test_empty_index(self) -> None:
        with pytest.raises(EmptyMesh):
            SpatialIndex.from_points(np.zeros((0, 3))).nearest([[0.0, 0.0, 0.0]])


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------


class TestWorkers:
    """Tests for the bounded, order-preserving worker pool."""

    def test_default_single_thread(self) -> None:
        with patch.dict(os.environ, {}, clear=True):
            assert thread_count() == 1

    def test_env_override(self) -> None:
        with patch.dict(os.environ, {THREADS_ENV: "3"}):
            assert thread_count() == 3

    def test_non_integer_env(self) -> None:
        with patch.dict(os.environ, {THREADS_ENV: "many"}):
            assert thread_count() == 1

    def test_order_preserved(self) -> None:
        items = list(range(50))
        assert map_ordered(lambda x: x * x, items, threads=4) == [x * x for x in items]

    def test_chunk_ranges(self) -> None:
        assert chunk_ranges(10, 4) == [(0, 4), (4, 8), (8, 10)]
        assert chunk_ranges(0, 4) == []
