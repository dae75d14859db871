"""Spatial acceleration: k-d tree point queries and exact closest point on triangles.

Triangle queries use a k-d tree over triangle centroids. The nearest
centroid gives an upper bound on the true distance. Triangles are grouped
into size classes by their largest centroid-to-corner distance, and each
class keeps its own centroid tree. Every triangle that could beat the bound
has its centroid inside a ball of radius bound + the largest extent of its
class, and those candidates are evaluated exactly. A few oversized
triangles therefore widen the search only within their own class. Results
match a brute-force scan over all triangles.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from toothfuse.errors import EmptyMesh
from toothfuse.geometry import FloatArray, IntArray, TriMesh
from toothfuse.workers import chunk_ranges, map_ordered

log = logging.getLogger(__name__)

# Closest-point feature codes: which part of the triangle the closest point lies on.
REGION_FACE = 0
REGION_VERTEX_A = 1
REGION_VERTEX_B = 2
REGION_VERTEX_C = 3
REGION_EDGE_AB = 4
REGION_EDGE_BC = 5
REGION_EDGE_CA = 6

_QUERY_CHUNK = 4096


def _dot(u: FloatArray, v: FloatArray) -> FloatArray:
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def _norm(u: FloatArray) -> FloatArray:
    return np.sqrt(_dot(u, u))


# ---------------------------------------------------------------------------
# Point-triangle primitive
# ---------------------------------------------------------------------------


def _closest_on_segment(a: FloatArray, b: FloatArray, p: FloatArray) -> FloatArray:
    """Parameter t in [0, 1] of the closest point a + t(b - a) to p."""
    ab = b - a
    denom = _dot(ab, ab)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 0.0, _dot(p - a, ab) / denom, 0.0)
    return np.clip(t, 0.0, 1.0)


def closest_on_triangles(
    a: FloatArray, b: FloatArray, c: FloatArray, p: FloatArray
) -> tuple[FloatArray, FloatArray, IntArray]:
    """Pairwise closest point of p[i] on triangle (a[i], b[i], c[i]).

    Returns (points, barycentric weights, region codes). Voronoi-region
    classification of the query against the triangle's vertices, edges and
    face. Degenerate triangles fall back to the nearest of their three edges.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(p)
    bary = np.empty((n, 3))
    region = np.full(n, REGION_FACE, dtype=np.int64)

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom
        bary[:] = np.stack([1.0 - v_face - w_face, v_face, w_face], axis=1)

        # assigned lowest priority first so earlier Voronoi tests win
        m_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[m_bc] = np.stack([np.zeros_like(w_bc), 1.0 - w_bc, w_bc], axis=1)[m_bc]
        region[m_bc] = REGION_EDGE_BC

        m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        w_ac = d2 / (d2 - d6)
        bary[m_ac] = np.stack([1.0 - w_ac, np.zeros_like(w_ac), w_ac], axis=1)[m_ac]
        region[m_ac] = REGION_EDGE_CA

        m_c = (d6 >= 0) & (d5 <= d6)
        bary[m_c] = (0.0, 0.0, 1.0)
        region[m_c] = REGION_VERTEX_C

        m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v_ab = d1 / (d1 - d3)
        bary[m_ab] = np.stack([1.0 - v_ab, v_ab, np.zeros_like(v_ab)], axis=1)[m_ab]
        region[m_ab] = REGION_EDGE_AB

        m_b = (d3 >= 0) & (d4 <= d3)
        bary[m_b] = (0.0, 1.0, 0.0)
        region[m_b] = REGION_VERTEX_B

        m_a = (d1 <= 0) & (d2 <= 0)
        bary[m_a] = (1.0, 0.0, 0.0)
        region[m_a] = REGION_VERTEX_A

    bad = ~np.all(np.isfinite(bary), axis=1)
    if np.any(bad):
        bary[bad], region[bad] = _degenerate_fallback(a[bad], b[bad], c[bad], p[bad])

    points = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    return points, bary, region


def _degenerate_fallback(
    a: FloatArray, b: FloatArray, c: FloatArray, p: FloatArray
) -> tuple[FloatArray, IntArray]:
    t_ab = _closest_on_segment(a, b, p)
    t_bc = _closest_on_segment(b, c, p)
    t_ca = _closest_on_segment(c, a, p)
    zeros = np.zeros_like(t_ab)
    candidates = np.stack(
        [
            np.stack([1.0 - t_ab, t_ab, zeros], axis=1),
            np.stack([zeros, 1.0 - t_bc, t_bc], axis=1),
            np.stack([t_ca, zeros, 1.0 - t_ca], axis=1),
        ]
    )
    points = (
        candidates[..., 0:1] * a[None]
        + candidates[..., 1:2] * b[None]
        + candidates[..., 2:3] * c[None]
    )
    dist = _norm(points - p[None])
    best = np.argmin(dist, axis=0)
    rows = np.arange(len(p))
    codes = np.array([REGION_EDGE_AB, REGION_EDGE_BC, REGION_EDGE_CA])
    return candidates[best, rows], codes[best]


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClosestHits:
    """Batch result of closest-point queries against a triangle set."""

    points: FloatArray
    distances: FloatArray
    triangles: IntArray
    barycentric: FloatArray
    regions: IntArray


@dataclass(frozen=True)
class _SizeClass:
    """Triangles of similar extent with their own centroid tree."""

    ids: IntArray
    tree: cKDTree
    max_radius: float


def _size_classes(centroids: FloatArray, radii: FloatArray) -> tuple[_SizeClass, ...]:
    """Group triangles by power-of-two multiples of the median extent."""
    if not len(radii):
        return ()
    positive = radii[radii > 0.0]
    key = np.zeros(len(radii), dtype=np.int64)
    if positive.size:
        typical = float(np.median(positive))
        key = np.ceil(np.log2(np.maximum(radii, typical) / typical)).astype(np.int64)
    classes = []
    for k in np.unique(key):
        ids = np.flatnonzero(key == k)
        classes.append(_SizeClass(ids, cKDTree(centroids[ids]), float(radii[ids].max())))
    return tuple(classes)


class SpatialIndex:
    """Immutable k-d tree over a point set, or over a mesh's triangles.

    Point methods (``nearest``, ``knn``, ``radius``) address the indexed
    points: the input points, or triangle centroids for a mesh index.
    """

    __slots__ = ("_tree", "_points", "_mesh", "_corners", "_classes")

    def __init__(self, points: FloatArray, mesh: TriMesh | None = None) -> None:
        pts = np.array(points, dtype=np.float64).reshape(-1, 3)
        pts.flags.writeable = False
        self._points = pts
        self._tree = cKDTree(pts) if len(pts) else None
        self._mesh = mesh
        self._corners: FloatArray | None = None
        self._classes: tuple[_SizeClass, ...] = ()
        if mesh is not None:
            corners = mesh.corners
            self._corners = corners
            radii = _norm(corners - pts[:, None, :])
            self._classes = _size_classes(pts, radii.max(axis=1))

    @classmethod
    def from_points(cls, points: npt.ArrayLike) -> SpatialIndex:
        return cls(np.asarray(points, dtype=np.float64))

    @classmethod
    def from_mesh(cls, mesh: TriMesh) -> SpatialIndex:
        return cls(mesh.corners.mean(axis=1), mesh=mesh)

    @property
    def mesh(self) -> TriMesh | None:
        return self._mesh

    @property
    def search_radii(self) -> tuple[float, ...]:
        """Largest triangle extent per size class, smallest class first."""
        return tuple(group.max_radius for group in self._classes)

    def __len__(self) -> int:
        return len(self._points)

    def _require_tree(self) -> cKDTree:
        if self._tree is None:
            raise EmptyMesh("spatial query on an empty index")
        return self._tree

    # -- point queries ------------------------------------------------------

    def nearest(self, x: npt.ArrayLike) -> tuple[FloatArray, IntArray]:
        d, i = self._require_tree().query(np.asarray(x, dtype=np.float64), k=1)
        return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)

    def knn(self, x: npt.ArrayLike, k: int) -> tuple[FloatArray, IntArray]:
        d, i = self._require_tree().query(np.asarray(x, dtype=np.float64), k=k)
        return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)

    def radius(self, x: npt.ArrayLike, r: float) -> list[IntArray]:
        """Indices within distance r of each query, sorted ascending."""
        found = self._require_tree().query_ball_point(
            np.atleast_2d(np.asarray(x, dtype=np.float64)), r
        )
        return [np.array(sorted(ids), dtype=np.int64) for ids in found]

    # -- triangle queries ---------------------------------------------------

    def closest_points(self, x: npt.ArrayLike) -> ClosestHits:
        """Exact closest point on the indexed triangles for every query row."""
        if self._corners is None or len(self._corners) == 0:
            raise EmptyMesh("closest-point query against a mesh without triangles")
        queries = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ranges = chunk_ranges(len(queries), _QUERY_CHUNK)
        parts = map_ordered(lambda r: self._closest_chunk(queries[r[0] : r[1]]), ranges)
        if not parts:
            empty = np.zeros((0, 3))
            none = np.zeros(0, np.int64)
            return ClosestHits(empty, np.zeros(0), none, empty, none.copy())
        return ClosestHits(
            points=np.concatenate([h.points for h in parts]),
            distances=np.concatenate([h.distances for h in parts]),
            triangles=np.concatenate([h.triangles for h in parts]),
            barycentric=np.concatenate([h.barycentric for h in parts]),
            regions=np.concatenate([h.regions for h in parts]),
        )

    def _closest_chunk(self, q: FloatArray) -> ClosestHits:
        corners = self._corners
        assert corners is not None
        tree = self._require_tree()
        _, seed_tri = tree.query(q, k=1)
        seed_pts, _, _ = closest_on_triangles(
            corners[seed_tri, 0], corners[seed_tri, 1], corners[seed_tri, 2], q
        )
        bound = _norm(seed_pts - q)

        owners: list[IntArray] = []
        cands: list[IntArray] = []
        for group in self._classes:
            reach = bound + group.max_radius
            lists = group.tree.query_ball_point(q, reach + 1e-9 * (1.0 + reach))
            lengths = np.fromiter((len(ids) for ids in lists), dtype=np.int64, count=len(q))
            local = np.fromiter(
                itertools.chain.from_iterable(lists), dtype=np.int64, count=int(lengths.sum())
            )
            cands.append(group.ids[local])
            owners.append(np.repeat(np.arange(len(q)), lengths))
        cand = np.concatenate(cands)
        owner = np.concatenate(owners)

        pts, bary, region = closest_on_triangles(
            corners[cand, 0], corners[cand, 1], corners[cand, 2], q[owner]
        )
        dist = _norm(pts - q[owner])
        order = np.lexsort((cand, dist, owner))
        _, first = np.unique(owner[order], return_index=True)
        pick = order[first]
        return ClosestHits(pts[pick], dist[pick], cand[pick], bary[pick], region[pick])


def closest_point(index: SpatialIndex, x: npt.ArrayLike) -> tuple[FloatArray, float, int]:
    """Closest surface point, its distance and the triangle id for one query position."""
    hits = index.closest_points(np.asarray(x, dtype=np.float64).reshape(1, 3))
    return hits.points[0], float(hits.distances[0]), int(hits.triangles[0])


def brute_force_closest(
    mesh: TriMesh, x: npt.ArrayLike
) -> tuple[FloatArray, FloatArray, IntArray]:
    """Reference scan over every triangle (lowest id wins ties)."""
    if mesh.n_triangles == 0:
        raise EmptyMesh("closest-point query against a mesh without triangles")
    queries = np.atleast_2d(np.asarray(x, dtype=np.float64))
    corners = mesh.corners
    n_t = len(corners)
    points = np.empty_like(queries)
    dists = np.empty(len(queries))
    tris = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        rep = np.broadcast_to(q, (n_t, 3))
        pts, _, _ = closest_on_triangles(corners[:, 0], corners[:, 1], corners[:, 2], rep)
        d = _norm(pts - rep)
        best = int(np.argmin(d))
        points[i], dists[i], tris[i] = pts[best], d[best], best
    return points, dists, tris
