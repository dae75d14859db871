"""Shape normalization, signed distance to triangle meshes and SDF sample generation.

Two sign rules are supported. Ray parity counts surface crossings along
three fixed random rays and takes the majority; it needs a watertight mesh.
The angle-weighted pseudonormal rule looks at the face, edge or vertex the
closest point lies on and works for open or non-manifold meshes such as the
hybrid proxy.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from toothfuse.errors import EmptyMesh, NotWatertight
from toothfuse.geometry import (
    FloatArray,
    IntArray,
    TriMesh,
    face_normals,
    is_watertight,
    sample_surface,
)
from toothfuse.spatial import (
    REGION_EDGE_AB,
    REGION_EDGE_BC,
    REGION_EDGE_CA,
    REGION_FACE,
    REGION_VERTEX_A,
    REGION_VERTEX_B,
    REGION_VERTEX_C,
    SpatialIndex,
)
from toothfuse.workers import chunk_ranges, map_ordered

log = logging.getLogger(__name__)

SignMode = Literal["ray_parity", "pseudonormal"]

SIGN_RAY_PARITY: SignMode = "ray_parity"
SIGN_PSEUDONORMAL: SignMode = "pseudonormal"

# Normalized shapes fit in the sphere of radius 1/NORMALIZATION_PADDING.
NORMALIZATION_PADDING = 1.03
MAX_SAMPLE_RADIUS = 1.1

_RAY_SEED = 20240611
_RAY_COUNT = 3
_CHUNK = 4096


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationInfo:
    """x_norm = (x_mm - center) / scale."""

    center: tuple[float, float, float]
    scale: float

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")

    @classmethod
    def identity(cls) -> NormalizationInfo:
        return cls((0.0, 0.0, 0.0), 1.0)

    def normalize_points(self, x: FloatArray) -> FloatArray:
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.center)) / self.scale

    def denormalize_points(self, x: FloatArray) -> FloatArray:
        return np.asarray(x, dtype=np.float64) * self.scale + np.asarray(self.center)

    def normalize_mesh(self, m: TriMesh) -> TriMesh:
        return TriMesh(self.normalize_points(m.vertices), m.triangles, m.normals, m.colors)

    def denormalize_mesh(self, m: TriMesh) -> TriMesh:
        return TriMesh(self.denormalize_points(m.vertices), m.triangles, m.normals, m.colors)


def normalize_shape(m: TriMesh) -> tuple[TriMesh, NormalizationInfo]:
    """Center at the bounding-box center and scale to max vertex norm 1/1.03."""
    if m.n_vertices == 0:
        raise EmptyMesh("cannot normalize a mesh without vertices")
    center = (m.vertices.min(axis=0) + m.vertices.max(axis=0)) / 2.0
    radius = float(np.max(np.linalg.norm(m.vertices - center, axis=1)))
    if radius <= 0.0:
        raise EmptyMesh("cannot normalize a mesh collapsed to a point")
    info = NormalizationInfo(
        (float(center[0]), float(center[1]), float(center[2])), NORMALIZATION_PADDING * radius
    )
    return info.normalize_mesh(m), info


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SdfSamples:
    """Batch of (position, signed distance) supervision pairs in normalized units."""

    positions: FloatArray
    values: FloatArray

    def __post_init__(self) -> None:
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        val = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(pos) != len(val):
            raise ValueError("one signed distance per position required")
        norms = np.linalg.norm(pos, axis=1)
        finite = np.isfinite(norms)
        if np.any(norms[finite] > MAX_SAMPLE_RADIUS + 1e-9):
            raise ValueError(f"sample positions must lie within radius {MAX_SAMPLE_RADIUS}")
        pos.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "values", val)

    def __len__(self) -> int:
        return len(self.values)

    def subset(self, index: npt.ArrayLike) -> SdfSamples:
        idx = np.asarray(index)
        return SdfSamples(self.positions[idx], self.values[idx])

    def sanitized(self) -> SdfSamples:
        """Drop samples with a non-finite position or value (logged)."""
        ok = np.all(np.isfinite(self.positions), axis=1) & np.isfinite(self.values)
        dropped = int(len(ok) - ok.sum())
        if dropped == 0:
            return self
        log.warning("Dropping %d non-finite SDF sample(s)", dropped)
        return self.subset(np.flatnonzero(ok))

    @staticmethod
    def concat(parts: list[SdfSamples]) -> SdfSamples:
        if not parts:
            return SdfSamples(np.zeros((0, 3)), np.zeros(0))
        return SdfSamples(
            np.concatenate([p.positions for p in parts]), np.concatenate([p.values for p in parts])
        )


# ---------------------------------------------------------------------------
# Sign rules
# ---------------------------------------------------------------------------


def _corner_angles(corners: FloatArray) -> FloatArray:
    out = np.zeros(corners.shape[:2])
    for i in range(3):
        e1 = corners[:, (i + 1) % 3] - corners[:, i]
        e2 = corners[:, (i + 2) % 3] - corners[:, i]
        n1 = np.linalg.norm(e1, axis=1)
        n2 = np.linalg.norm(e2, axis=1)
        ok = (n1 > 0) & (n2 > 0)
        cos = np.einsum("ij,ij->i", e1, e2) / np.where(ok, n1 * n2, 1.0)
        out[:, i] = np.where(ok, np.arccos(np.clip(cos, -1.0, 1.0)), 0.0)
    return out


class _Pseudonormals:
    """Angle-weighted vertex normals, summed edge normals and face normals."""

    def __init__(self, m: TriMesh) -> None:
        fn = face_normals(m)
        angles = _corner_angles(m.corners)
        vertex = np.zeros((m.n_vertices, 3))
        for i in range(3):
            np.add.at(vertex, m.triangles[:, i], angles[:, i : i + 1] * fn)
        self.face = fn
        self.vertex = vertex

        # triangle edge slots: 0 = AB, 1 = BC, 2 = CA
        t = m.triangles
        slots = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        slots.sort(axis=1)
        _, edge_id = np.unique(slots, axis=0, return_inverse=True)
        edge_id = edge_id.reshape(-1)
        edge = np.zeros((int(edge_id.max()) + 1 if len(edge_id) else 0, 3))
        np.add.at(edge, edge_id, np.repeat(fn, 3, axis=0))
        self.edge_of_slot = edge_id.reshape(-1, 3)
        self.edge = edge
        self.triangles = t

    def at(self, tri: IntArray, region: IntArray) -> FloatArray:
        out = self.face[tri].copy()
        for code, corner in ((REGION_VERTEX_A, 0), (REGION_VERTEX_B, 1), (REGION_VERTEX_C, 2)):
            sel = region == code
            out[sel] = self.vertex[self.triangles[tri[sel], corner]]
        for code, slot in ((REGION_EDGE_AB, 0), (REGION_EDGE_BC, 1), (REGION_EDGE_CA, 2)):
            sel = region == code
            out[sel] = self.edge[self.edge_of_slot[tri[sel], slot]]
        return out


class _RayParity:
    """Crossing counts along fixed directions using 2D projected centroid trees."""

    def __init__(self, m: TriMesh) -> None:
        rng = np.random.default_rng(_RAY_SEED)
        self._axes = []
        corners = m.corners
        for _ in range(_RAY_COUNT):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            e1 = np.cross(d, helper)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(d, e1)
            basis = np.stack([e1, e2])
            proj = corners @ basis.T
            depth = corners @ d
            centroid = proj.mean(axis=1)
            reach = float(np.max(np.linalg.norm(proj - centroid[:, None, :], axis=2)))
            self._axes.append((d, basis, proj, depth, cKDTree(centroid), reach))

    def inside(self, x: FloatArray) -> npt.NDArray[np.bool_]:
        votes = np.zeros(len(x), dtype=np.int64)
        for d, basis, proj, depth, tree, reach in self._axes:
            votes += self._odd_crossings(x, d, basis, proj, depth, tree, reach)
        return votes >= 2

    @staticmethod
    def _odd_crossings(
        x: FloatArray,
        d: FloatArray,
        basis: FloatArray,
        proj: FloatArray,
        depth: FloatArray,
        tree: cKDTree,
        reach: float,
    ) -> IntArray:
        q = x @ basis.T
        qd = x @ d
        lists = tree.query_ball_point(q, reach * (1.0 + 1e-9) + 1e-12)
        lengths = np.fromiter((len(ids) for ids in lists), dtype=np.int64, count=len(x))
        cand = np.fromiter(
            itertools.chain.from_iterable(lists), dtype=np.int64, count=int(lengths.sum())
        )
        owner = np.repeat(np.arange(len(x)), lengths)
        a, b, c = proj[cand, 0], proj[cand, 1], proj[cand, 2]
        p = q[owner]
        det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        ok = det != 0.0
        safe = np.where(ok, det, 1.0)
        pa = p - a
        w1 = (pa[:, 0] * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * pa[:, 1]) / safe
        w2 = ((b[:, 0] - a[:, 0]) * pa[:, 1] - pa[:, 0] * (b[:, 1] - a[:, 1])) / safe
        w0 = 1.0 - w1 - w2
        hit = ok & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        dz = depth[cand]
        hit_depth = w0 * dz[:, 0] + w1 * dz[:, 1] + w2 * dz[:, 2]
        hit &= hit_depth > qd[owner]
        counts = np.bincount(owner[hit], minlength=len(x))
        return np.asarray(counts % 2, dtype=np.int64)


class SignedDistance:
    """Reusable signed-distance evaluator for one mesh (negative inside)."""

    def __init__(self, m: TriMesh, sign_mode: SignMode = SIGN_PSEUDONORMAL) -> None:
        if m.n_triangles == 0:
            raise EmptyMesh("signed distance to a mesh without triangles")
        if sign_mode not in (SIGN_RAY_PARITY, SIGN_PSEUDONORMAL):
            raise ValueError(f"unknown sign mode {sign_mode!r}")
        if sign_mode == SIGN_RAY_PARITY and not is_watertight(m):
            raise NotWatertight("ray-parity signs need a watertight mesh")
        self.mesh = m
        self.sign_mode = sign_mode
        self._index = SpatialIndex.from_mesh(m)
        self._pseudo = _Pseudonormals(m) if sign_mode == SIGN_PSEUDONORMAL else None
        self._parity = _RayParity(m) if sign_mode == SIGN_RAY_PARITY else None

    def __call__(self, x: npt.ArrayLike) -> FloatArray:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        hits = self._index.closest_points(pts)
        if self._pseudo is not None:
            normal = self._pseudo.at(hits.triangles, hits.regions)
            side = np.einsum("ij,ij->i", pts - hits.points, normal)
            sign = np.where(side < 0, -1.0, 1.0)
        else:
            parity = self._parity
            assert parity is not None
            parts = map_ordered(
                lambda r: parity.inside(pts[r[0] : r[1]]), chunk_ranges(len(pts), _CHUNK)
            )
            inside = np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
            sign = np.where(inside, -1.0, 1.0)
        return np.asarray(sign * hits.distances)


def signed_distance(
    m: TriMesh, x: npt.ArrayLike, sign_mode: SignMode = SIGN_PSEUDONORMAL
) -> FloatArray:
    """Signed distance of each query row to m; |s| is the exact closest-point distance."""
    return SignedDistance(m, sign_mode)(x)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingConfig:
    """Noise levels of the near-surface samples (normalized units)."""

    sigma1: float = 0.005
    sigma2: float = 0.05

    def __post_init__(self) -> None:
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("noise levels must be non-negative")


def _clip_radius(x: FloatArray) -> FloatArray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    limit = MAX_SAMPLE_RADIUS / np.maximum(norms, 1e-300)
    factor = np.where(norms > MAX_SAMPLE_RADIUS, limit, 1.0)
    return np.asarray(x * factor)


def sample_sdf(
    m: TriMesh,
    n_surface: int,
    n_free: int,
    sigma1: float = 0.005,
    sigma2: float = 0.05,
    sign_mode: SignMode = SIGN_RAY_PARITY,
    seed: int = 0,
) -> SdfSamples:
    """Near-surface samples (half at sigma1, half at sigma2) plus uniform ones in the unit ball."""
    if sigma1 < 0 or sigma2 < 0:
        raise ValueError("noise levels must be non-negative")
    evaluator = SignedDistance(m, sign_mode)
    rng = np.random.default_rng(seed)
    surface = sample_surface(m, n_surface, int(rng.integers(2**31))).points
    half = n_surface // 2
    sigma = np.concatenate([np.full(half, sigma1), np.full(n_surface - half, sigma2)])
    near = surface + rng.normal(size=(n_surface, 3)) * sigma[:, None]

    direction = rng.normal(size=(n_free, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    radius = rng.random(n_free) ** (1.0 / 3.0)
    free = direction * radius[:, None]

    positions = _clip_radius(np.concatenate([near, free]))
    values = evaluator(positions)
    log.debug("Sampled %d SDF points (%s signs)", len(values), sign_mode)
    return SdfSamples(positions, values)
