"""Mesh and point-cloud types, rigid transforms, sampling and topology queries.

All lengths are millimetres. Every type is immutable after construction:
arrays are copied on the way in and marked read-only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, TypeVar, overload

import numpy as np
import numpy.typing as npt
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components as _cc
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree

from toothfuse.errors import DegenerateNeighborhood, EmptyMesh

log = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]

# Triangles below this area are kept in storage but never sampled.
DEGENERATE_AREA = 1e-12

_UNIT_TOL = 1e-6
_ORTHO_TOL = 1e-9


def _frozen(a: npt.ArrayLike, dtype: type, shape_tail: tuple[int, ...]) -> npt.NDArray:
    arr = np.array(a, dtype=dtype, copy=True)
    if arr.size == 0:
        arr = arr.reshape((0, *shape_tail))
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise ValueError(f"expected shape (n, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    arr.flags.writeable = False
    return arr


def _check_unit(normals: FloatArray, what: str) -> None:
    if len(normals) and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > _UNIT_TOL:
        raise ValueError(f"{what} normals must have unit length")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle surface. Duplicate vertices are allowed (no welding)."""

    vertices: FloatArray
    triangles: IntArray
    normals: FloatArray | None = None
    colors: FloatArray | None = None

    def __post_init__(self) -> None:
        verts = _frozen(self.vertices, np.float64, (3,))
        tris = _frozen(self.triangles, np.int64, (3,))
        if not np.all(np.isfinite(verts)):
            raise ValueError("mesh vertices must be finite")
        if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        if self.normals is not None:
            normals = _frozen(self.normals, np.float64, (3,))
            if len(normals) != len(verts):
                raise ValueError("one normal per vertex required")
            _check_unit(normals, "vertex")
            object.__setattr__(self, "normals", normals)
        if self.colors is not None:
            colors = _frozen(self.colors, np.float64, (3,))
            if len(colors) != len(verts):
                raise ValueError("one color per vertex required")
            if len(colors) and (colors.min() < 0.0 or colors.max() > 1.0):
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", colors)

    @classmethod
    def empty(cls) -> TriMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def corners(self) -> FloatArray:
        """(T, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def with_colors(self, colors: FloatArray | None) -> TriMesh:
        return TriMesh(self.vertices, self.triangles, self.normals, colors)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Point set with optional unit normals."""

    points: FloatArray
    normals: FloatArray | None = None

    def __post_init__(self) -> None:
        pts = _frozen(self.points, np.float64, (3,))
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud points must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            normals = _frozen(self.normals, np.float64, (3,))
            if len(normals) != len(pts):
                raise ValueError("one normal per point required")
            _check_unit(normals, "point")
            object.__setattr__(self, "normals", normals)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index: npt.ArrayLike) -> PointCloud:
        idx = np.asarray(index)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p -> rotation @ p + translation, with a proper rotation."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("transform must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: npt.ArrayLike) -> RigidTransform:
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> FloatArray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply_points(self, points: FloatArray) -> FloatArray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @property
    def rotation_angle_deg(self) -> float:
        cos = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box."""

    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]

    def __post_init__(self) -> None:
        if any(lo > hi for lo, hi in zip(self.min_corner, self.max_corner, strict=True)):
            raise ValueError("Aabb min corner must not exceed max corner")

    @classmethod
    def of(cls, points: FloatArray) -> Aabb:
        if len(points) == 0:
            raise EmptyMesh("bounding box of an empty point set")
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        return cls(
            (float(lo[0]), float(lo[1]), float(lo[2])), (float(hi[0]), float(hi[1]), float(hi[2]))
        )

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(np.subtract(self.max_corner, self.min_corner)))

    @property
    def center(self) -> FloatArray:
        return (np.asarray(self.min_corner) + np.asarray(self.max_corner)) / 2.0


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

G = TypeVar("G", TriMesh, PointCloud)


@overload
def apply_transform(t: RigidTransform, m: TriMesh) -> TriMesh: ...
@overload
def apply_transform(t: RigidTransform, m: PointCloud) -> PointCloud: ...


def apply_transform(t: RigidTransform, m: TriMesh | PointCloud) -> TriMesh | PointCloud:
    """Move positions by R·p + t and rotate normals by R."""
    if isinstance(m, TriMesh):
        normals = None if m.normals is None else _renormalize(m.normals @ t.rotation.T)
        return TriMesh(t.apply_points(m.vertices), m.triangles, normals, m.colors)
    normals = None if m.normals is None else _renormalize(m.normals @ t.rotation.T)
    return PointCloud(t.apply_points(m.points), normals)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rot_t = t.rotation.T
    return RigidTransform(rot_t, -rot_t @ t.translation)


def _renormalize(normals: FloatArray) -> FloatArray:
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Per-triangle quantities
# ---------------------------------------------------------------------------


def triangle_areas(m: TriMesh) -> FloatArray:
    c = m.corners
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def face_normals(m: TriMesh) -> FloatArray:
    """Unit face normals; zero rows for degenerate triangles."""
    c = m.corners
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    ok = (0.5 * length[:, 0]) >= DEGENERATE_AREA
    out = np.zeros_like(n)
    out[ok] = n[ok] / length[ok]
    return out


def signed_volume(m: TriMesh) -> float:
    """Enclosed volume; positive when triangles wind outward."""
    c = m.corners
    return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


def bbox_diagonal(m: TriMesh) -> float:
    if m.n_vertices == 0:
        raise EmptyMesh("bounding box of a mesh without vertices")
    return Aabb.of(m.vertices).diagonal


# ---------------------------------------------------------------------------
# Edge topology
# ---------------------------------------------------------------------------


def edge_incidence(m: TriMesh) -> tuple[IntArray, IntArray]:
    """Unique undirected edges (sorted vertex pairs) and their triangle counts."""
    if m.n_triangles == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    t = m.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges.sort(axis=1)
    unique, counts = np.unique(edges, axis=0, return_counts=True)
    return unique, counts


def boundary_edges(m: TriMesh) -> IntArray:
    edges, counts = edge_incidence(m)
    return edges[counts == 1]


def boundary_edge_count(m: TriMesh) -> int:
    return int(len(boundary_edges(m)))


def is_watertight(m: TriMesh) -> bool:
    """True when every edge is shared by exactly two triangles."""
    if m.n_triangles == 0:
        return False
    _, counts = edge_incidence(m)
    return bool(np.all(counts == 2))


def concatenate(meshes: list[TriMesh]) -> TriMesh:
    """Stack vertex and triangle lists, reindexing triangles. No welding."""
    if not meshes:
        return TriMesh.empty()
    offsets = np.cumsum([0] + [m.n_vertices for m in meshes[:-1]])
    vertices = np.concatenate([m.vertices for m in meshes])
    triangles = np.concatenate([m.triangles + off for m, off in zip(meshes, offsets, strict=True)])
    normals = None
    if all(m.normals is not None for m in meshes):
        normals = np.concatenate([m.normals for m in meshes])  # type: ignore[misc]
    colors = None
    if all(m.colors is not None for m in meshes):
        colors = np.concatenate([m.colors for m in meshes])  # type: ignore[misc]
    return TriMesh(vertices, triangles, normals, colors)


def submesh(m: TriMesh, triangle_index: npt.ArrayLike) -> TriMesh:
    """Mesh of the selected triangles with a compacted vertex list (original order kept)."""
    tris = m.triangles[np.asarray(triangle_index, dtype=np.int64)]
    used, inverse_idx = np.unique(tris, return_inverse=True)
    normals = None if m.normals is None else m.normals[used]
    colors = None if m.colors is None else m.colors[used]
    return TriMesh(m.vertices[used], inverse_idx.reshape(-1, 3), normals, colors)


def connected_components(m: TriMesh) -> list[TriMesh]:
    """Split triangles by shared vertices, largest component first.

    Order: triangle count descending, then total area descending, then the
    lowest triangle index of the component.
    """
    if m.n_triangles == 0:
        return []
    labels = triangle_component_labels(m)
    n_comp = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_comp)
    areas = np.bincount(labels, weights=triangle_areas(m), minlength=n_comp)
    first = np.full(n_comp, m.n_triangles, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(m.n_triangles))
    order = np.lexsort((first, -areas, -counts))
    return [submesh(m, np.flatnonzero(labels == c)) for c in order]


def triangle_component_labels(m: TriMesh) -> IntArray:
    """Component label per triangle (labels numbered by first appearance)."""
    t = m.triangles
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m.n_vertices, m.n_vertices))
    _, vertex_labels = _cc(graph, directed=False)
    raw = vertex_labels[t[:, 0]]
    _, first_idx, relabeled = np.unique(raw, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first_idx))
    return np.asarray(rank[relabeled], dtype=np.int64)


# ---------------------------------------------------------------------------
# Sampling and point-cloud processing
# ---------------------------------------------------------------------------


def sample_surface(m: TriMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform samples with the face normal of their triangle."""
    areas = triangle_areas(m)
    areas = np.where(areas >= DEGENERATE_AREA, areas, 0.0)
    total = areas.sum()
    if total <= 0.0:
        raise EmptyMesh("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(m.n_triangles, size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = m.corners[tri]
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    points = np.einsum("ni,nij->nj", bary, c)
    return PointCloud(points, face_normals(m)[tri])


def voxel_downsample(c: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel; output sorted by voxel key."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(c) == 0:
        return c
    keys = np.floor((c.points - c.points.min(axis=0)) / voxel).astype(np.int64)
    _, inverse_idx, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse_idx = inverse_idx.reshape(-1)
    n_out = len(counts)
    sums = np.zeros((n_out, 3))
    np.add.at(sums, inverse_idx, c.points)
    points = sums / counts[:, None]
    normals = None
    if c.normals is not None:
        nsum = np.zeros((n_out, 3))
        np.add.at(nsum, inverse_idx, c.normals)
        length = np.linalg.norm(nsum, axis=1)
        # opposing normals in one voxel: fall back to the first member's normal
        _, first = np.unique(inverse_idx, return_index=True)
        fallback = c.normals[first]
        safe = length > 1e-12
        normals = np.where(safe[:, None], nsum / np.where(safe, length, 1.0)[:, None], fallback)
    return PointCloud(points, normals)


def estimate_normals(
    c: PointCloud,
    k: int,
    on_degenerate: Literal["raise", "drop"] = "raise",
    orient: Literal["up", "outward"] = "up",
) -> PointCloud:
    """PCA normals from k nearest neighbours, oriented by propagation.

    Orientation starts at the point with the largest z (normal made to point
    up) and is propagated along a minimum spanning tree of the k-NN graph.
    ``orient="outward"`` then flips each propagated component so its normals
    point away from the component centroid on balance, which does not depend
    on the cloud's pose. With ``on_degenerate="drop"`` points whose
    neighborhood is collinear are removed from the output instead of raising.
    """
    n = len(c)
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    tree = cKDTree(c.points)
    _, nbrs = tree.query(c.points, k=k + 1)
    local = c.points[nbrs] - c.points[nbrs].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-12 * scale
    if np.any(degenerate):
        invalid = np.flatnonzero(degenerate)
        if on_degenerate == "raise" or len(invalid) == n:
            raise DegenerateNeighborhood(
                f"{len(invalid)} point(s) have a collinear neighborhood", invalid=invalid
            )
        log.warning("Dropping %d point(s) with degenerate normal neighborhoods", len(invalid))
        keep = np.flatnonzero(~degenerate)
        return estimate_normals(c.subset(keep), k, on_degenerate="drop", orient=orient)

    normals, labels = _orient_consistently(c.points, _renormalize(normals), nbrs)
    if orient == "outward":
        for comp in range(int(labels.max()) + 1):
            members = np.flatnonzero(labels == comp)
            offsets = c.points[members] - c.points[members].mean(axis=0)
            if np.einsum("ij,ij->", offsets, normals[members]) < 0:
                normals[members] = -normals[members]
    return PointCloud(c.points, normals)


def _orient_consistently(
    points: FloatArray, normals: FloatArray, nbrs: IntArray
) -> tuple[FloatArray, IntArray]:
    n = len(points)
    rows = np.repeat(np.arange(n), nbrs.shape[1] - 1)
    cols = nbrs[:, 1:].reshape(-1)
    off_diagonal = rows != cols
    rows, cols = rows[off_diagonal], cols[off_diagonal]
    dots = np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols]))
    # small positive floor: csgraph treats explicit zeros as missing edges
    weights = 1.0 - dots + 1e-9
    graph = coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)
    tree = minimum_spanning_tree(graph)
    n_comp, labels = _cc(tree, directed=False)

    out = normals.copy()
    for comp in range(n_comp):
        members = np.flatnonzero(labels == comp)
        root = members[np.argmax(points[members, 2])]
        if out[root, 2] < 0:
            out[root] = -out[root]
        order, parents = breadth_first_order(tree, root, directed=False)
        for node in order[1:]:
            if out[node] @ out[parents[node]] < 0:
                out[node] = -out[node]
    return out, np.asarray(labels, dtype=np.int64)
