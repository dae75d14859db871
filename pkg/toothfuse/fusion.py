"""Hybrid proxy: isolate the root of the aligned full mesh and union it with the crown."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from toothfuse.errors import EmptyMesh, EmptyRoot
from toothfuse.geometry import (
    BoolArray,
    TriMesh,
    boundary_edge_count,
    concatenate,
    connected_components,
    submesh,
)
from toothfuse.spatial import SpatialIndex

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.6


@dataclass(frozen=True)
class FusionParams:
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class FusionStats:
    crown_vertices: int
    crown_triangles: int
    root_vertices: int
    root_triangles: int
    root_components: int
    hybrid_vertices: int
    hybrid_triangles: int
    boundary_edges: int


def root_vertex_mask(r_aligned: TriMesh, crown: TriMesh, tau: float) -> BoolArray:
    """True for vertices farther than tau from the crown surface."""
    if r_aligned.n_vertices == 0 or crown.n_triangles == 0:
        raise EmptyMesh("root isolation needs a full mesh and a crown with triangles")
    hits = SpatialIndex.from_mesh(crown).closest_points(r_aligned.vertices)
    return np.asarray(hits.distances > tau)


def _root_candidates(r_aligned: TriMesh, crown: TriMesh, p: FusionParams) -> list[TriMesh]:
    keep = root_vertex_mask(r_aligned, crown, p.tau)
    if not np.any(keep):
        raise EmptyRoot(f"no vertex lies farther than tau={p.tau} mm from the crown")
    # strict rule: a triangle survives only if all three corners do
    tri_keep = np.all(keep[r_aligned.triangles], axis=1)
    if not np.any(tri_keep):
        raise EmptyRoot(f"no triangle has all corners farther than tau={p.tau} mm from the crown")
    return connected_components(submesh(r_aligned, np.flatnonzero(tri_keep)))


def isolate_root(r_aligned: TriMesh, crown: TriMesh, p: FusionParams) -> TriMesh:
    """Largest connected component of the strictly-beyond-tau part of the full mesh."""
    components = _root_candidates(r_aligned, crown, p)
    if len(components) > 1:
        log.debug("Root has %d components; keeping the largest", len(components))
    return components[0]


def make_hybrid_proxy(crown: TriMesh, root: TriMesh) -> TriMesh:
    """Plain union: crown vertices/triangles first, then the root's, reindexed."""
    if crown.n_triangles == 0 or root.n_triangles == 0:
        raise EmptyMesh("hybrid proxy needs a non-empty crown and root")
    return concatenate(
        [TriMesh(crown.vertices, crown.triangles), TriMesh(root.vertices, root.triangles)]
    )


def naive_fusion(
    crown: TriMesh, r_aligned: TriMesh, p: FusionParams | None = None
) -> tuple[TriMesh, TriMesh, FusionStats]:
    """Isolate the root and build H in one call. Returns (H, R_root, stats)."""
    p = p or FusionParams()
    components = _root_candidates(r_aligned, crown, p)
    root = components[0]
    hybrid = make_hybrid_proxy(crown, root)
    stats = FusionStats(
        crown_vertices=crown.n_vertices,
        crown_triangles=crown.n_triangles,
        root_vertices=root.n_vertices,
        root_triangles=root.n_triangles,
        root_components=len(components),
        hybrid_vertices=hybrid.n_vertices,
        hybrid_triangles=hybrid.n_triangles,
        boundary_edges=boundary_edge_count(hybrid),
    )
    log.info(
        "Hybrid proxy: %d vertices, %d triangles, %d boundary edges",
        stats.hybrid_vertices,
        stats.hybrid_triangles,
        stats.boundary_edges,
    )
    return hybrid, root, stats
