"""Dense grid evaluation of an implicit field and marching-cubes surface extraction."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from toothfuse.errors import EmptySurface
from toothfuse.geometry import FloatArray, IntArray, TriMesh
from toothfuse.implicit import SdfNetwork, forward
from toothfuse.mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from toothfuse.sdf import NormalizationInfo
from toothfuse.workers import chunk_ranges, map_ordered

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 192
DEFAULT_BOUND = 1.05

# exact iso values are pushed off the level set to avoid zero-area triangles
_ISO_NUDGE = 1e-12
_SLAB = 16

Field = Callable[[FloatArray], FloatArray]
Resolution = tuple[int, int, int]
Bounds = tuple[tuple[float, float, float], tuple[float, float, float]]


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    resolution: int = DEFAULT_RESOLUTION
    bound: float = DEFAULT_BOUND

    def __post_init__(self) -> None:
        if self.resolution < 2:
            raise ValueError("grid resolution must be at least 2")
        if self.bound <= 0:
            raise ValueError("grid bound must be positive")

    @property
    def res(self) -> Resolution:
        return (self.resolution, self.resolution, self.resolution)

    @property
    def bounds(self) -> Bounds:
        lo = -self.bound
        return ((lo, lo, lo), (self.bound, self.bound, self.bound))


def cube_bounds(bound: float = DEFAULT_BOUND) -> Bounds:
    return GridConfig(bound=bound).bounds


@dataclass(frozen=True, eq=False)
class ScalarGrid:
    """Field samples on a regular lattice; ``values`` is flat with x varying fastest."""

    resolution: Resolution
    bounds: Bounds
    values: FloatArray

    def __post_init__(self) -> None:
        res = tuple(int(r) for r in self.resolution)
        if len(res) != 3 or min(res) < 2:
            raise ValueError("grid needs at least 2 samples per axis")
        lo, hi = (tuple(float(v) for v in b) for b in self.bounds)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi, strict=True)):
            raise ValueError("grid bounds must satisfy lo < hi on every axis")
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(values) != res[0] * res[1] * res[2]:
            raise ValueError(f"expected {res[0] * res[1] * res[2]} values, got {len(values)}")
        values.flags.writeable = False
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "bounds", (lo, hi))
        object.__setattr__(self, "values", values)

    def axis(self, a: int) -> FloatArray:
        """Sample coordinates along axis a (0=x, 1=y, 2=z); endpoints equal the bounds."""
        return np.linspace(self.bounds[0][a], self.bounds[1][a], self.resolution[a])

    def volume(self) -> FloatArray:
        """Values as a (nz, ny, nx) array."""
        nx, ny, nz = self.resolution
        return self.values.reshape(nz, ny, nx)

    @property
    def spacing(self) -> FloatArray:
        lo, hi = np.array(self.bounds[0]), np.array(self.bounds[1])
        return np.asarray((hi - lo) / (np.array(self.resolution) - 1))


def _slab_points(axes: list[FloatArray], k0: int, k1: int) -> FloatArray:
    zz, yy, xx = np.meshgrid(axes[2][k0:k1], axes[1], axes[0], indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def evaluate_field(fn: Field, res: Resolution, bounds: Bounds) -> ScalarGrid:
    """Evaluate a vectorized field (N, 3) -> (N,) at every grid point, slab by slab."""
    if min(res) < 2:
        raise ValueError("grid needs at least 2 samples per axis")
    lo, hi = bounds
    axes = [np.linspace(lo[a], hi[a], res[a]) for a in range(3)]

    def run(r: tuple[int, int]) -> FloatArray:
        pts = _slab_points(axes, r[0], r[1])
        return np.asarray(fn(pts), dtype=np.float64).reshape(-1)

    parts = map_ordered(run, chunk_ranges(res[2], _SLAB))
    return ScalarGrid(res, bounds, np.concatenate(parts))


def evaluate_grid(
    net: SdfNetwork, z: npt.ArrayLike, res: Resolution, bounds: Bounds | None = None
) -> ScalarGrid:
    latent = np.asarray(z, dtype=np.float64).reshape(-1)
    return evaluate_field(lambda p: forward(net, latent, p), res, bounds or cube_bounds())


# ---------------------------------------------------------------------------
# Marching cubes
# ---------------------------------------------------------------------------


def _edge_geometry() -> tuple[IntArray, IntArray]:
    """Per cube edge: offset of its lower corner and its axis."""
    a = CORNER_OFFSETS[EDGE_CORNERS[:, 0]]
    b = CORNER_OFFSETS[EDGE_CORNERS[:, 1]]
    return np.minimum(a, b), np.argmax(np.abs(b - a), axis=1)


_EDGE_LOWER, _EDGE_AXIS = _edge_geometry()


def _slab_triangles(vol: FloatArray, iso: float, k0: int, k1: int) -> IntArray:
    """Edge keys (T, 3) of the triangles produced by cell layers k0..k1-1."""
    nz, ny, nx = vol.shape
    block = vol[k0 : k1 + 1]
    cz, cy, cx = k1 - k0, ny - 1, nx - 1
    case = np.zeros((cz, cy, cx), dtype=np.int64)
    for c, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        corner = block[oz : oz + cz, oy : oy + cy, ox : ox + cx]
        case |= (corner < iso).astype(np.int64) << c
    active = np.flatnonzero((case != 0) & (case != 255))
    if len(active) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    ck, cj, ci = np.unravel_index(active, (cz, cy, cx))
    ck = ck + k0
    rows = TRI_TABLE[case.ravel()[active], :15].reshape(-1, 5, 3)
    cell, slot = np.nonzero(rows[:, :, 0] >= 0)
    edges = rows[cell, slot]
    lower = _EDGE_LOWER[edges]
    vi = ci[cell][:, None] + lower[..., 0]
    vj = cj[cell][:, None] + lower[..., 1]
    vk = ck[cell][:, None] + lower[..., 2]
    return np.asarray(((vk * ny + vj) * nx + vi) * 3 + _EDGE_AXIS[edges])


def marching_cubes(g: ScalarGrid, iso: float = 0.0) -> TriMesh:
    """Triangulate the iso level set; triangles face increasing field values.

    Vertices sit on lattice edges at the linear-interpolation crossing and are
    shared by every cell touching that edge.
    """
    vol = g.volume().copy()
    vol[vol == iso] = iso + _ISO_NUDGE
    nz, ny, nx = vol.shape
    parts = map_ordered(
        lambda r: _slab_triangles(vol, iso, r[0], r[1]), chunk_ranges(nz - 1, _SLAB)
    )
    keys = np.concatenate(parts) if parts else np.zeros((0, 3), dtype=np.int64)
    if len(keys) == 0:
        return TriMesh.empty()

    unique, inverse = np.unique(keys.ravel(), return_inverse=True)
    axis = unique % 3
    k, j, i = np.unravel_index(unique // 3, (nz, ny, nx))
    step = np.stack([axis == 0, axis == 1, axis == 2], axis=1).astype(np.int64)
    v0 = vol[k, j, i]
    v1 = vol[k + step[:, 2], j + step[:, 1], i + step[:, 0]]
    t = (iso - v0) / (v1 - v0)
    axes = [g.axis(a) for a in range(3)]
    p0 = np.stack([axes[0][i], axes[1][j], axes[2][k]], axis=1)
    p1 = np.stack(
        [axes[0][i + step[:, 0]], axes[1][j + step[:, 1]], axes[2][k + step[:, 2]]], axis=1
    )
    vertices = p0 + t[:, None] * (p1 - p0)
    # table winding faces the low side; reverse it
    triangles = inverse.reshape(-1, 3)[:, [0, 2, 1]]
    log.debug("Marching cubes: %d vertices, %d triangles", len(vertices), len(triangles))
    return TriMesh(vertices, triangles)


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------


def reconstruct(
    net: SdfNetwork,
    z: npt.ArrayLike,
    info: NormalizationInfo,
    res: int = DEFAULT_RESOLUTION,
    bound: float = DEFAULT_BOUND,
) -> TriMesh:
    """Evaluate the decoder for z on a res³ grid, extract S and map it back to millimetres."""
    grid_cfg = GridConfig(resolution=res, bound=bound)
    grid = evaluate_grid(net, z, grid_cfg.res, grid_cfg.bounds)
    surface = marching_cubes(grid, 0.0)
    if surface.n_triangles == 0:
        raise EmptySurface(
            f"decoder field has no zero crossing on the {res}^3 grid "
            f"(range {grid.values.min():.4f}..{grid.values.max():.4f})"
        )
    log.info("Extracted %d vertices, %d triangles", surface.n_vertices, surface.n_triangles)
    return info.denormalize_mesh(surface)
