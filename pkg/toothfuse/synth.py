"""Synthetic teeth and spheres standing in for segmented clinical scans.

A tooth is an implicit union of a superellipsoid crown carrying uneven
cusps and one or two tapered roots. The ground truth is its marching-cubes
surface; the crown scan analog keeps the triangles above a gingival cut
plane; the volumetric-scan analog is a coarser re-extraction with vertex
noise, moved out of the crown frame by a random rigid motion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from toothfuse.extraction import Bounds, Field, cube_bounds, evaluate_field, marching_cubes
from toothfuse.geometry import (
    FloatArray,
    RigidTransform,
    TriMesh,
    apply_transform,
    inverse,
    submesh,
)

log = logging.getLogger(__name__)

_MARGIN = 1.5
_BLEND = 1.0
_CUSP_WEIGHTS = (1.0, 0.7, 0.85, 0.55)
_SECOND_ROOT_LENGTH = 0.85


@dataclass(frozen=True)
class SyntheticToothSpec:
    """Shape, tessellation, degradation and misalignment of one synthetic tooth (mm)."""

    crown_a: float = 5.0
    crown_b: float = 4.5
    crown_c: float = 3.5
    crown_exponent_xy: float = 2.6
    crown_exponent_z: float = 2.2
    cusp_height: float = 0.8
    root_count: int = 2
    root_radius: float = 1.8
    root_taper: float = 0.35
    root_length: float = 12.0
    root_spread: float = 2.0
    cut_height: float = -1.0
    resolution: int = 96
    decimation: float = 0.5
    noise_sigma: float = 0.05
    max_rotation_deg: float = 30.0
    max_translation: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        dims = (self.crown_a, self.crown_b, self.crown_c, self.root_radius, self.root_length)
        if min(dims) <= 0 or self.crown_exponent_xy <= 0 or self.crown_exponent_z <= 0:
            raise ValueError("tooth dimensions and exponents must be positive")
        if self.root_count not in (1, 2):
            raise ValueError("a synthetic tooth has one or two roots")
        if not 0.0 < self.root_taper <= 1.0:
            raise ValueError("root taper must lie in (0, 1]")
        if self.cusp_height < 0 or self.noise_sigma < 0:
            raise ValueError("cusp height and noise sigma must be non-negative")
        if not 0.0 < self.decimation <= 1.0:
            raise ValueError("decimation ratio must lie in (0, 1]")
        if self.resolution < 8:
            raise ValueError("tessellation resolution must be at least 8")
        if self.max_rotation_deg < 0 or self.max_translation < 0:
            raise ValueError("perturbation ranges must be non-negative")
        if not -self.crown_c < self.cut_height < self.crown_c:
            raise ValueError("cut plane must cross the crown")

    def varied(self, seed: int, spread: float = 0.1) -> SyntheticToothSpec:
        """A family member: dimensions jittered by up to +-spread, root count drawn from seed."""
        rng = np.random.default_rng(seed)

        def jitter(v: float) -> float:
            return float(v * (1.0 + spread * rng.uniform(-1.0, 1.0)))

        return replace(
            self,
            crown_a=jitter(self.crown_a),
            crown_b=jitter(self.crown_b),
            crown_c=jitter(self.crown_c),
            cusp_height=jitter(self.cusp_height),
            root_count=int(rng.integers(1, 3)),
            root_radius=jitter(self.root_radius),
            root_length=jitter(self.root_length),
            root_spread=jitter(self.root_spread),
            seed=seed,
        )


class SyntheticTooth(NamedTuple):
    ground_truth: TriMesh
    crown: TriMesh
    degraded_full: TriMesh
    true_transform: RigidTransform


# ---------------------------------------------------------------------------
# Implicit pieces
# ---------------------------------------------------------------------------


def _smooth_min(a: FloatArray, b: FloatArray, k: float) -> FloatArray:
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return np.asarray(b * (1.0 - h) + a * h - k * h * (1.0 - h))


def _crown_field(spec: SyntheticToothSpec, cusp_scale: FloatArray) -> Field:
    a, b, c = spec.crown_a, spec.crown_b, spec.crown_c
    p, q = spec.crown_exponent_xy, spec.crown_exponent_z
    cusps = np.array(
        [[0.45 * a, 0.4 * b], [-0.45 * a, 0.4 * b], [0.45 * a, -0.4 * b], [-0.45 * a, -0.4 * b]]
    )
    cusp_z = 0.8 * c
    width = 0.35 * min(a, b)

    def field(x: FloatArray) -> FloatArray:
        xy = (np.abs(x[:, 0] / a) ** p + np.abs(x[:, 1] / b) ** p) ** (q / p)
        inside = xy + np.abs(x[:, 2] / c) ** q
        f = (inside ** (1.0 / q) - 1.0) * min(a, b, c)
        for (cx, cy), h in zip(cusps, cusp_scale * spec.cusp_height, strict=True):
            r2 = (x[:, 0] - cx) ** 2 + (x[:, 1] - cy) ** 2 + (x[:, 2] - cusp_z) ** 2
            f = f - h * np.exp(-r2 / width**2)
        return np.asarray(f)

    return field


def _root_axes(spec: SyntheticToothSpec) -> list[tuple[FloatArray, FloatArray, float]]:
    """(top, tip, top radius) of each root."""
    top_z = -0.5 * spec.crown_c
    if spec.root_count == 1:
        offsets = [(0.4, 0.2, 1.0, 0.15)]
    else:
        half = spec.root_spread / 2.0
        offsets = [(half + 0.3, 0.2, 1.0, 0.15), (-half + 0.3, -0.1, _SECOND_ROOT_LENGTH, -0.1)]
    roots = []
    for x0, y0, length_scale, tilt in offsets:
        length = spec.root_length * length_scale
        top = np.array([x0, y0, top_z])
        tip = np.array([x0 + tilt * length, y0, top_z - length])
        roots.append((top, tip, spec.root_radius))
    return roots


def _cone_field(top: FloatArray, tip: FloatArray, radius: float, taper: float) -> Field:
    axis = tip - top
    length = float(np.linalg.norm(axis))
    u = axis / length

    def field(x: FloatArray) -> FloatArray:
        rel = x - top
        t = rel @ u
        radial = np.linalg.norm(rel - t[:, None] * u, axis=1)
        r = radius * (1.0 - (1.0 - taper) * np.clip(t / length, 0.0, 1.0))
        return np.asarray(np.maximum(radial - r, np.maximum(-t, t - length)))

    return field


def tooth_field(spec: SyntheticToothSpec) -> Field:
    """Approximate signed distance of the synthetic tooth in mm (negative inside)."""
    rng = np.random.default_rng(spec.seed)
    jitter = 1.0 + 0.15 * rng.uniform(-1.0, 1.0, len(_CUSP_WEIGHTS))
    cusp_scale = np.array(_CUSP_WEIGHTS) * jitter
    crown = _crown_field(spec, cusp_scale)
    roots = [_cone_field(top, tip, r, spec.root_taper) for top, tip, r in _root_axes(spec)]

    def field(x: FloatArray) -> FloatArray:
        f = crown(x)
        for root in roots:
            f = _smooth_min(f, root(x), _BLEND)
        return f

    return field


def tooth_bounds(spec: SyntheticToothSpec) -> Bounds:
    tips = [tip for _, tip, _ in _root_axes(spec)]
    reach = max(spec.crown_a, spec.crown_b, *(abs(t[0]) + spec.root_radius for t in tips))
    lo_z = min(t[2] for t in tips) - _MARGIN
    hi_z = spec.crown_c + spec.cusp_height + _MARGIN
    side = reach + _MARGIN
    return ((-side, -side, lo_z), (side, side, hi_z))


def _extract(spec: SyntheticToothSpec, resolution: int) -> TriMesh:
    """Marching cubes of the tooth field, isotropic spacing; resolution counts the long axis."""
    lo, hi = tooth_bounds(spec)
    extent = np.array(hi) - np.array(lo)
    h = float(extent.max()) / (resolution - 1)
    res = tuple(int(math.ceil(e / h - 1e-9)) + 1 for e in extent)
    top = tuple(float(lo[a] + (res[a] - 1) * h) for a in range(3))
    grid = evaluate_field(
        tooth_field(spec), (res[0], res[1], res[2]), (lo, (top[0], top[1], top[2]))
    )
    return marching_cubes(grid, 0.0)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def random_transform(
    rng: np.random.Generator, max_rotation_deg: float, max_translation: float
) -> RigidTransform:
    """Rotation about a random axis by up to max_rotation_deg, shift up to max_translation."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_rotation_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    shift = direction * rng.uniform(0.0, max_translation)
    rot = Rotation.from_rotvec(axis * angle).as_matrix()
    return RigidTransform(rot, shift)


def crown_of(ground_truth: TriMesh, cut_height: float) -> TriMesh:
    """Triangles with every corner strictly above the cut plane z = cut_height."""
    above = ground_truth.vertices[:, 2] > cut_height
    keep = np.flatnonzero(np.all(above[ground_truth.triangles], axis=1))
    return submesh(ground_truth, keep)


def synth_tooth(spec: SyntheticToothSpec) -> SyntheticTooth:
    """Ground truth, crown scan analog, degraded full mesh and the transform that re-aligns it."""
    ground_truth = _extract(spec, spec.resolution)
    crown = crown_of(ground_truth, spec.cut_height)

    # tooth_field draws the cusp jitter from default_rng(seed); keep a separate stream
    rng = np.random.default_rng([spec.seed, 1])
    if spec.decimation == 1.0:
        degraded = ground_truth
    else:
        coarse = max(8, int(round(spec.resolution * math.sqrt(spec.decimation))))
        degraded = _extract(spec, coarse)
    if spec.noise_sigma > 0:
        noisy = degraded.vertices + rng.normal(0.0, spec.noise_sigma, degraded.vertices.shape)
        degraded = TriMesh(noisy, degraded.triangles)
    true_t = random_transform(rng, spec.max_rotation_deg, spec.max_translation)
    degraded = apply_transform(inverse(true_t), degraded)
    log.info(
        "Synthetic tooth %d: %d ground-truth triangles, %d crown, %d degraded",
        spec.seed,
        ground_truth.n_triangles,
        crown.n_triangles,
        degraded.n_triangles,
    )
    return SyntheticTooth(ground_truth, crown, degraded, true_t)


def sphere_mesh(radius: float, resolution: int = 64, bound: float = 1.05) -> TriMesh:
    """Watertight sphere about the origin, extracted from its exact distance field."""
    if not 0.0 < radius < bound:
        raise ValueError("sphere radius must lie inside the grid bound")
    grid = evaluate_field(
        lambda x: np.linalg.norm(x, axis=1) - radius,
        (resolution, resolution, resolution),
        cube_bounds(bound),
    )
    return marching_cubes(grid, 0.0)


def sphere_radii(count: int, r_min: float = 0.3, r_max: float = 0.7) -> list[float]:
    if count < 1:
        raise ValueError("family needs at least one member")
    return [float(r) for r in np.linspace(r_min, r_max, count)]


def sphere_family(
    count: int, r_min: float = 0.3, r_max: float = 0.7, resolution: int = 64
) -> list[TriMesh]:
    return [sphere_mesh(r, resolution) for r in sphere_radii(count, r_min, r_max)]


def tooth_family(
    count: int, first_seed: int, base: SyntheticToothSpec | None = None
) -> list[TriMesh]:
    """Ground-truth surfaces of teeth first_seed .. first_seed + count - 1."""
    base = base or SyntheticToothSpec()
    seeds = range(first_seed, first_seed + count)
    return [_extract(base.varied(s), base.resolution) for s in seeds]
