"""Two-stage rigid registration: RANSAC on FPFH matches, then multi-scale point-to-plane ICP.

The moving mesh (the full tooth R) is aligned onto the fixed mesh (the
crown C); every returned transform maps moving coordinates into the fixed
frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from toothfuse.errors import DegenerateConfiguration, NoCorrespondences, NoValidModel
from toothfuse.features import DEFAULT_MAX_NEIGHBORS, compute_fpfh
from toothfuse.geometry import (
    FloatArray,
    IntArray,
    PointCloud,
    RigidTransform,
    TriMesh,
    compose,
    estimate_normals,
    sample_surface,
    voxel_downsample,
)

log = logging.getLogger(__name__)

_COLLINEAR_TOL = 1e-12
_MIN_UPDATE = 1e-7
_COND_LIMIT = 1e12
_MAX_BACKTRACK = 12
_RANSAC_BATCH = 1000
# cap on hypothesis x correspondence residuals evaluated at once
_RANSAC_WORK = 2_000_000


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrespondenceSet:
    """Index pairs (source[i], target[i])."""

    source: IntArray
    target: IntArray

    def __post_init__(self) -> None:
        if len(self.source) != len(self.target):
            raise ValueError("source and target index lists differ in length")

    def __len__(self) -> int:
        return len(self.source)

    @classmethod
    def identity(cls, n: int) -> CorrespondenceSet:
        idx = np.arange(n, dtype=np.int64)
        return cls(idx, idx.copy())


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    trace: tuple[float, ...] = ()
    iterations: int = 0
    no_correspondences: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness {self.fitness} outside [0, 1]")
        if self.inlier_rmse < 0.0:
            raise ValueError("inlier_rmse must be non-negative")


@dataclass(frozen=True)
class RansacParams:
    sample_size: int = 3
    max_iterations: int = 100_000
    # None means 1.5 x the coarsest schedule voxel
    distance_threshold: float | None = None
    similarity: float = 0.9
    seed: int = 0
    early_exit_fitness: float = 0.95

    def __post_init__(self) -> None:
        if self.sample_size < 3:
            raise ValueError("RANSAC sample size must be at least 3")
        if not 0.0 < self.similarity < 1.0:
            raise ValueError("edge-length similarity must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("RANSAC needs at least one iteration")
        if self.distance_threshold is not None and self.distance_threshold <= 0:
            raise ValueError("RANSAC distance threshold must be positive")

    def threshold_for(self, coarse_voxel: float) -> float:
        if self.distance_threshold is not None:
            return self.distance_threshold
        return 1.5 * coarse_voxel


@dataclass(frozen=True)
class IcpScheduleLevel:
    voxel: float
    max_distance: float
    iterations: int

    def __post_init__(self) -> None:
        if self.voxel <= 0 or self.max_distance <= 0 or self.iterations <= 0:
            raise ValueError("ICP schedule values must be positive")


DEFAULT_SCHEDULE: tuple[IcpScheduleLevel, ...] = tuple(
    IcpScheduleLevel(voxel=v, max_distance=2.0 * v, iterations=50) for v in (1.0, 0.5, 0.25)
)


@dataclass(frozen=True)
class RegistrationOptions:
    """Sampling and descriptor settings for register_multiscale."""

    n_samples: int = 50_000
    normal_neighbors: int = 16
    feature_radius_factor: float = 5.0
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS
    sample_seed: int = 0


@dataclass
class _Hypothesis:
    fitness: float = -1.0
    rmse: float = float("inf")
    inliers: int = 0
    iteration: int = -1
    transform: RigidTransform = field(default_factory=RigidTransform.identity)


# ---------------------------------------------------------------------------
# Rigid estimation
# ---------------------------------------------------------------------------


def _kabsch_batch(src: FloatArray, dst: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Batched least-squares rotation/translation for (B, K, 3) point sets.

    Returns (R, t, source singular values) with det(R) = +1 enforced.
    """
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    a = src - mu_s
    b = dst - mu_d
    h = np.einsum("bki,bkj->bij", a, b)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", vt, u)))
    d = np.where(d == 0, 1.0, d)
    corr = np.ones((len(src), 3))
    corr[:, 2] = d
    rot = np.einsum("bji,bj,bkj->bik", vt, corr, u)
    trans = mu_d[:, 0] - np.einsum("bij,bj->bi", rot, mu_s[:, 0])
    spread = np.linalg.svd(a, compute_uv=False)
    return rot, trans, spread


def estimate_rigid(src: npt.ArrayLike, dst: npt.ArrayLike) -> RigidTransform:
    """Least-squares rigid transform with R·s + t ≈ d (no scale)."""
    s = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(s) != len(d):
        raise ValueError("source and target point counts differ")
    if len(s) < 3:
        raise DegenerateConfiguration("at least three point pairs are required")
    rot, trans, spread = _kabsch_batch(s[None], d[None])
    if spread[0, 1] <= _COLLINEAR_TOL * max(spread[0, 0], 1e-300):
        raise DegenerateConfiguration("point pairs are collinear")
    return RigidTransform(_orthonormalize(rot[0]), trans[0])


def _orthonormalize(rot: FloatArray) -> FloatArray:
    u, _, vt = np.linalg.svd(rot)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, 2] = -u[:, 2]
        out = u @ vt
    return np.asarray(out)


# ---------------------------------------------------------------------------
# Matching and RANSAC
# ---------------------------------------------------------------------------


def match_features(src: FloatArray, dst: FloatArray) -> CorrespondenceSet:
    """Mutual nearest neighbors in descriptor space."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("both descriptor lists must be non-empty")
    _, fwd = cKDTree(dst).query(src, k=1)
    _, bwd = cKDTree(src).query(dst, k=1)
    fwd = np.asarray(fwd, dtype=np.int64)
    mutual = np.asarray(bwd, dtype=np.int64)[fwd] == np.arange(len(src))
    source = np.flatnonzero(mutual).astype(np.int64)
    return CorrespondenceSet(source, fwd[mutual])


def _edge_prune(s: FloatArray, d: FloatArray, similarity: float) -> npt.NDArray[np.bool_]:
    k = s.shape[1]
    ok = np.ones(len(s), dtype=bool)
    for i in range(k):
        for j in range(i + 1, k):
            ls = np.linalg.norm(s[:, i] - s[:, j], axis=1)
            ld = np.linalg.norm(d[:, i] - d[:, j], axis=1)
            ok &= np.minimum(ls, ld) >= similarity * np.maximum(ls, ld)
    return ok


def ransac_align(
    src: PointCloud, dst: PointCloud, corr: CorrespondenceSet, p: RansacParams
) -> RegistrationResult:
    """Best rigid hypothesis by (fitness, -inlier_rmse, lowest iteration)."""
    n_corr = len(corr)
    if n_corr < p.sample_size:
        raise NoValidModel(f"only {n_corr} correspondences for sample size {p.sample_size}")
    threshold = p.threshold_for(1.0)
    s_all = src.points[corr.source]
    d_all = dst.points[corr.target]
    rng = np.random.default_rng(p.seed)
    best = _Hypothesis()
    batch = max(1, min(_RANSAC_BATCH, _RANSAC_WORK // n_corr))

    done = 0
    while done < p.max_iterations:
        size = min(batch, p.max_iterations - done)
        picks = rng.integers(0, n_corr, size=(size, p.sample_size))
        ids = np.arange(done, done + size)
        done += size

        srt = np.sort(picks, axis=1)
        valid = np.all(srt[:, 1:] != srt[:, :-1], axis=1)
        valid &= _edge_prune(s_all[picks], d_all[picks], p.similarity)
        if not np.any(valid):
            continue
        picks, ids = picks[valid], ids[valid]
        rot, trans, spread = _kabsch_batch(s_all[picks], d_all[picks])
        keep = spread[:, 1] > _COLLINEAR_TOL * np.maximum(spread[:, 0], 1e-300)
        rot, trans, ids = rot[keep], trans[keep], ids[keep]
        if len(ids) == 0:
            continue

        moved = np.einsum("bij,nj->bni", rot, s_all) + trans[:, None, :]
        resid = np.linalg.norm(moved - d_all[None], axis=2)
        inlier = resid < threshold
        counts = inlier.sum(axis=1)
        sq = np.where(inlier, resid**2, 0.0).sum(axis=1)
        rmse = np.sqrt(sq / np.maximum(counts, 1))
        fitness = counts / n_corr
        # lexsort: last key is primary
        order = np.lexsort((ids, rmse, -fitness))
        top = order[0]
        cand_better = fitness[top] > best.fitness or (
            fitness[top] == best.fitness and rmse[top] < best.rmse
        )
        if cand_better:
            best = _Hypothesis(
                fitness=float(fitness[top]),
                rmse=float(rmse[top]),
                inliers=int(counts[top]),
                iteration=int(ids[top]),
                transform=RigidTransform(_orthonormalize(rot[top]), trans[top]),
            )
        if best.fitness > p.early_exit_fitness:
            log.debug("RANSAC early exit after %d hypotheses (fitness %.3f)", done, best.fitness)
            break

    if best.inliers < p.sample_size:
        raise NoValidModel(f"no hypothesis reached {p.sample_size} inliers in {done} iterations")
    log.debug(
        "RANSAC best hypothesis #%d: fitness %.3f rmse %.4f",
        best.iteration,
        best.fitness,
        best.rmse,
    )
    return RegistrationResult(
        transform=best.transform,
        fitness=min(1.0, best.fitness),
        inlier_rmse=best.rmse,
        iterations=done,
    )


# ---------------------------------------------------------------------------
# Point-to-plane ICP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _IcpState:
    transform: RigidTransform
    rmse: float
    count: int
    moved: FloatArray
    target: FloatArray
    normals: FloatArray


def _correspond(
    t: RigidTransform, src: FloatArray, tree: cKDTree, dst: PointCloud, max_dist: float
) -> _IcpState:
    normals = dst.normals
    assert normals is not None
    moved_all = t.apply_points(src)
    dist, idx = tree.query(moved_all, k=1, distance_upper_bound=max_dist)
    idx = np.asarray(idx, dtype=np.int64)
    ok = (idx < len(dst)) & (np.asarray(dist) <= max_dist)
    moved = moved_all[ok]
    target = dst.points[idx[ok]]
    n = normals[idx[ok]]
    if len(moved) == 0:
        return _IcpState(t, float("inf"), 0, moved, target, n)
    r = np.einsum("ij,ij->i", n, moved - target)
    return _IcpState(t, float(np.sqrt(np.mean(r**2))), len(moved), moved, target, n)


def _solve_step(state: _IcpState) -> FloatArray:
    r = np.einsum("ij,ij->i", state.normals, state.moved - state.target)
    jac = np.hstack([np.cross(state.moved, state.normals), state.normals])
    a = jac.T @ jac
    b = -jac.T @ r
    cond = np.linalg.cond(a)
    if np.isfinite(cond) and cond <= _COND_LIMIT:
        return np.asarray(cho_solve(cho_factor(a), b))
    step, *_ = np.linalg.lstsq(a, b, rcond=None)
    return np.asarray(step)


def _step_transform(x: FloatArray) -> RigidTransform:
    return RigidTransform(_orthonormalize(Rotation.from_rotvec(x[:3]).as_matrix()), x[3:])


def icp_point_to_plane(
    src: PointCloud,
    dst: PointCloud,
    init: RigidTransform,
    max_dist: float,
    iters: int,
) -> RegistrationResult:
    """Gauss-Newton point-to-plane ICP with step halving.

    The recorded objective (point-to-plane RMSE over the current
    correspondences) never increases: a step that would increase it is
    halved until it does not, and iteration stops when no halving helps.
    """
    if dst.normals is None:
        raise ValueError("point-to-plane ICP needs target normals")
    if max_dist <= 0:
        raise ValueError("max correspondence distance must be positive")
    if len(src) == 0 or len(dst) == 0:
        return RegistrationResult(init, 0.0, 0.0, no_correspondences=True)
    tree = cKDTree(dst.points)
    state = _correspond(init, src.points, tree, dst, max_dist)
    if state.count == 0:
        log.warning("ICP found no correspondences within %.3f mm", max_dist)
        return RegistrationResult(init, 0.0, 0.0, no_correspondences=True)

    trace = [state.rmse]
    iteration = 0
    for iteration in range(1, iters + 1):
        x = _solve_step(state)
        if not np.all(np.isfinite(x)) or float(np.linalg.norm(x)) < _MIN_UPDATE:
            break
        accepted = None
        for _ in range(_MAX_BACKTRACK):
            trial = compose(_step_transform(x), state.transform)
            cand = _correspond(trial, src.points, tree, dst, max_dist)
            if cand.count > 0 and cand.rmse <= state.rmse:
                accepted = cand
                break
            x = x / 2.0
        if accepted is None:
            break
        state = accepted
        trace.append(state.rmse)
        if float(np.linalg.norm(x)) < _MIN_UPDATE:
            break

    return RegistrationResult(
        transform=state.transform,
        fitness=state.count / len(src),
        inlier_rmse=state.rmse,
        trace=tuple(trace),
        iterations=iteration,
    )


# ---------------------------------------------------------------------------
# Full registration
# ---------------------------------------------------------------------------


def _prepare(cloud: PointCloud, voxel: float, k: int) -> PointCloud:
    down = voxel_downsample(cloud, voxel)
    return estimate_normals(down, min(k, len(down) - 1), on_degenerate="drop", orient="outward")


def register_multiscale(
    moving: TriMesh,
    fixed: TriMesh,
    schedule: tuple[IcpScheduleLevel, ...] | list[IcpScheduleLevel] = DEFAULT_SCHEDULE,
    ransac: RansacParams | None = None,
    options: RegistrationOptions | None = None,
) -> RegistrationResult:
    """Coarse RANSAC alignment then ICP per schedule level, coarse to fine."""
    ransac = ransac or RansacParams()
    options = options or RegistrationOptions()
    if not schedule:
        raise ValueError("ICP schedule must have at least one level")
    moving_samples = sample_surface(moving, options.n_samples, options.sample_seed)
    fixed_samples = sample_surface(fixed, options.n_samples, options.sample_seed + 1)

    coarse = schedule[0]
    src = _prepare(moving_samples, coarse.voxel, options.normal_neighbors)
    dst = _prepare(fixed_samples, coarse.voxel, options.normal_neighbors)
    radius = options.feature_radius_factor * coarse.voxel
    corr = match_features(
        compute_fpfh(src, radius, options.max_neighbors),
        compute_fpfh(dst, radius, options.max_neighbors),
    )
    log.info("Coarse level: %d/%d points, %d mutual matches", len(src), len(dst), len(corr))
    threshold = ransac.threshold_for(coarse.voxel)
    coarse_params = RansacParams(
        sample_size=ransac.sample_size,
        max_iterations=ransac.max_iterations,
        distance_threshold=threshold,
        similarity=ransac.similarity,
        seed=ransac.seed,
        early_exit_fitness=ransac.early_exit_fitness,
    )
    result = ransac_align(src, dst, corr, coarse_params)
    log.info("RANSAC fitness %.3f, rmse %.4f mm", result.fitness, result.inlier_rmse)

    transform = result.transform
    level_trace: list[float] = []
    total_iters = result.iterations
    for level_no, level in enumerate(schedule):
        k = options.normal_neighbors
        src_l = src if level_no == 0 else _prepare(moving_samples, level.voxel, k)
        dst_l = dst if level_no == 0 else _prepare(fixed_samples, level.voxel, k)
        result = icp_point_to_plane(src_l, dst_l, transform, level.max_distance, level.iterations)
        if result.no_correspondences:
            raise NoCorrespondences(
                f"ICP level {level_no} (voxel {level.voxel} mm) found no pairs within "
                f"{level.max_distance} mm"
            )
        transform = result.transform
        level_trace.append(result.inlier_rmse)
        total_iters += result.iterations
        log.info(
            "ICP level %d (voxel %.3f): fitness %.3f, rmse %.4f mm after %d iterations",
            level_no,
            level.voxel,
            result.fitness,
            result.inlier_rmse,
            result.iterations,
        )

    return RegistrationResult(
        transform=transform,
        fitness=result.fitness,
        inlier_rmse=result.inlier_rmse,
        trace=tuple(level_trace),
        iterations=total_iters,
    )


def rotation_error_deg(a: RigidTransform, b: RigidTransform) -> float:
    return RigidTransform(a.rotation @ b.rotation.T, np.zeros(3)).rotation_angle_deg


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))
