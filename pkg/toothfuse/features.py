"""Fast Point Feature Histograms (33 bins: 11 each for alpha, phi, theta)."""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.spatial import cKDTree

from toothfuse.errors import CoincidentPoints
from toothfuse.geometry import BoolArray, FloatArray, IntArray, PointCloud
from toothfuse.workers import chunk_ranges, map_ordered

log = logging.getLogger(__name__)

FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS
DEFAULT_MAX_NEIGHBORS = 100

# A signature is a 33-vector; a batch of them is an (N, 33) array.
FpfhSignature = FloatArray

_MIN_PAIR_DISTANCE = 1e-12
_CHUNK = 2048


# ---------------------------------------------------------------------------
# Pair features
# ---------------------------------------------------------------------------


def _pair_features_batch(
    p_s: FloatArray, n_s: FloatArray, p_t: FloatArray, n_t: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """Vectorized Darboux-frame features; caller guarantees distinct points."""
    delta = p_t - p_s
    dist = np.linalg.norm(delta, axis=1)
    dhat = delta / dist[:, None]
    cos_s = np.abs(np.einsum("ij,ij->i", n_s, dhat))
    cos_t = np.abs(np.einsum("ij,ij->i", n_t, dhat))
    swap = cos_t > cos_s
    u = np.where(swap[:, None], n_t, n_s)
    other = np.where(swap[:, None], n_s, n_t)
    dhat = np.where(swap[:, None], -dhat, dhat)

    v = np.cross(u, dhat)
    v_norm = np.linalg.norm(v, axis=1)
    ok = v_norm > 0.0
    v = np.where(ok[:, None], v / np.where(ok, v_norm, 1.0)[:, None], 0.0)
    w = np.cross(u, v)

    alpha = np.where(ok, np.einsum("ij,ij->i", v, other), 0.0)
    phi = np.einsum("ij,ij->i", u, dhat)
    theta = np.where(
        ok, np.arctan2(np.einsum("ij,ij->i", w, other), np.einsum("ij,ij->i", u, other)), 0.0
    )
    # arctan2 may return exactly -pi; the range is (-pi, pi]
    theta = np.where(theta <= -math.pi, math.pi, theta)
    return np.clip(alpha, -1.0, 1.0), np.clip(phi, -1.0, 1.0), theta, dist


def pair_features(
    p_s: FloatArray, n_s: FloatArray, p_t: FloatArray, n_t: FloatArray
) -> tuple[float, float, float, float]:
    """(alpha, phi, theta, d) for one oriented point pair.

    The point whose normal makes the smaller angle with the connecting line
    becomes the source; roles are swapped if needed.
    """
    ps, ns, pt, nt = (np.asarray(a, dtype=np.float64).reshape(1, 3) for a in (p_s, n_s, p_t, n_t))
    if float(np.linalg.norm(pt - ps)) < _MIN_PAIR_DISTANCE:
        raise CoincidentPoints("pair features need two distinct points")
    alpha, phi, theta, dist = _pair_features_batch(ps, ns, pt, nt)
    return float(alpha[0]), float(phi[0]), float(theta[0]), float(dist[0])


def _bin(values: FloatArray, lo: float, hi: float) -> IntArray:
    idx = np.floor((values - lo) / (hi - lo) * FPFH_BINS).astype(np.int64)
    return np.clip(idx, 0, FPFH_BINS - 1)


# ---------------------------------------------------------------------------
# Neighborhoods
# ---------------------------------------------------------------------------


def _radius_neighbors(
    points: FloatArray, radius: float, max_neighbors: int
) -> tuple[IntArray, FloatArray, BoolArray]:
    """(N, K) neighbor ids, distances and validity mask, nearest first, self excluded."""
    n = len(points)
    tree = cKDTree(points)
    dist, idx = tree.query(points, k=max_neighbors + 1, distance_upper_bound=radius)
    dist = np.asarray(dist, dtype=np.float64).reshape(n, -1)
    idx = np.asarray(idx, dtype=np.int64).reshape(n, -1)
    valid = (idx < n) & (idx != np.arange(n)[:, None]) & (dist >= _MIN_PAIR_DISTANCE)
    valid &= dist <= radius
    # keep at most max_neighbors valid entries per row
    valid &= np.cumsum(valid, axis=1) <= max_neighbors
    idx = np.where(valid, idx, 0)
    return idx, dist, valid


def _spfh_rows(
    cloud: PointCloud, rows: IntArray, nbr: IntArray, valid: BoolArray
) -> FloatArray:
    normals = cloud.normals
    assert normals is not None
    k = nbr.shape[1]
    src = np.repeat(rows, k)
    dst = nbr.reshape(-1)
    mask = valid.reshape(-1)
    out = np.zeros((len(rows), FPFH_DIM))
    if not np.any(mask):
        return out
    alpha, phi, theta, _ = _pair_features_batch(
        cloud.points[src[mask]], normals[src[mask]], cloud.points[dst[mask]], normals[dst[mask]]
    )
    owner = np.repeat(np.arange(len(rows)), k)[mask]
    for block, (values, lo, hi) in enumerate(
        ((alpha, -1.0, 1.0), (phi, -1.0, 1.0), (theta, -math.pi, math.pi))
    ):
        flat = owner * FPFH_DIM + block * FPFH_BINS + _bin(values, lo, hi)
        out += np.bincount(flat, minlength=len(rows) * FPFH_DIM).reshape(len(rows), FPFH_DIM)
    return _normalize_blocks(out)


def _normalize_blocks(hist: FloatArray) -> FloatArray:
    blocks = hist.reshape(len(hist), 3, FPFH_BINS)
    sums = blocks.sum(axis=2, keepdims=True)
    scaled = np.where(sums > 0, blocks * (100.0 / np.where(sums > 0, sums, 1.0)), 0.0)
    return np.asarray(scaled.reshape(len(hist), FPFH_DIM))


def _require_normals(c: PointCloud) -> None:
    if c.normals is None:
        raise ValueError("FPFH needs a cloud with normals")


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def compute_spfh_all(
    c: PointCloud, radius: float, max_neighbors: int = DEFAULT_MAX_NEIGHBORS
) -> tuple[FloatArray, IntArray, FloatArray, BoolArray]:
    """SPFH for every point plus the neighborhoods used (ids, distances, mask)."""
    _require_normals(c)
    if radius <= 0:
        raise ValueError("feature radius must be positive")
    n = len(c)
    if n == 0:
        empty = np.zeros((0, max_neighbors + 1))
        return np.zeros((0, FPFH_DIM)), empty.astype(np.int64), empty, empty.astype(bool)
    nbr, dist, valid = _radius_neighbors(c.points, radius, max_neighbors)
    parts = map_ordered(
        lambda r: _spfh_rows(c, np.arange(r[0], r[1]), nbr[r[0] : r[1]], valid[r[0] : r[1]]),
        chunk_ranges(n, _CHUNK),
    )
    return np.concatenate(parts), nbr, dist, valid


def compute_spfh(
    c: PointCloud, i: int, radius: float, max_neighbors: int = DEFAULT_MAX_NEIGHBORS
) -> FpfhSignature:
    """Simplified histogram of one point over its radius neighbors."""
    _require_normals(c)
    if radius <= 0:
        raise ValueError("feature radius must be positive")
    nbr, _, valid = _radius_neighbors(c.points, radius, max_neighbors)
    return _spfh_rows(c, np.array([i]), nbr[i : i + 1], valid[i : i + 1])[0]


def compute_fpfh(
    c: PointCloud, radius: float, max_neighbors: int = DEFAULT_MAX_NEIGHBORS
) -> FpfhSignature:
    """(N, 33) FPFH: own SPFH plus the distance-weighted mean of neighbor SPFHs."""
    spfh, nbr, dist, valid = compute_spfh_all(c, radius, max_neighbors)
    if len(spfh) == 0:
        return spfh
    counts = valid.sum(axis=1)
    weights = np.where(valid, 1.0 / np.where(valid, dist, 1.0), 0.0)
    weights /= np.maximum(counts, 1)[:, None]
    fpfh = spfh + np.einsum("nk,nkd->nd", weights, spfh[nbr])
    log.debug("Computed FPFH for %d points (radius %.3f mm)", len(c), radius)
    return _normalize_blocks(fpfh)
