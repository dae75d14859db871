"""One-sided surface metrics, error maps and cohort summaries.

Distances are always measured from samples of a reference surface to the
reconstruction, never the other way round: seams and holes in the
reference are not penalized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from toothfuse.errors import EmptyMesh, ZeroDiagonal
from toothfuse.geometry import FloatArray, TriMesh, bbox_diagonal, sample_surface
from toothfuse.spatial import SpatialIndex

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 100_000
DEFAULT_D_MAX = 0.3

METHOD_CBCT = "cbct"
METHOD_FUSED = "fused"


@dataclass(frozen=True)
class MetricsConfig:
    samples: int = DEFAULT_SAMPLES
    seed: int = 0
    d_max: float = DEFAULT_D_MAX

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ValueError("metric sample count must be positive")
        if self.d_max <= 0:
            raise ValueError("error map saturation distance must be positive")


@dataclass(frozen=True)
class MetricReport:
    cd_l1_one_sided: float
    hd95_one_sided: float
    scale_ratio: float
    samples: int
    seed: int

    def __post_init__(self) -> None:
        if self.cd_l1_one_sided < 0 or self.hd95_one_sided < 0:
            raise ValueError("distances must be non-negative")
        if self.scale_ratio <= 0:
            raise ValueError("scale ratio must be positive")

    def as_dict(self) -> dict[str, float | int]:
        return {
            "cd_l1_one_sided": self.cd_l1_one_sided,
            "hd95_one_sided": self.hd95_one_sided,
            "scale_ratio": self.scale_ratio,
            "samples": self.samples,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# Distances and reductions
# ---------------------------------------------------------------------------


def _require_surface(m: TriMesh, what: str) -> None:
    if m.n_triangles == 0:
        raise EmptyMesh(f"{what} mesh has no triangles")


def one_sided_distances(reference: TriMesh, recon: TriMesh, n: int, seed: int) -> FloatArray:
    """Exact point-to-surface distance from n area-weighted samples of reference to recon."""
    _require_surface(reference, "reference")
    _require_surface(recon, "reconstructed")
    if n < 1:
        raise ValueError("need at least one sample")
    samples = sample_surface(reference, n, seed)
    return SpatialIndex.from_mesh(recon).closest_points(samples.points).distances


def _nonempty(distances: npt.ArrayLike) -> FloatArray:
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if len(d) == 0:
        raise ValueError("no distances to reduce")
    return d


def chamfer_l1(distances: npt.ArrayLike) -> float:
    return float(np.mean(_nonempty(distances)))


def hd95(distances: npt.ArrayLike) -> float:
    """95th percentile, interpolating linearly at zero-based rank 0.95 * (N - 1)."""
    return float(np.percentile(_nonempty(distances), 95.0, method="linear"))


def scale_ratio(recon: TriMesh, reference: TriMesh) -> float:
    ref = bbox_diagonal(reference)
    if ref == 0.0:
        raise ZeroDiagonal("reference bounding box has zero diagonal")
    return bbox_diagonal(recon) / ref


def evaluate(
    reference: TriMesh, recon: TriMesh, cfg: MetricsConfig | None = None
) -> MetricReport:
    cfg = cfg or MetricsConfig()
    d = one_sided_distances(reference, recon, cfg.samples, cfg.seed)
    report = MetricReport(
        cd_l1_one_sided=chamfer_l1(d),
        hd95_one_sided=hd95(d),
        scale_ratio=scale_ratio(recon, reference),
        samples=cfg.samples,
        seed=cfg.seed,
    )
    log.info(
        "CD(L1) %.4f mm, HD95 %.4f mm, scale ratio %.4f",
        report.cd_l1_one_sided,
        report.hd95_one_sided,
        report.scale_ratio,
    )
    return report


# ---------------------------------------------------------------------------
# Error maps
# ---------------------------------------------------------------------------


def error_colormap(reference: TriMesh, recon: TriMesh, d_max: float = DEFAULT_D_MAX) -> TriMesh:
    """Color each reference vertex white (no error) to red (d_max or more)."""
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    if reference.n_vertices == 0:
        return reference.with_colors(np.zeros((0, 3)))
    _require_surface(recon, "reconstructed")
    d = SpatialIndex.from_mesh(recon).closest_points(reference.vertices).distances
    fade = 1.0 - np.clip(d / d_max, 0.0, 1.0)
    colors = np.stack([np.ones_like(fade), fade, fade], axis=1)
    return reference.with_colors(colors)


# ---------------------------------------------------------------------------
# Region split and cohorts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionReport:
    """One-sided errors from the crown region and from the root region separately."""

    crown_cd_l1: float
    crown_hd95: float
    root_cd_l1: float
    root_hd95: float


def region_report(
    crown: TriMesh, root: TriMesh, recon: TriMesh, n: int, seed: int
) -> RegionReport:
    crown_d = one_sided_distances(crown, recon, n, seed)
    root_d = one_sided_distances(root, recon, n, seed + 1)
    return RegionReport(chamfer_l1(crown_d), hd95(crown_d), chamfer_l1(root_d), hd95(root_d))


@dataclass(frozen=True)
class ToothResult:
    """Both methods evaluated against the clean hybrid reference of one synthetic tooth."""

    seed: int
    cbct: MetricReport
    fused: MetricReport
    cbct_regions: RegionReport
    fused_regions: RegionReport
    rotation_error_deg: float
    translation_error: float
    root_components: int
    min_root_distance: float
    fused_watertight: bool

    @property
    def fused_crown_better(self) -> bool:
        return self.fused_regions.crown_cd_l1 < self.cbct_regions.crown_cd_l1


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 0:
        return float("nan"), float("nan")
    std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return float(np.mean(arr)), std


_METRICS = ("cd_l1_one_sided", "hd95_one_sided", "scale_ratio")


@dataclass(frozen=True)
class CohortSummary:
    teeth: tuple[ToothResult, ...]

    def __len__(self) -> int:
        return len(self.teeth)

    def _reports(self, method: str) -> list[MetricReport]:
        if method == METHOD_CBCT:
            return [t.cbct for t in self.teeth]
        if method == METHOD_FUSED:
            return [t.fused for t in self.teeth]
        raise ValueError(f"unknown method {method!r}")

    def mean_std(self, method: str, metric: str) -> tuple[float, float]:
        """Mean and sample standard deviation of one metric across teeth."""
        if metric not in _METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        return _mean_std([float(getattr(r, metric)) for r in self._reports(method)])

    def crown_mean(self, method: str) -> float:
        if method == METHOD_CBCT:
            return _mean_std([t.cbct_regions.crown_cd_l1 for t in self.teeth])[0]
        if method == METHOD_FUSED:
            return _mean_std([t.fused_regions.crown_cd_l1 for t in self.teeth])[0]
        raise ValueError(f"unknown method {method!r}")

    @property
    def fused_crown_wins(self) -> int:
        return sum(t.fused_crown_better for t in self.teeth)

    def as_dict(self) -> dict[str, object]:
        out: dict[str, object] = {"teeth": len(self.teeth)}
        for method in (METHOD_CBCT, METHOD_FUSED):
            for metric in _METRICS:
                mean, std = self.mean_std(method, metric)
                out[f"{method}.{metric}.mean"] = mean
                out[f"{method}.{metric}.std"] = std
            out[f"{method}.crown_cd_l1.mean"] = self.crown_mean(method)
        out["fused_crown_wins"] = self.fused_crown_wins
        return out
