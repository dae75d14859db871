"""End-to-end orchestration: register, fuse, fit the shape prior, extract, evaluate.

Stages run in order and every toothfuse error raised inside one is re-raised
as :class:`StageError` carrying the stage name.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

from toothfuse.config import PipelineConfig, dump_config
from toothfuse.errors import StageError, ToothFuseError
from toothfuse.extraction import reconstruct
from toothfuse.fusion import FusionStats, naive_fusion
from toothfuse.geometry import (
    FloatArray,
    RigidTransform,
    TriMesh,
    apply_transform,
    connected_components,
    is_watertight,
)
from toothfuse.implicit import LatentFit, TrainedModel, optimize_latent, train_auto_decoder
from toothfuse.meshio import file_digest, mesh_digest, write_ply, write_transform
from toothfuse.metrics import (
    METHOD_CBCT,
    METHOD_FUSED,
    CohortSummary,
    MetricReport,
    ToothResult,
    evaluate,
    region_report,
)
from toothfuse.modelio import save_latent
from toothfuse.registration import (
    RegistrationResult,
    register_multiscale,
    rotation_error_deg,
    translation_error,
)
from toothfuse.sdf import (
    SIGN_PSEUDONORMAL,
    SIGN_RAY_PARITY,
    NormalizationInfo,
    SdfSamples,
    normalize_shape,
    sample_sdf,
)
from toothfuse.spatial import SpatialIndex
from toothfuse.synth import sphere_family, synth_tooth, tooth_family
from toothfuse.workers import map_ordered

log = logging.getLogger(__name__)

STAGE_REGISTRATION = "registration"
STAGE_FUSION = "fusion"
STAGE_SAMPLING = "sampling"
STAGE_TRAINING = "training"
STAGE_FITTING = "fitting"
STAGE_EXTRACTION = "extraction"
STAGE_EVALUATION = "evaluation"

FamilyKind = Literal["tooth", "sphere"]

# Run directory layout
T_FILE = "T.txt"
HYBRID_FILE = "H.ply"
LATENT_FILE = "z_star.bin"
SURFACE_FILE = "S.ply"
REPORT_FILE = "report.txt"
MANIFEST_FILE = "manifest.txt"


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Attribute toothfuse errors and rejected values raised in the block to ``name``."""
    log.debug("Stage %s started", name)
    try:
        yield
    except StageError:
        raise
    except (ToothFuseError, ValueError) as e:
        raise StageError(name, e) from e


@dataclass(frozen=True, eq=False)
class PipelineReport:
    method: str
    normalization: NormalizationInfo
    fit: LatentFit
    metrics_vs_input: MetricReport
    metrics_vs_truth: MetricReport | None = None
    registration: RegistrationResult | None = None
    fusion: FusionStats | None = None
    hybrid: TriMesh | None = None
    root: TriMesh | None = None
    inputs: dict[str, str] = field(default_factory=dict)

    @property
    def z_star(self) -> FloatArray:
        return self.fit.z

    def lines(self) -> list[str]:
        """Line-oriented key=value rendering (the report.txt format)."""
        out = [f"method={self.method}"]
        if self.registration is not None:
            m = self.registration.transform.as_matrix()
            out += [
                f"registration.fitness={self.registration.fitness!r}",
                f"registration.inlier_rmse={self.registration.inlier_rmse!r}",
                f"registration.iterations={self.registration.iterations}",
                "registration.transform=" + " ".join(repr(float(v)) for v in m.ravel()),
            ]
        if self.fusion is not None:
            for name, value in asdict(self.fusion).items():
                out.append(f"fusion.{name}={value}")
        out += [
            f"normalization.center={' '.join(repr(c) for c in self.normalization.center)}",
            f"normalization.scale={self.normalization.scale!r}",
            f"fit.best_loss={self.fit.best_loss!r}",
            f"fit.best_iteration={self.fit.best_iteration}",
            f"fit.iterations={len(self.fit.loss_trace) - 1}",
        ]
        for prefix, report in (("input", self.metrics_vs_input), ("truth", self.metrics_vs_truth)):
            if report is None:
                continue
            for key, value in report.as_dict().items():
                out.append(f"metrics.{prefix}.{key}={value!r}")
        return out


# ---------------------------------------------------------------------------
# Shared tail: sample, fit, extract, evaluate
# ---------------------------------------------------------------------------


def refine_latent(
    target: TriMesh, model: TrainedModel, cfg: PipelineConfig
) -> tuple[NormalizationInfo, LatentFit]:
    """Normalize the target, sample it with pseudonormal signs and fit z* to the samples."""
    with stage(STAGE_SAMPLING):
        normalized, info = normalize_shape(target)
        samples = sample_sdf(
            normalized,
            cfg.fit.n_surface,
            cfg.fit.n_free,
            cfg.sampling.sigma1,
            cfg.sampling.sigma2,
            SIGN_PSEUDONORMAL,
            seed=cfg.fit.seed,
        )
    with stage(STAGE_FITTING):
        fit = optimize_latent(model.network, samples, cfg.fit, model.mean_latent())
    return info, fit


def _fit_and_extract(
    target: TriMesh, model: TrainedModel, cfg: PipelineConfig
) -> tuple[TriMesh, NormalizationInfo, LatentFit]:
    info, fit = refine_latent(target, model, cfg)
    with stage(STAGE_EXTRACTION):
        surface = reconstruct(model.network, fit.z, info, cfg.grid.resolution, cfg.grid.bound)
    return surface, info, fit


def _evaluate(
    reference: TriMesh, surface: TriMesh, ground_truth: TriMesh | None, cfg: PipelineConfig
) -> tuple[MetricReport, MetricReport | None]:
    with stage(STAGE_EVALUATION):
        vs_input = evaluate(reference, surface, cfg.metrics)
        vs_truth = None
        if ground_truth is not None:
            vs_truth = evaluate(ground_truth, surface, cfg.metrics)
    return vs_input, vs_truth


def run_pipeline(
    crown: TriMesh,
    full: TriMesh,
    model: TrainedModel,
    cfg: PipelineConfig | None = None,
    ground_truth: TriMesh | None = None,
    run_dir: str | Path | None = None,
) -> tuple[TriMesh, PipelineReport]:
    """Fused reconstruction S in the crown frame, plus its report."""
    cfg = cfg or PipelineConfig()
    with stage(STAGE_REGISTRATION):
        reg = register_multiscale(full, crown, cfg.icp, cfg.ransac, cfg.registration)
        aligned = apply_transform(reg.transform, full)
    with stage(STAGE_FUSION):
        hybrid, root, stats = naive_fusion(crown, aligned, cfg.fusion)
    surface, info, fit = _fit_and_extract(hybrid, model, cfg)
    vs_input, vs_truth = _evaluate(hybrid, surface, ground_truth, cfg)
    report = PipelineReport(
        method=METHOD_FUSED,
        normalization=info,
        fit=fit,
        metrics_vs_input=vs_input,
        metrics_vs_truth=vs_truth,
        registration=reg,
        fusion=stats,
        hybrid=hybrid,
        root=root,
        inputs={"crown": mesh_digest(crown), "full": mesh_digest(full)},
    )
    if run_dir is not None:
        write_run_dir(run_dir, surface, report, cfg)
    return surface, report


def run_cbct_only(
    full: TriMesh,
    model: TrainedModel,
    cfg: PipelineConfig | None = None,
    ground_truth: TriMesh | None = None,
    run_dir: str | Path | None = None,
) -> tuple[TriMesh, PipelineReport]:
    """Baseline: fit the shape prior to the full mesh directly, no registration or fusion."""
    cfg = cfg or PipelineConfig()
    surface, info, fit = _fit_and_extract(full, model, cfg)
    vs_input, vs_truth = _evaluate(full, surface, ground_truth, cfg)
    report = PipelineReport(
        method=METHOD_CBCT,
        normalization=info,
        fit=fit,
        metrics_vs_input=vs_input,
        metrics_vs_truth=vs_truth,
        inputs={"full": mesh_digest(full)},
    )
    if run_dir is not None:
        write_run_dir(run_dir, surface, report, cfg)
    return surface, report


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------


def write_run_dir(
    run_dir: str | Path, surface: TriMesh, report: PipelineReport, cfg: PipelineConfig
) -> Path:
    """T.txt, H.ply, z_star.bin, S.ply, report.txt and manifest.txt (no timestamps)."""
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if report.registration is not None:
        written.append(write_transform(out / T_FILE, report.registration.transform))
    if report.hybrid is not None:
        written.append(write_ply(out / HYBRID_FILE, report.hybrid))
    written.append(save_latent(out / LATENT_FILE, report.z_star, report.normalization))
    written.append(write_ply(out / SURFACE_FILE, surface))
    report_path = out / REPORT_FILE
    report_path.write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    written.append(report_path)

    manifest = [f"method={report.method}"]
    manifest += [f"input.{name}.sha256={digest}" for name, digest in sorted(report.inputs.items())]
    manifest += [f"output.{p.name}.sha256={file_digest(p)}" for p in written]
    manifest.append(dump_config(cfg).rstrip("\n"))
    (out / MANIFEST_FILE).write_text("\n".join(manifest) + "\n", encoding="utf-8")
    log.info("Wrote run directory %s", out)
    return out


# ---------------------------------------------------------------------------
# Training corpora and cohorts
# ---------------------------------------------------------------------------


def family_samples(
    kind: FamilyKind, count: int, first_seed: int, cfg: PipelineConfig
) -> list[SdfSamples]:
    """SDF samples (ray-parity signs) of every family member.

    Teeth are normalized one by one; spheres stay in the shared unit frame
    so that their radii remain distinguishable.
    """
    if kind == "tooth":
        meshes = [normalize_shape(m)[0] for m in tooth_family(count, first_seed, cfg.synth)]
    elif kind == "sphere":
        meshes = sphere_family(count)
    else:
        raise ValueError(f"unknown family {kind!r}")
    return map_ordered(
        lambda item: sample_sdf(
            item[1],
            cfg.train.n_surface,
            cfg.train.n_free,
            cfg.sampling.sigma1,
            cfg.sampling.sigma2,
            SIGN_RAY_PARITY,
            seed=first_seed + item[0],
        ),
        list(enumerate(meshes)),
    )


def train_family(
    kind: FamilyKind, count: int, first_seed: int, cfg: PipelineConfig | None = None
) -> TrainedModel:
    cfg = cfg or PipelineConfig()
    with stage(STAGE_SAMPLING):
        shapes = family_samples(kind, count, first_seed, cfg)
    log.info("Training on %d %s shape(s)", count, kind)
    with stage(STAGE_TRAINING):
        return train_auto_decoder(shapes, cfg.train)


def _min_root_distance(root: TriMesh, crown: TriMesh) -> float:
    if root.n_vertices == 0:
        return float("nan")
    return float(SpatialIndex.from_mesh(crown).closest_points(root.vertices).distances.min())


def bench_tooth(
    model: TrainedModel, cfg: PipelineConfig, seed: int, out_dir: str | Path | None = None
) -> ToothResult:
    """Both methods on one held-out synthetic tooth, scored against its clean hybrid."""
    spec = cfg.synth.varied(seed)
    tooth = synth_tooth(spec)
    with stage(STAGE_FUSION):
        clean_hybrid, clean_root, _ = naive_fusion(tooth.crown, tooth.ground_truth, cfg.fusion)

    tooth_dir = Path(out_dir) / f"tooth_{seed}" if out_dir is not None else None
    fused_s, fused = run_pipeline(
        tooth.crown,
        tooth.degraded_full,
        model,
        cfg,
        ground_truth=tooth.ground_truth,
        run_dir=tooth_dir / METHOD_FUSED if tooth_dir else None,
    )
    cbct_s, cbct = run_cbct_only(
        tooth.degraded_full,
        model,
        cfg,
        run_dir=tooth_dir / METHOD_CBCT if tooth_dir else None,
    )
    # the baseline lives in the full mesh's frame; the known motion brings it to the crown frame
    cbct_s = apply_transform(tooth.true_transform, cbct_s)

    rot_err, trans_err = _registration_error(fused.registration, tooth.true_transform)
    with stage(STAGE_EVALUATION):
        m = cfg.metrics
        fused_regions = region_report(tooth.crown, clean_root, fused_s, m.samples, m.seed)
        cbct_regions = region_report(tooth.crown, clean_root, cbct_s, m.samples, m.seed)
        root = fused.root if fused.root is not None else TriMesh.empty()
        result = ToothResult(
            seed=seed,
            cbct=evaluate(clean_hybrid, cbct_s, m),
            fused=evaluate(clean_hybrid, fused_s, m),
            cbct_regions=cbct_regions,
            fused_regions=fused_regions,
            rotation_error_deg=rot_err,
            translation_error=trans_err,
            root_components=len(connected_components(root)),
            min_root_distance=_min_root_distance(root, tooth.crown),
            fused_watertight=is_watertight(fused_s),
        )
    log.info(
        "Tooth %d: crown CD(L1) fused %.4f vs cbct %.4f mm",
        seed,
        fused_regions.crown_cd_l1,
        cbct_regions.crown_cd_l1,
    )
    return result


def _registration_error(
    reg: RegistrationResult | None, truth: RigidTransform
) -> tuple[float, float]:
    if reg is None:
        return float("nan"), float("nan")
    return rotation_error_deg(reg.transform, truth), translation_error(reg.transform, truth)


def run_bench(
    model: TrainedModel,
    cfg: PipelineConfig | None = None,
    teeth: int = 10,
    first_seed: int = 1000,
    out_dir: str | Path | None = None,
) -> CohortSummary:
    """Fused vs full-mesh-only reconstruction over held-out synthetic teeth."""
    cfg = cfg or PipelineConfig()
    if teeth < 1:
        raise ValueError("bench needs at least one tooth")
    seeds = list(range(first_seed, first_seed + teeth))
    results = map_ordered(lambda s: bench_tooth(model, cfg, s, out_dir), seeds)
    summary = CohortSummary(tuple(results))
    log.info("Fused crown error lower on %d/%d teeth", summary.fused_crown_wins, len(summary))
    return summary
