"""CLI entry point for crown / full-tooth fusion."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable
from dataclasses import asdict, replace
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

from toothfuse.config import PipelineConfig, load_config
from toothfuse.errors import StageError
from toothfuse.extraction import reconstruct
from toothfuse.formatters import (
    print_cohort,
    print_json,
    print_key_values,
    print_metrics,
    registration_dict,
)
from toothfuse.fusion import naive_fusion
from toothfuse.geometry import RigidTransform, apply_transform
from toothfuse.meshio import read_mesh, read_transform, write_mesh, write_ply, write_transform
from toothfuse.metrics import error_colormap, evaluate
from toothfuse.modelio import load_latent, load_model, save_latent, save_model
from toothfuse.pipeline import (
    STAGE_EVALUATION,
    STAGE_EXTRACTION,
    STAGE_FUSION,
    STAGE_REGISTRATION,
    refine_latent,
    run_bench,
    run_cbct_only,
    run_pipeline,
    stage,
    train_family,
)
from toothfuse.registration import register_multiscale
from toothfuse.sdf import NormalizationInfo
from toothfuse.synth import synth_tooth

console = Console(stderr=True)


def _common() -> argparse.ArgumentParser:
    """Flags shared by every subcommand."""
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, help="Override every component seed")
    p.add_argument("--config", metavar="PATH", help="key=value configuration file")
    p.add_argument(
        "--out-dir",
        metavar="DIR",
        default=".",
        type=Path,
        help="Directory for output files (default: current directory)",
    )
    verbosity = p.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")
    return p


def _build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(
        prog="toothfuse",
        description="Fuse an intraoral crown scan with a CBCT tooth mesh via a learned SDF prior",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="Generate a synthetic tooth")
    s.add_argument("--vary", action="store_true", help="Jitter the tooth shape from the seed")

    s = sub.add_parser("register", parents=[common], help="Align a full mesh onto a crown")
    s.add_argument("moving", type=Path, help="Full tooth mesh (R)")
    s.add_argument("fixed", type=Path, help="Crown mesh (C)")
    s.add_argument("--format", choices=["text", "json"], default="text", dest="output_format")

    s = sub.add_parser("fuse", parents=[common], help="Build the hybrid proxy H")
    s.add_argument("crown", type=Path)
    s.add_argument("full", type=Path)
    s.add_argument("--transform", metavar="T.txt", type=Path, help="Apply this transform to full")
    s.add_argument("--tau", type=float, help="Root distance threshold in mm (default: fusion.tau)")

    s = sub.add_parser("train-sdf", parents=[common], help="Train the shape prior")
    s.add_argument("--family", choices=["tooth", "sphere"], default="tooth")
    s.add_argument("--count", type=int, default=20, help="Training shapes (default: 20)")
    s.add_argument("--first-seed", type=int, default=0, help="First family seed (default: 0)")
    s.add_argument("--model", type=Path, help="Model file (default: OUT_DIR/model.ifsd)")

    s = sub.add_parser("refine", parents=[common], help="Fit z* to a mesh")
    s.add_argument("model", type=Path)
    s.add_argument("mesh", type=Path)

    s = sub.add_parser("extract", parents=[common], help="Marching cubes of the decoder field")
    s.add_argument("model", type=Path)
    source = s.add_mutually_exclusive_group(required=True)
    source.add_argument("--latent", type=Path, help="z_star.bin from refine")
    source.add_argument("--index", type=int, help="Training latent index")
    s.add_argument("--resolution", type=int, help="Grid samples per axis")
    s.add_argument("--output", type=Path, help="Mesh file (default: OUT_DIR/S.ply)")

    s = sub.add_parser("evaluate", parents=[common], help="One-sided metrics")
    s.add_argument("reference", type=Path)
    s.add_argument("recon", type=Path)
    s.add_argument("--json", metavar="PATH", type=Path, help="Also write the report as JSON")
    s.add_argument("--format", choices=["text", "table"], default="text", dest="output_format")

    s = sub.add_parser("errormap", parents=[common], help="White-to-red error colored PLY")
    s.add_argument("reference", type=Path)
    s.add_argument("recon", type=Path)
    s.add_argument("--d-max", type=float, help="Saturation distance in mm")
    s.add_argument("--output", type=Path, help="PLY file (default: OUT_DIR/errormap.ply)")

    s = sub.add_parser("pipeline", parents=[common], help="Run every stage in one go")
    s.add_argument("crown", type=Path)
    s.add_argument("full", type=Path)
    s.add_argument("model", type=Path)
    s.add_argument("--ground-truth", type=Path, help="Also report metrics against this mesh")
    s.add_argument("--cbct-only", action="store_true", help="Skip registration and fusion")

    s = sub.add_parser("bench", parents=[common], help="Fused vs CBCT-only over synthetic teeth")
    s.add_argument("model", type=Path)
    s.add_argument("--teeth", type=int, default=10, help="Held-out teeth (default: 10)")
    s.add_argument("--first-seed", type=int, default=1000, help="First tooth seed (default: 1000)")
    s.add_argument("--format", choices=["table", "json"], default="table", dest="output_format")

    return p


def _setup_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    return cfg if args.seed is None else cfg.with_seed(args.seed)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    spec = cfg.synth.varied(cfg.synth.seed) if args.vary else cfg.synth
    with console.status("[bold cyan]Generating synthetic tooth..."):
        tooth = synth_tooth(spec)
    out: Path = args.out_dir
    write_ply(out / "ground_truth.ply", tooth.ground_truth)
    write_ply(out / "crown.ply", tooth.crown)
    write_ply(out / "full.ply", tooth.degraded_full)
    write_transform(out / "T_true.txt", tooth.true_transform)
    console.print(f"[dim]Wrote synthetic tooth {spec.seed} to {out}[/]")


def _cmd_register(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    moving, fixed = read_mesh(args.moving), read_mesh(args.fixed)
    with console.status("[bold cyan]Registering (RANSAC + ICP)..."), stage(STAGE_REGISTRATION):
        result = register_multiscale(moving, fixed, cfg.icp, cfg.ransac, cfg.registration)
    write_transform(args.out_dir / "T.txt", result.transform)
    if args.output_format == "json":
        print_json(registration_dict(result))
    else:
        print_key_values(registration_dict(result))


def _cmd_fuse(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    crown, full = read_mesh(args.crown), read_mesh(args.full)
    transform = read_transform(args.transform) if args.transform else RigidTransform.identity()
    with console.status("[bold cyan]Building hybrid proxy..."), stage(STAGE_FUSION):
        params = cfg.fusion if args.tau is None else replace(cfg.fusion, tau=args.tau)
        hybrid, root, stats = naive_fusion(crown, apply_transform(transform, full), params)
    write_ply(args.out_dir / "H.ply", hybrid)
    write_ply(args.out_dir / "root.ply", root)
    print_key_values(asdict(stats))


def _cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    with console.status(f"[bold cyan]Training on {args.count} {args.family} shapes..."):
        model = train_family(args.family, args.count, args.first_seed, cfg)
    path = save_model(args.model or args.out_dir / "model.ifsd", model)
    final = model.loss_trace[-1] if model.loss_trace else float("nan")
    print_key_values({"model": str(path), "final_loss": final})


def _cmd_refine(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    model = load_model(args.model)
    mesh = read_mesh(args.mesh)
    with console.status("[bold cyan]Fitting latent code..."):
        info, fit = refine_latent(mesh, model, cfg)
    path = save_latent(args.out_dir / "z_star.bin", fit.z, info)
    print_key_values(
        {"latent": str(path), "best_loss": fit.best_loss, "best_iteration": fit.best_iteration}
    )


def _cmd_extract(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    model = load_model(args.model)
    if args.latent is not None:
        z, info = load_latent(args.latent)
    else:
        z, info = model.latent(args.index), NormalizationInfo.identity()
    res = args.resolution or cfg.grid.resolution
    with console.status(f"[bold cyan]Extracting {res}^3 grid..."), stage(STAGE_EXTRACTION):
        surface = reconstruct(model.network, z, info, res, cfg.grid.bound)
    path = write_mesh(args.output or args.out_dir / "S.ply", surface)
    print_key_values(
        {"mesh": str(path), "vertices": surface.n_vertices, "triangles": surface.n_triangles}
    )


def _cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    reference, recon = read_mesh(args.reference), read_mesh(args.recon)
    with console.status("[bold cyan]Measuring distances..."), stage(STAGE_EVALUATION):
        report = evaluate(reference, recon, cfg.metrics)
    if args.json is not None:
        args.json.write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")
    if args.output_format == "table":
        print_metrics({args.reference.name: report})
    else:
        print_key_values(report.as_dict())


def _cmd_errormap(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    reference, recon = read_mesh(args.reference), read_mesh(args.recon)
    d_max = args.d_max if args.d_max is not None else cfg.metrics.d_max
    with stage(STAGE_EVALUATION):
        colored = error_colormap(reference, recon, d_max)
    path = write_ply(args.output or args.out_dir / "errormap.ply", colored)
    console.print(f"[dim]Wrote error map to {path}[/]")


def _cmd_pipeline(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    model = load_model(args.model)
    full = read_mesh(args.full)
    truth = read_mesh(args.ground_truth) if args.ground_truth else None
    with console.status("[bold cyan]Running pipeline..."):
        if args.cbct_only:
            _, report = run_cbct_only(full, model, cfg, truth, run_dir=args.out_dir)
        else:
            crown = read_mesh(args.crown)
            _, report = run_pipeline(crown, full, model, cfg, truth, run_dir=args.out_dir)
    reports = {"input": report.metrics_vs_input}
    if report.metrics_vs_truth is not None:
        reports["ground truth"] = report.metrics_vs_truth
    print_metrics(reports, title=f"{report.method} reconstruction")


def _cmd_bench(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    model = load_model(args.model)
    with console.status(f"[bold cyan]Benchmarking {args.teeth} synthetic teeth..."):
        summary = run_bench(model, cfg, args.teeth, args.first_seed, out_dir=args.out_dir)
    if args.output_format == "json":
        print_json(summary.as_dict())
    else:
        print_cohort(summary)


_COMMANDS: dict[str, Callable[[argparse.Namespace, PipelineConfig], None]] = {
    "synth": _cmd_synth,
    "register": _cmd_register,
    "fuse": _cmd_fuse,
    "train-sdf": _cmd_train,
    "refine": _cmd_refine,
    "extract": _cmd_extract,
    "evaluate": _cmd_evaluate,
    "errormap": _cmd_errormap,
    "pipeline": _cmd_pipeline,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> None:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)

    try:
        cfg = _config(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](args, cfg)
    except StageError as e:
        cause = f"{type(e.cause).__name__}: {e.cause}"
        console.print(f"[red bold]Error in {e.stage} stage:[/] {cause}")
        sys.exit(1)
    except Exception as e:
        console.print(f"[red bold]Error:[/] {e}")
        sys.exit(1)
