"""Output formatters: Rich tables, key=value text and JSON."""

from __future__ import annotations

import json
import math
from typing import Any

from rich.console import Console
from rich.table import Table
from rich.text import Text

from toothfuse.metrics import METHOD_CBCT, METHOD_FUSED, CohortSummary, MetricReport
from toothfuse.registration import RegistrationResult

console = Console()

_METHOD_LABEL: dict[str, str] = {
    METHOD_CBCT: "CBCT-SDF",
    METHOD_FUSED: "Fused-SDF",
}


def _mm(value: float) -> str:
    return "--" if math.isnan(value) else f"{value:.4f}"


def _ratio_text(ratio: float) -> Text:
    """Scale ratio colored by its distance from unity."""
    text = f"{ratio:.3f}"
    off = abs(ratio - 1.0)
    if off > 0.05:
        return Text(text, style="red bold")
    if off > 0.02:
        return Text(text, style="yellow")
    return Text(text, style="green")


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------


def key_value_lines(values: dict[str, Any]) -> list[str]:
    out = []
    for key, value in values.items():
        rendered = repr(value) if isinstance(value, float) else str(value)
        out.append(f"{key}={rendered}")
    return out


def registration_dict(result: RegistrationResult) -> dict[str, Any]:
    return {
        "fitness": result.fitness,
        "inlier_rmse": result.inlier_rmse,
        "iterations": result.iterations,
        "rotation_deg": result.transform.rotation_angle_deg,
        "translation": [float(v) for v in result.transform.translation],
    }


def print_key_values(values: dict[str, Any]) -> None:
    print("\n".join(key_value_lines(values)))


def print_json(values: dict[str, Any] | list[Any]) -> None:
    """Print JSON output for machine consumption."""
    print(json.dumps(values, indent=2))


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def _metric_table(reports: dict[str, MetricReport], title: str) -> Table:
    table = Table(title=title, show_lines=False, pad_edge=False)
    table.add_column("REFERENCE", style="cyan", no_wrap=True)
    table.add_column("CD(L1) mm", no_wrap=True, justify="right")
    table.add_column("HD95 mm", no_wrap=True, justify="right")
    table.add_column("SCALE", no_wrap=True, justify="right")
    table.add_column("SAMPLES", style="dim", no_wrap=True, justify="right")
    for name, r in reports.items():
        table.add_row(
            name,
            _mm(r.cd_l1_one_sided),
            _mm(r.hd95_one_sided),
            _ratio_text(r.scale_ratio),
            str(r.samples),
        )
    return table


def print_metrics(
    reports: dict[str, MetricReport], title: str = "One-sided surface error"
) -> None:
    console.print()
    console.print(_metric_table(reports, title))


def _cohort_table(summary: CohortSummary) -> Table:
    table = Table(title="Synthetic cohort", show_lines=False, pad_edge=False)
    table.add_column("METHOD", style="cyan", no_wrap=True)
    table.add_column("CD(L1) mm", no_wrap=True)
    table.add_column("HD95 mm", no_wrap=True)
    table.add_column("SCALE", no_wrap=True)
    table.add_column("CROWN CD(L1) mm", no_wrap=True)
    for method in (METHOD_CBCT, METHOD_FUSED):
        cells = []
        for metric in ("cd_l1_one_sided", "hd95_one_sided", "scale_ratio"):
            mean, std = summary.mean_std(method, metric)
            cells.append(f"{mean:.3f} ± {std:.3f}")
        table.add_row(_METHOD_LABEL[method], *cells, _mm(summary.crown_mean(method)))
    return table


def _teeth_table(summary: CohortSummary) -> Table:
    table = Table(title="Per tooth", show_lines=False, pad_edge=False)
    table.add_column("SEED", style="cyan", no_wrap=True)
    table.add_column("CROWN CBCT", no_wrap=True, justify="right")
    table.add_column("CROWN FUSED", no_wrap=True, justify="right")
    table.add_column("ROT°", no_wrap=True, justify="right")
    table.add_column("TRANS mm", no_wrap=True, justify="right")
    table.add_column("ROOT GAP mm", no_wrap=True, justify="right")
    table.add_column("CLOSED", no_wrap=True)
    for t in summary.teeth:
        better = Text("yes", style="green") if t.fused_crown_better else Text("no", style="red")
        table.add_row(
            str(t.seed),
            _mm(t.cbct_regions.crown_cd_l1),
            Text.assemble(_mm(t.fused_regions.crown_cd_l1), " ", better),
            f"{t.rotation_error_deg:.3f}",
            _mm(t.translation_error),
            _mm(t.min_root_distance),
            "yes" if t.fused_watertight else "no",
        )
    return table


def print_cohort(summary: CohortSummary) -> None:
    """Print the cohort summary and per-tooth breakdown to the console."""
    console.print()
    console.print(
        f"[bold]Teeth:[/] {len(summary)}  "
        f"[green]Fused crown better:[/] {summary.fused_crown_wins}  "
        f"[red]Worse or equal:[/] {len(summary) - summary.fused_crown_wins}"
    )
    console.print()
    console.print(_cohort_table(summary))
    console.print(_teeth_table(summary))
