#!/usr/bin/env python3
"""
LinkSmith Command Line
======================

Usage:
    python cli.py build manifest.json --out out/ --seed 0
    python cli.py eval out/linksmith.urdf manifest.json
    python cli.py gen door --seed 3 --out fixtures/door
    python cli.py inspect out/tree.json

Exit codes: 0 success, 2 invalid input, 3 stage failure.

Author: LinkSmith Development Team
Date: 2024
"""

import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import typer
from dotenv import load_dotenv
from loguru import logger
from rich.console import Console
from rich.table import Table

from kinematic_metrics import MetricsReport
from pipeline import ArtifactParseError, StageError, evaluate_artifacts, inspect_artifact, run_pipeline
from pipeline_config import ConfigError, apply_overrides, load_config, with_seed
from synthetic_assembly import TEMPLATES, generate_synthetic, write_synthetic

EXIT_INVALID_INPUT = 2
EXIT_STAGE_FAILURE = 3

app = typer.Typer(add_completion=False, help="Kinematic trees, joints and URDF from segmented part meshes.")
console = Console()


def setup_logging(level: Optional[str] = None):
    """--log-level, else LINKSMITH_LOG_LEVEL (.env honoured), else INFO."""
    load_dotenv()
    level = (level or os.getenv("LINKSMITH_LOG_LEVEL") or "INFO").upper()
    logger.remove()
    logger.add(sys.stderr, level=level)


def _fail(message: str, code: int):
    console.print(f"[bold red]Error:[/bold red] {message}")
    raise typer.Exit(code)


def parse_weights(text: str) -> List[float]:
    try:
        weights = [float(w) for w in text.split(",")]
    except ValueError:
        raise ConfigError(f"reward weights must be numbers: {text!r}")
    if len(weights) != 5:
        raise ConfigError(f"expected 5 reward weights, got {len(weights)}")
    return weights


def _metrics_table(report: MetricsReport) -> Table:
    table = Table(title=f"Metrics: {report.name}")
    for column in ("Edge", "GT type", "Pred type", "Angle (deg)", "Pivot", "Line"):
        table.add_column(column)

    def fmt(value):
        return "-" if value is None else f"{value:.4g}"

    for j in report.joints:
        table.add_row(f"{j.parent}->{j.child}", j.gt_type or "-", j.pred_type or "-",
                      fmt(j.axis_angle_error), fmt(j.axis_position_error), fmt(j.axis_line_error))
    table.caption = (f"TED {report.tree_edit_distance} | "
                     f"mean angle {fmt(report.aggregates.get('mean_axis_angle_error'))} | "
                     f"mean pivot {fmt(report.aggregates.get('mean_axis_position_error'))}")
    return table


# --- COMMANDS ---

@app.command()
def build(
    manifest: Path = typer.Argument(..., help="Assembly manifest (JSON)"),
    config_path: Optional[Path] = typer.Option(None, "--config", help="JSON config file"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for every randomized component"),
    topology: Optional[str] = typer.Option(None, "--topology", help="mcts | bfs | exhaustive"),
    no_anchor: bool = typer.Option(False, "--no-anchor", help="Disable the pivot anchor term"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker thread cap"),
    mcts_iters: Optional[int] = typer.Option(None, "--mcts-iters", help="MCTS iteration budget"),
    reward_weights: Optional[str] = typer.Option(None, "--reward-weights", help="w_struct,w_static,w_contact,w_sym,w_hier"),
    mesh_mode: Optional[str] = typer.Option(None, "--mesh-mode", help="copy | reference"),
    robot_name: Optional[str] = typer.Option(None, "--robot-name"),
    progress: bool = typer.Option(False, "--progress", help="Show MCTS progress bar"),
    log_level: Optional[str] = typer.Option(None, "--log-level"),
):
    """Run the full pipeline on an assembly manifest."""
    setup_logging(log_level)
    try:
        config = load_config(config_path)
        if seed is not None:
            config = with_seed(config, seed)
        overrides: Dict[str, Any] = {
            "topology": topology,
            "threads": threads,
            "mesh_mode": mesh_mode,
            "robot_name": robot_name,
            "output_dir": str(out) if out is not None else None,
        }
        if no_anchor:
            overrides["anchor"] = False
        search: Dict[str, Any] = {}
        if mcts_iters is not None:
            search["max_iterations"] = mcts_iters
        if progress:
            search["progress"] = True
        if search:
            overrides["search"] = search
        config = apply_overrides(config, overrides)
        if reward_weights is not None:
            config = config.model_copy(update={"reward": config.reward.with_weights(parse_weights(reward_weights))})
    except (ConfigError, ValueError) as e:
        _fail(str(e), EXIT_INVALID_INPUT)

    try:
        result = run_pipeline(manifest, config)
    except StageError as e:
        _fail(str(e), e.exit_code)

    table = Table(title=f"LinkSmith: {config.robot_name}")
    table.add_column("Joint")
    table.add_column("Type")
    table.add_column("Score")
    for (u, v), spec in sorted(result.joints.items()):
        table.add_row(f"{u}->{v}", spec.joint_type.value, f"{spec.score:.4f}")
    table.caption = "reward " + ", ".join(f"{k}={v:.4g}" for k, v in result.reward_breakdown.items())
    console.print(table)
    if result.metrics is not None:
        console.print(_metrics_table(result.metrics))
    console.print(f"[green]URDF written to {result.urdf_path}[/green]")


@app.command("eval")
def evaluate_command(
    prediction: Path = typer.Argument(..., help="Predicted URDF or tree dump"),
    ground_truth: Path = typer.Argument(..., help="Manifest with ground truth, or a URDF"),
    joints: Optional[Path] = typer.Option(None, "--joints", help="Joint dump for a tree-dump prediction"),
    diagonal: Optional[float] = typer.Option(None, "--diagonal", help="Assembly diagonal for URDF ground truth"),
    out: Optional[Path] = typer.Option(None, "--out", help="Directory for metrics.json / metrics.csv"),
    log_level: Optional[str] = typer.Option(None, "--log-level"),
):
    """Compare a saved prediction with ground truth."""
    setup_logging(log_level)
    try:
        report = evaluate_artifacts(prediction, ground_truth, joints, diagonal)
    except (ArtifactParseError, ValueError, OSError) as e:
        _fail(str(e), EXIT_INVALID_INPUT)
    console.print(_metrics_table(report))
    if out is not None:
        report.write_json(out / "metrics.json")
        report.write_csv(out / "metrics.csv")
        console.print(f"[green]Metrics written to {out}[/green]")


@app.command()
def gen(
    template: str = typer.Argument(..., help=f"One of: {', '.join(TEMPLATES)}"),
    seed: List[int] = typer.Option([0], "--seed", help="Seed (repeat for several fixtures)"),
    n_parts: Optional[int] = typer.Option(None, "--parts", help="Part count for chain/star/symmetric-legs"),
    out: Path = typer.Option(Path("fixtures"), "--out", help="Output directory"),
    log_level: Optional[str] = typer.Option(None, "--log-level"),
):
    """Write synthetic fixtures with ground truth."""
    setup_logging(log_level)
    for s in seed:
        try:
            assembly = generate_synthetic(template, s, n_parts)
        except ValueError as e:
            _fail(str(e), EXIT_INVALID_INPUT)
        target = out if len(seed) == 1 else out / f"{template}_{s}"
        path = write_synthetic(assembly, target)
        console.print(f"[green]{template} (seed {s}): {len(assembly.meshes)} parts -> {path}[/green]")


@app.command()
def inspect(
    artifact: Path = typer.Argument(..., help="Tree dump, joint dump, graph dump, metrics report or URDF"),
    log_level: Optional[str] = typer.Option(None, "--log-level"),
):
    """Print a summary of a pipeline artifact."""
    setup_logging(log_level)
    try:
        summary = inspect_artifact(artifact)
    except ArtifactParseError as e:
        _fail(str(e), EXIT_INVALID_INPUT)

    kind = summary.pop("kind")
    if kind == "tree":
        table = Table(title=f"Kinematic tree (root {summary['root']})")
        for column in ("Parent", "Child", "Type", "Virtual"):
            table.add_column(column)
        for e in summary["edges"]:
            table.add_row(str(e["parent"]), str(e["child"]), e["joint_type"], "yes" if e["virtual"] else "")
        if summary["reward_breakdown"]:
            table.caption = ", ".join(f"{k}={v:.4g}" for k, v in summary["reward_breakdown"].items())
    elif kind == "joints":
        table = Table(title="Joints")
        for column in ("Edge", "Type", "Score", "Axis"):
            table.add_column(column)
        for j in summary["joints"]:
            axis = "-" if j["axis"] is None else " ".join(f"{a:.4f}" for a in j["axis"])
            table.add_row(f"{j['parent']}->{j['child']}", j["type"], f"{j['score']:.4f}", axis)
    elif kind == "graph":
        table = Table(title=f"Connection graph (epsilon {summary['epsilon']:.4g})")
        table.add_column("Edge")
        for u, v in summary["edges"]:
            table.add_row(f"{u}-{v}")
        table.caption = f"{len(summary['nodes'])} parts, {len(summary['components'])} component(s)"
    elif kind == "metrics":
        console.print(_metrics_table(MetricsReport.from_dict(summary)))
        return
    else:
        table = Table(title=f"URDF robot '{summary['robot']}'")
        table.add_column("Field")
        table.add_column("Value")
        table.add_row("links", str(summary["links"]))
        table.add_row("joints", str(summary["joints"]))
        table.add_row("root", f"link_{summary['root']}")
        for joint_type, count in sorted(summary["joint_types"].items()):
            table.add_row(joint_type, str(count))
    console.print(table)


if __name__ == "__main__":
    app()
