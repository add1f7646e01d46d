"""
LinkSmith Pipeline
==================

Runs the full assembly-to-URDF pipeline and the artifact utilities behind the
command line.

Stages (in order, each failure tagged with its stage):
- Ingest: manifest, meshes, part validation, symmetry clusters
- Sdf: per-part signed distance fields (+ validation against sampling tiers)
- Contact: connection graph
- Topology: base selection, BFS / MCTS / exhaustive kinematic tree
- Joints: joint types and parameters per tree edge
- Export: URDF (+ meshes)
- Eval: metrics against the manifest ground truth, when present

Artifacts: ingest.json, graph.json, tree.json, joints.json, <robot>.urdf,
metrics.json and metrics.csv.

Author: LinkSmith Development Team
Date: 2024
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from loguru import logger

from contact_graph import ConnectionGraph, attach_components, build_connection_graph
from joint_estimator import FixedTablePrior, JointTypePrior, estimate_joints
from kinematic_metrics import MetricsReport, evaluate
from kinematic_tree import JointSpec, KinematicTree, joints_from_dict, joints_to_dict
from part_assembly import (
    AssemblyManifest, ManifestError, assembly_diagonal, cluster_symmetric_parts, ground_truth_tree,
    load_assembly, load_manifest, load_mesh,
)
from pipeline_config import PipelineConfig
from sdf_field import build_all_sdfs, sample_tiers, validate_sdf
from topology_search import bfs_orient, exhaustive_search, mcts_search, reward_breakdown, select_base
from urdf_export import read_urdf, urdf_summary, write_urdf

Edge = Tuple[int, int]
STAGES = ("Ingest", "Sdf", "Contact", "Topology", "Joints", "Export", "Eval")


class StageError(RuntimeError):
    """A pipeline stage failed; `cause` holds the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return 2 if self.stage == "Ingest" else 3


class ArtifactParseError(ValueError):
    """An artifact file is unreadable or of an unknown kind."""


@dataclass
class PipelineResult:
    output_dir: Path
    tree: KinematicTree
    joints: Dict[Edge, JointSpec]
    reward_breakdown: Dict[str, float]
    urdf_path: Path
    tree_path: Path
    joints_path: Path
    graph_path: Path
    ingest_path: Path
    metrics: Optional[MetricsReport] = None
    metrics_path: Optional[Path] = None


def _save_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    return path


def _load_json(path: Union[str, Path]) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactParseError(f"cannot read {path}: {e}") from e


def load_type_prior(path: Union[str, Path]) -> FixedTablePrior:
    """Prior table: {"joints": [{"parent": u, "child": v, "probabilities": {...}}]}."""
    data = _load_json(path)
    try:
        table = {(int(e["parent"]), int(e["child"])): e["probabilities"] for e in data["joints"]}
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactParseError(f"invalid type prior file {path}: {e}") from e
    return FixedTablePrior(table)


class _Stage:
    """Context manager tagging any failure with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        logger.info(f"[{self.name}] starting")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            logger.info(f"[{self.name}] done")
            return False
        if isinstance(exc, StageError) or not isinstance(exc, Exception):
            return False
        raise StageError(self.name, exc) from exc


def run_pipeline(manifest_path: Union[str, Path], config: Optional[PipelineConfig] = None,
                 prior: Optional[JointTypePrior] = None) -> PipelineResult:
    """
    Execute every stage and write the stage artifacts into config.output_dir.

    Raises:
        StageError: tagged with the failing stage
    """
    config = config or PipelineConfig()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    with _Stage("Ingest"):
        manifest = load_manifest(manifest_path)
        settings = config.ingest
        parts, report = load_assembly(manifest, settings.min_vertices, settings.min_spread,
                                      settings.strict, settings.voxel_resolution)
        diagonal = assembly_diagonal(parts)
        clusters = cluster_symmetric_parts(parts, config.symmetry.threshold_for(diagonal),
                                           config.symmetry.samples, config.symmetry.seed)
        ingest_path = _save_json(out / "ingest.json", {
            **report.to_dict(), "diagonal": diagonal, "symmetry": clusters.to_dict(),
            "parts": [{"id": p.id, "name": p.name, "centroid": [float(x) for x in p.centroid],
                       "volume": p.robust_volume} for p in parts],
        })
        if prior is None and config.type_prior:
            prior = load_type_prior(config.type_prior)

    with _Stage("Sdf"):
        sdfs = build_all_sdfs(parts, config.sdf.resolution, config.sdf.padding_fraction,
                              config.threads, config.sdf.cache_dir)
        n_check = config.sdf.validate_samples
        if n_check > 0:
            for part, sdf in zip(parts, sdfs):
                check = validate_sdf(sdf, sample_tiers(part, (n_check, n_check, n_check), seed=part.id), part)
                if not check.ok:
                    logger.warning(f"SDF of part {part.id} failed validation: {check.to_dict()}")

    with _Stage("Contact"):
        graph = build_connection_graph(parts, sdfs, config.contact, diagonal, config.threads)
        graph_path = graph.dump_json(out / "graph.json")

    with _Stage("Topology"):
        base = select_base(graph)
        d_max = config.contact.d_max_for(diagonal)
        bfs_tree, broken = bfs_orient(graph, base, d_max)
        if broken:
            logger.debug(f"BFS left cycle edges out of the tree: {broken}")
        full = attach_components(graph, base, d_max)
        if config.topology == "bfs":
            tree = bfs_tree
        elif config.topology == "exhaustive":
            tree = exhaustive_search(full, base, clusters, config.reward)
        else:
            tree = mcts_search(full, base, clusters, config.reward, config.search, warm_start=bfs_tree)
        breakdown = reward_breakdown(tree, full, full, clusters, config.reward)
        tree_path = tree.dump_json(out / "tree.json", breakdown)
        logger.info(f"Tree ({config.topology}) rooted at {base}: {tree.edge_keys()}, reward {breakdown['total']:.6g}")

    with _Stage("Joints"):
        dwcavl = config.dwcavl.model_copy(update={"anchor": config.anchor and config.dwcavl.anchor})
        params = dwcavl.resolve(diagonal, graph.epsilon)
        joints, diagnostics = estimate_joints(tree, parts, sdfs, params, clusters, prior, config.threads)
        tree = tree.with_joints(joints)
        tree_path = tree.dump_json(out / "tree.json", breakdown)
        joints_path = _save_json(out / "joints.json", {"joints": joints_to_dict(joints),
                                                       "diagnostics": diagnostics})

    with _Stage("Export"):
        urdf_path = write_urdf(tree, joints, parts, out, config.robot_name, config.mesh_mode,
                               density=config.reward.density, units_scale=manifest.units_scale)

    metrics = metrics_path = None
    if manifest.ground_truth is not None:
        with _Stage("Eval"):
            index_map = dict(report.accepted)
            gt = manifest.ground_truth
            missing = {e.child for e in gt.edges} | {e.parent for e in gt.edges} | {gt.root}
            missing -= set(index_map)
            if missing:
                raise ManifestError(f"ground truth references rejected parts {sorted(missing)}")
            gt_tree = ground_truth_tree(manifest, {p.id: p.centroid for p in parts}, index_map)
            metrics = evaluate(tree, joints, gt_tree, gt_tree.joint_specs(), diagonal,
                               name=Path(manifest_path).parent.name or "assembly")
            metrics_path = metrics.write_json(out / "metrics.json")
            metrics.write_csv(out / "metrics.csv")

    return PipelineResult(out, tree, joints, breakdown, urdf_path, tree_path, joints_path, graph_path,
                          ingest_path, metrics, metrics_path)


# --- ARTIFACT TOOLS ---

def load_prediction(path: Union[str, Path],
                    joints_path: Optional[Union[str, Path]] = None) -> Tuple[KinematicTree, Dict[Edge, JointSpec]]:
    """A URDF, or a tree dump with its joint dump (defaults to joints.json next to it)."""
    path = Path(path)
    if path.suffix.lower() in (".urdf", ".xml"):
        return read_urdf(path)
    data = _load_json(path)
    try:
        tree = KinematicTree.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactParseError(f"{path} is not a tree dump: {e}") from e
    joints_path = Path(joints_path) if joints_path else path.with_name("joints.json")
    joints_data = _load_json(joints_path)
    try:
        joints = joints_from_dict(joints_data["joints"])
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactParseError(f"{joints_path} is not a joint dump: {e}") from e
    return tree.with_joints(joints), joints


def _manifest_diagonal(manifest: AssemblyManifest) -> float:
    bounds = np.array([load_mesh(p).bounds for p in manifest.mesh_paths()]) * manifest.units_scale
    return float(np.linalg.norm(bounds[:, 1].max(axis=0) - bounds[:, 0].min(axis=0)))


def evaluate_artifacts(prediction: Union[str, Path], ground_truth: Union[str, Path],
                       joints_path: Optional[Union[str, Path]] = None,
                       diagonal: Optional[float] = None) -> MetricsReport:
    """
    Compare a saved prediction with a ground truth manifest or URDF.

    The diagonal for unmatched-joint penalties comes from the manifest meshes,
    or must be given for URDF ground truth (defaults to 1).
    """
    pred_tree, pred_joints = load_prediction(prediction, joints_path)
    gt_path = Path(ground_truth)
    if gt_path.suffix.lower() in (".urdf", ".xml"):
        gt_tree, gt_joints = read_urdf(gt_path)
        diagonal = diagonal or 1.0
    else:
        manifest = load_manifest(gt_path)
        gt_tree = ground_truth_tree(manifest)
        if gt_tree is None:
            raise ManifestError(f"{gt_path} carries no ground truth")
        gt_joints = gt_tree.joint_specs()
        diagonal = diagonal or _manifest_diagonal(manifest)
    return evaluate(pred_tree, pred_joints, gt_tree, gt_joints, diagonal, name=gt_path.stem)


def inspect_artifact(path: Union[str, Path]) -> Dict[str, Any]:
    """Summary of a tree dump, joint dump, graph dump, metrics report or URDF."""
    path = Path(path)
    if path.suffix.lower() in (".urdf", ".xml"):
        try:
            return {"kind": "urdf", **urdf_summary(path)}
        except ValueError as e:
            raise ArtifactParseError(str(e)) from e
    data = _load_json(path)
    if not isinstance(data, dict):
        raise ArtifactParseError(f"{path}: unrecognised artifact")
    try:
        if "aggregates" in data:
            return {"kind": "metrics", **MetricsReport.from_dict(data).to_dict()}
        if "root" in data and "edges" in data:
            tree = KinematicTree.from_dict(data)
            return {"kind": "tree", "root": tree.root, "nodes": tree.nodes,
                    "edges": [{"parent": int(e["parent"]), "child": int(e["child"]),
                               "joint_type": e.get("joint_type", "fixed"), "virtual": bool(e.get("virtual", False))}
                              for e in data["edges"]],
                    "reward_breakdown": data.get("reward_breakdown", {})}
        if "joints" in data:
            joints = joints_from_dict(data["joints"])
            return {"kind": "joints",
                    "joints": [{"parent": u, "child": v, "type": s.joint_type.value, "score": s.score,
                                "axis": None if s.axis is None else [float(x) for x in s.axis]}
                               for (u, v), s in sorted(joints.items())]}
        if "epsilon" in data and "nodes" in data:
            graph = ConnectionGraph.from_dict(data)
            return {"kind": "graph", "nodes": graph.nodes, "edges": graph.edges(),
                    "components": graph.components(), "epsilon": graph.epsilon}
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactParseError(f"{path}: {e}") from e
    raise ArtifactParseError(f"{path}: unrecognised artifact")
