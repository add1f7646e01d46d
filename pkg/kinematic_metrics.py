"""
Kinematic Metrics for LinkSmith
===============================

Compares a predicted articulated assembly with its ground truth.

Features:
- Axis angle error in degrees (opposite directions are equivalent)
- Axis position error: literal pivot distance and distance to the ground-truth axis line
- Ordered tree edit distance (unit costs, children sorted by part id)
- Per-joint matching by (parent, child) with worst-case penalties for unmatched joints
- JSON and CSV reports, per-joint and per-object aggregates

Author: LinkSmith Development Team
Date: 2024
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from kinematic_tree import JointSpec, JointType, KinematicTree

Edge = Tuple[int, int]
UNIT_TOLERANCE = 1e-6
UNMATCHED_ANGLE = 90.0


class NonUnitAxis(ValueError):
    """Axis is not unit length within 1e-6."""


class CorrespondenceMissing(ValueError):
    """Prediction and ground truth do not cover the same parts."""


# --- JOINT METRICS ---

def _unit(axis, name: str) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    if a.shape != (3,) or abs(float(np.linalg.norm(a)) - 1.0) > UNIT_TOLERANCE:
        raise NonUnitAxis(f"{name} is not a unit 3-vector: {axis!r}")
    return a


def axis_angle_error(pred_axis, gt_axis) -> float:
    """arccos(|pred . gt|) in degrees."""
    p = _unit(pred_axis, "predicted axis")
    g = _unit(gt_axis, "ground-truth axis")
    cosine = min(1.0, abs(float(p @ g)))
    return math.degrees(math.acos(cosine))


def axis_position_error(pred_pivot, gt_pivot, gt_axis=None, mode: str = "literal") -> float:
    """
    Pivot error.

    Args:
        pred_pivot: Predicted pivot
        gt_pivot: Ground-truth pivot
        gt_axis: Ground-truth axis (needed for mode="line")
        mode: "literal" for |pred - gt|, "line" for the distance from pred to the ground-truth axis line
    """
    diff = np.asarray(pred_pivot, dtype=np.float64) - np.asarray(gt_pivot, dtype=np.float64)
    if mode == "literal":
        return float(np.linalg.norm(diff))
    if mode == "line":
        if gt_axis is None:
            raise ValueError("line mode needs the ground-truth axis")
        u = np.asarray(gt_axis, dtype=np.float64)
        u = u / np.linalg.norm(u)
        return float(np.linalg.norm(diff - (diff @ u) * u))
    raise ValueError(f"unknown mode {mode!r}")


# --- TREE EDIT DISTANCE ---

def _postorder_arrays(tree: KinematicTree) -> Tuple[List[int], List[int]]:
    """Labels in postorder (children by ascending id) and leftmost-leaf indices."""
    labels = tree.postorder()
    index = {node: i for i, node in enumerate(labels)}
    leftmost: List[int] = []
    for node in labels:
        children = tree.children_of(node)
        leftmost.append(leftmost[index[children[0]]] if children else index[node])
    return labels, leftmost


def _keyroots(leftmost: List[int]) -> List[int]:
    seen = {}
    for i, l in enumerate(leftmost):
        seen[l] = i
    return sorted(seen.values())


def tree_edit_distance(pred_tree: KinematicTree, gt_tree: KinematicTree) -> int:
    """Ordered tree edit distance with unit insert/delete/relabel costs (Zhang-Shasha)."""
    a_labels, a_lml = _postorder_arrays(pred_tree)
    b_labels, b_lml = _postorder_arrays(gt_tree)
    n, m = len(a_labels), len(b_labels)
    tree_dist = np.zeros((n, m), dtype=np.int64)

    for i in _keyroots(a_lml):
        for j in _keyroots(b_lml):
            li, lj = a_lml[i], b_lml[j]
            rows, cols = i - li + 2, j - lj + 2
            fd = np.zeros((rows, cols), dtype=np.int64)
            fd[:, 0] = np.arange(rows)
            fd[0, :] = np.arange(cols)
            for x in range(li, i + 1):
                for y in range(lj, j + 1):
                    fx, fy = x - li + 1, y - lj + 1
                    if a_lml[x] == li and b_lml[y] == lj:
                        relabel = 0 if a_labels[x] == b_labels[y] else 1
                        fd[fx, fy] = min(fd[fx - 1, fy] + 1, fd[fx, fy - 1] + 1, fd[fx - 1, fy - 1] + relabel)
                        tree_dist[x, y] = fd[fx, fy]
                    else:
                        px, py = a_lml[x] - li, b_lml[y] - lj
                        fd[fx, fy] = min(fd[fx - 1, fy] + 1, fd[fx, fy - 1] + 1, fd[px, py] + tree_dist[x, y])
    return int(tree_dist[n - 1, m - 1])


# --- REPORT ---

@dataclass
class JointError:
    parent: int
    child: int
    gt_type: Optional[str]
    pred_type: Optional[str]
    matched: bool
    axis_angle_error: Optional[float]
    axis_position_error: Optional[float]
    axis_line_error: Optional[float]


@dataclass
class MetricsReport:
    name: str
    joints: List[JointError]
    tree_edit_distance: int
    diagonal: float
    aggregates: Dict[str, Optional[float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self._aggregate()

    def _aggregate(self) -> Dict[str, Optional[float]]:
        out: Dict[str, Optional[float]] = {"tree_edit_distance": float(self.tree_edit_distance),
                                           "n_joints": float(len(self.joints))}
        for key in ("axis_angle_error", "axis_position_error", "axis_line_error"):
            values = [getattr(j, key) for j in self.joints if getattr(j, key) is not None]
            out[f"mean_{key}"] = float(np.mean(values)) if values else None
            out[f"median_{key}"] = float(np.median(values)) if values else None
        typed = [j for j in self.joints if j.gt_type is not None]
        out["type_accuracy"] = (float(np.mean([j.gt_type == j.pred_type for j in typed])) if typed else None)
        return out

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "tree_edit_distance": self.tree_edit_distance,
            "diagonal": self.diagonal,
            "aggregates": self.aggregates,
            "joints": [asdict(j) for j in self.joints],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        return cls(data["name"], [JointError(**j) for j in data["joints"]], int(data["tree_edit_distance"]),
                   float(data["diagonal"]), dict(data.get("aggregates", {})))

    def to_frame(self) -> pd.DataFrame:
        """One row per joint plus one summary row."""
        rows = [{"object": self.name, "row": "joint", **asdict(j), "tree_edit_distance": None} for j in self.joints]
        rows.append({
            "object": self.name, "row": "summary", "parent": None, "child": None, "gt_type": None,
            "pred_type": None, "matched": None,
            "axis_angle_error": self.aggregates.get("mean_axis_angle_error"),
            "axis_position_error": self.aggregates.get("mean_axis_position_error"),
            "axis_line_error": self.aggregates.get("mean_axis_line_error"),
            "tree_edit_distance": self.tree_edit_distance,
        })
        return pd.DataFrame(rows)

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")
        return path

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


def _movable(joints: Mapping[Edge, JointSpec]) -> Dict[Edge, JointSpec]:
    return {k: v for k, v in joints.items() if v.joint_type.is_movable}


def evaluate(pred_tree: KinematicTree, pred_joints: Mapping[Edge, JointSpec],
             gt_tree: KinematicTree, gt_joints: Mapping[Edge, JointSpec],
             diagonal: float, name: str = "assembly") -> MetricsReport:
    """
    Score a prediction against ground truth.

    Movable joints are matched by (parent, child). A movable joint present on
    only one side scores 90 degrees and one assembly diagonal. Prismatic ground
    truth joints carry no position error.

    Raises:
        CorrespondenceMissing: when the part sets differ
    """
    if set(pred_tree.nodes) != set(gt_tree.nodes):
        raise CorrespondenceMissing(
            f"prediction parts {sorted(pred_tree.nodes)} differ from ground truth {sorted(gt_tree.nodes)}")

    pred_movable = _movable(pred_joints)
    gt_movable = _movable(gt_joints)
    rows: List[JointError] = []
    for edge in sorted(set(pred_movable) | set(gt_movable)):
        gt = gt_movable.get(edge)
        pred = pred_movable.get(edge)
        gt_type = gt.joint_type.value if gt is not None else (
            gt_joints[edge].joint_type.value if edge in gt_joints else None)
        pred_type = pred.joint_type.value if pred is not None else (
            pred_joints[edge].joint_type.value if edge in pred_joints else None)
        if gt is None or pred is None:
            line = diagonal if (gt is None or gt.joint_type is JointType.REVOLUTE) else None
            rows.append(JointError(edge[0], edge[1], gt_type, pred_type, False, UNMATCHED_ANGLE,
                                   line, line))
            continue
        angle = axis_angle_error(pred.axis, gt.axis)
        literal = line = None
        if gt.joint_type is JointType.REVOLUTE:
            if pred.pivot is not None:
                literal = axis_position_error(pred.pivot, gt.pivot, gt.axis, "literal")
                line = axis_position_error(pred.pivot, gt.pivot, gt.axis, "line")
            else:
                literal = line = diagonal
        rows.append(JointError(edge[0], edge[1], gt_type, pred_type, True, angle, literal, line))

    ted = tree_edit_distance(pred_tree, gt_tree)
    report = MetricsReport(name, rows, ted, float(diagonal))
    logger.info(f"{name}: TED={ted}, mean angle={report.aggregates['mean_axis_angle_error']}, "
                f"mean pivot={report.aggregates['mean_axis_position_error']}")
    return report


def summarize_reports(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, Optional[float]]]:
    """Per-joint (pooled) and per-object (mean of object means) aggregates."""
    def mean(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    summary: Dict[str, Dict[str, Optional[float]]] = {"per_joint": {}, "per_object": {}}
    for key in ("axis_angle_error", "axis_position_error", "axis_line_error"):
        summary["per_joint"][f"mean_{key}"] = mean(getattr(j, key) for r in reports for j in r.joints)
        summary["per_object"][f"mean_{key}"] = mean(r.aggregates.get(f"mean_{key}") for r in reports)
    ted = mean(r.tree_edit_distance for r in reports)
    summary["per_joint"]["mean_tree_edit_distance"] = ted
    summary["per_object"]["mean_tree_edit_distance"] = ted
    summary["per_object"]["n_objects"] = float(len(reports))
    summary["per_joint"]["n_joints"] = float(sum(len(r.joints) for r in reports))
    return summary
