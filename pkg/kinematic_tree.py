"""
Kinematic Tree Model for LinkSmith
==================================

Directed, rooted kinematic trees whose edges carry joint specifications.

Features:
- JointType / JointSpec with per-type invariants
- KinematicTree with parent/child lookups, depths and out-degrees
- Subtree mass and subtree center of mass (bottom-up accumulation)
- JSON dump/load of tree structure plus optional reward breakdown

Author: LinkSmith Development Team
Date: 2024
"""

import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger


class JointType(str, Enum):
    FIXED = "fixed"
    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"

    @property
    def is_movable(self) -> bool:
        return self is not JointType.FIXED


class InvalidTree(ValueError):
    """Raised when edges do not form a rooted arborescence."""


def _vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be a finite 3-vector, got {values!r}")
    return arr


def unit_axis(axis) -> np.ndarray:
    """Normalize an axis, leaving it untouched when it is already unit within 1e-12."""
    a = _vector(axis, "axis")
    norm = float(np.linalg.norm(a))
    if norm <= 1e-12:
        raise ValueError("axis has zero length")
    if abs(norm - 1.0) > 1e-12:
        a = a / norm
    return a


@dataclass(eq=False)
class JointSpec:
    """
    Joint between a parent and a child part.

    Revolute joints carry an axis and a pivot, prismatic joints an axis only,
    fixed joints neither. Axis and pivot are expressed in world coordinates.
    """
    joint_type: JointType
    origin: np.ndarray
    axis: Optional[np.ndarray] = None
    pivot: Optional[np.ndarray] = None
    score: float = 1.0
    lower: Optional[float] = None
    upper: Optional[float] = None

    def __post_init__(self):
        self.joint_type = JointType(self.joint_type)
        self.origin = _vector(self.origin, "origin")
        if self.joint_type is JointType.FIXED:
            if self.axis is not None or self.pivot is not None:
                raise ValueError("fixed joints carry neither axis nor pivot")
            return
        if self.axis is None:
            raise ValueError(f"{self.joint_type.value} joint requires an axis")
        self.axis = unit_axis(self.axis)
        if self.joint_type is JointType.REVOLUTE:
            if self.pivot is None:
                raise ValueError("revolute joint requires a pivot")
            self.pivot = _vector(self.pivot, "pivot")
        elif self.pivot is not None:
            raise ValueError("prismatic joints carry no pivot")

    @classmethod
    def fixed(cls, origin) -> "JointSpec":
        return cls(JointType.FIXED, origin)

    def to_dict(self) -> Dict:
        data = {
            "type": self.joint_type.value,
            "origin": [float(x) for x in self.origin],
            "axis": None if self.axis is None else [float(x) for x in self.axis],
            "pivot": None if self.pivot is None else [float(x) for x in self.pivot],
            "score": float(self.score),
        }
        if self.lower is not None and self.upper is not None:
            data["limits"] = [float(self.lower), float(self.upper)]
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "JointSpec":
        limits = data.get("limits") or [None, None]
        return cls(
            joint_type=JointType(data.get("type", data.get("joint_type", "fixed"))),
            origin=data["origin"],
            axis=data.get("axis"),
            pivot=data.get("pivot"),
            score=float(data.get("score", 1.0)),
            lower=limits[0],
            upper=limits[1],
        )


@dataclass(eq=False)
class TreeEdge:
    parent: int
    child: int
    joint: JointSpec
    virtual: bool = False

    @property
    def key(self) -> Tuple[int, int]:
        return (self.parent, self.child)


@dataclass(eq=False)
class KinematicTree:
    """
    Rooted spanning arborescence over part ids.

    Edges are kept sorted by (parent, child); the constructor rejects anything
    that is not a tree rooted at `root` covering every node.
    """
    root: int
    nodes: List[int]
    edges: List[TreeEdge] = field(default_factory=list)

    def __post_init__(self):
        self.nodes = sorted(int(n) for n in self.nodes)
        self.edges = sorted(self.edges, key=lambda e: e.key)
        self._validate()
        self._parent = {e.child: e.parent for e in self.edges}
        self._children: Dict[int, List[int]] = {n: [] for n in self.nodes}
        for e in self.edges:
            self._children[e.parent].append(e.child)
        self._edge_map = {e.key: e for e in self.edges}
        self._depth = self._compute_depths()

    def _validate(self):
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise InvalidTree("duplicate node ids")
        if self.root not in node_set:
            raise InvalidTree(f"root {self.root} is not a node")
        parents: Dict[int, int] = {}
        for e in self.edges:
            if e.parent not in node_set or e.child not in node_set:
                raise InvalidTree(f"edge {e.key} references an unknown node")
            if e.child == self.root:
                raise InvalidTree("root cannot have a parent")
            if e.child in parents:
                raise InvalidTree(f"node {e.child} has two parents")
            parents[e.child] = e.parent
        if len(self.edges) != len(self.nodes) - 1:
            raise InvalidTree(
                f"expected {len(self.nodes) - 1} edges for {len(self.nodes)} nodes, got {len(self.edges)}")
        # every node must walk up to the root without revisiting
        for n in self.nodes:
            seen = set()
            while n != self.root:
                if n in seen:
                    raise InvalidTree("edges contain a cycle")
                seen.add(n)
                n = parents[n]

    def _compute_depths(self) -> Dict[int, int]:
        depth = {self.root: 0}
        queue = deque([self.root])
        while queue:
            u = queue.popleft()
            for v in self._children[u]:
                depth[v] = depth[u] + 1
                queue.append(v)
        return depth

    # ---- structure -------------------------------------------------------
    def parent_of(self, node: int) -> Optional[int]:
        return self._parent.get(node)

    def children_of(self, node: int) -> List[int]:
        return list(self._children[node])

    def depth(self, node: int) -> int:
        return self._depth[node]

    def depths(self) -> Dict[int, int]:
        return dict(self._depth)

    def out_degree(self, node: int) -> int:
        return len(self._children[node])

    def edge(self, parent: int, child: int) -> TreeEdge:
        return self._edge_map[(parent, child)]

    def has_edge(self, parent: int, child: int) -> bool:
        return (parent, child) in self._edge_map

    def edge_keys(self) -> List[Tuple[int, int]]:
        return [e.key for e in self.edges]

    def postorder(self) -> List[int]:
        order: List[int] = []
        stack = [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            stack.append((node, True))
            for child in reversed(self._children[node]):
                stack.append((child, False))
        return order

    def breadth_first_edges(self) -> List[TreeEdge]:
        return sorted(self.edges, key=lambda e: (self._depth[e.child], e.parent, e.child))

    # ---- mass properties ---------------------------------------------------
    def subtree_mass(self, masses: Mapping[int, float]) -> Dict[int, float]:
        """M(i) = m_i + sum of M(j) over children j."""
        total: Dict[int, float] = {}
        for node in self.postorder():
            total[node] = float(masses[node]) + sum(total[c] for c in self._children[node])
        return total

    def subtree_centers(self, masses: Mapping[int, float],
                        centroids: Mapping[int, np.ndarray]) -> Tuple[Dict[int, float], Dict[int, np.ndarray]]:
        """Subtree masses and mass-weighted subtree centers."""
        total: Dict[int, float] = {}
        center: Dict[int, np.ndarray] = {}
        for node in self.postorder():
            m = float(masses[node])
            acc = m * np.asarray(centroids[node], dtype=np.float64)
            mass = m
            for c in self._children[node]:
                acc = acc + total[c] * center[c]
                mass += total[c]
            total[node] = mass
            center[node] = acc / mass if mass > 0 else np.asarray(centroids[node], dtype=np.float64)
        return total, center

    # ---- joints ----------------------------------------------------------
    def with_joints(self, joints: Mapping[Tuple[int, int], JointSpec]) -> "KinematicTree":
        edges = [replace(e, joint=joints.get(e.key, e.joint)) for e in self.edges]
        return KinematicTree(self.root, self.nodes, edges)

    def joint_specs(self) -> Dict[Tuple[int, int], JointSpec]:
        return {e.key: e.joint for e in self.edges}

    # ---- serialization ---------------------------------------------------
    def to_dict(self, reward_breakdown: Optional[Mapping[str, float]] = None) -> Dict:
        data = {
            "root": self.root,
            "nodes": list(self.nodes),
            "edges": [
                {
                    "parent": e.parent,
                    "child": e.child,
                    "origin": [float(x) for x in e.joint.origin],
                    "joint_type": e.joint.joint_type.value,
                    "virtual": e.virtual,
                }
                for e in self.edges
            ],
        }
        if reward_breakdown is not None:
            data["reward_breakdown"] = {k: float(v) for k, v in reward_breakdown.items()}
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "KinematicTree":
        edges = []
        nodes = set(data.get("nodes", [])) | {int(data["root"])}
        for item in data["edges"]:
            # tree dumps carry no axis; movable joint details live in the joint dump
            joint = JointSpec.fixed(item["origin"])
            if JointType(item.get("joint_type", "fixed")).is_movable:
                logger.debug(f"Edge {item['parent']}->{item['child']} loaded as fixed placeholder")
            edges.append(TreeEdge(int(item["parent"]), int(item["child"]), joint, bool(item.get("virtual", False))))
            nodes.update((int(item["parent"]), int(item["child"])))
        return cls(int(data["root"]), sorted(nodes), edges)

    def dump_json(self, path: Union[str, Path], reward_breakdown: Optional[Mapping[str, float]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(reward_breakdown), f, indent=2)
            f.write("\n")
        return path

    @classmethod
    def load_json(cls, path: Union[str, Path]) -> "KinematicTree":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def joints_to_dict(joints: Mapping[Tuple[int, int], JointSpec]) -> List[Dict]:
    """Joint dump entries sorted by (parent, child)."""
    out = []
    for (parent, child) in sorted(joints):
        entry = {"parent": parent, "child": child}
        entry.update(joints[(parent, child)].to_dict())
        out.append(entry)
    return out


def joints_from_dict(entries: Iterable[Mapping]) -> Dict[Tuple[int, int], JointSpec]:
    return {(int(e["parent"]), int(e["child"])): JointSpec.from_dict(e) for e in entries}


def tree_from_edges(root: int, nodes: Sequence[int], edges: Iterable[Tuple[int, int]],
                    centroids: Optional[Mapping[int, np.ndarray]] = None,
                    virtual: Iterable[Tuple[int, int]] = ()) -> KinematicTree:
    """Build a tree of fixed joints with origins c_v - c_u (zero when centroids are unknown)."""
    virtual = set(virtual)
    tree_edges = []
    for u, v in edges:
        origin = np.zeros(3) if centroids is None else np.asarray(centroids[v]) - np.asarray(centroids[u])
        tree_edges.append(TreeEdge(u, v, JointSpec.fixed(origin), (u, v) in virtual))
    return KinematicTree(root, list(nodes), tree_edges)
