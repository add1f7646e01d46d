"""
Contact Graph Construction for LinkSmith
========================================

Undirected connection graph over parts: an edge marks geometric contact,
detected from bidirectional SDF proximity of surface samples.

Features:
- Contact tolerance and attachment bound as fractions of the assembly diagonal
- Bidirectional minimum distance between two parts
- Linear-clamp contact strength in [0, 1]
- AABB prefilter and thread-parallel pair evaluation
- Virtual attachment of disconnected components (nearest centroids within d_max)
- JSON graph dump / load

Author: LinkSmith Development Team
Date: 2024
"""

import json
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from mesh_geometry import sample_surface
from part_assembly import PartRecord
from sdf_field import SdfField


class UnreachableComponent(ValueError):
    """A connected component lies farther than d_max from the rest of the assembly."""


class ContactConfig(BaseModel):
    """Contact detection settings; absolute values override the diagonal fractions."""
    model_config = ConfigDict(extra="forbid")

    epsilon_fraction: float = Field(0.01, gt=0)
    epsilon: Optional[float] = Field(None, gt=0)
    samples_per_part: int = Field(4096, ge=1)
    d_max_fraction: float = Field(0.25, gt=0)
    d_max: Optional[float] = Field(None, gt=0)
    seed: int = 0

    def epsilon_for(self, diagonal: float) -> float:
        return self.epsilon if self.epsilon is not None else self.epsilon_fraction * diagonal

    def d_max_for(self, diagonal: float) -> float:
        return self.d_max if self.d_max is not None else self.d_max_fraction * diagonal


class ConnectionGraph:
    """
    Contact graph G=(V,E) backed by networkx.

    Nodes carry the part centroid and volume; edges carry the bidirectional
    distance, the contact strength and whether the edge is a virtual attachment.
    """

    def __init__(self, epsilon: float = 0.0):
        self.graph = nx.Graph()
        self.epsilon = float(epsilon)

    # ---- construction ----------------------------------------------------
    def add_part(self, node: int, centroid: Sequence[float], volume: float):
        self.graph.add_node(int(node), centroid=np.asarray(centroid, dtype=np.float64), volume=float(volume))

    def add_contact(self, u: int, v: int, distance: float, strength: float, virtual: bool = False):
        if u == v:
            raise ValueError("self-contact is not allowed")
        self.graph.add_edge(int(u), int(v), distance=float(distance), strength=float(strength),
                            virtual=bool(virtual))

    def copy(self) -> "ConnectionGraph":
        other = ConnectionGraph(self.epsilon)
        other.graph = self.graph.copy()
        return other

    # ---- queries ---------------------------------------------------------
    @property
    def nodes(self) -> List[int]:
        return sorted(self.graph.nodes)

    def edges(self, include_virtual: bool = True) -> List[Tuple[int, int]]:
        out = []
        for u, v, data in self.graph.edges(data=True):
            if include_virtual or not data["virtual"]:
                out.append((min(u, v), max(u, v)))
        return sorted(out)

    def has_edge(self, u: int, v: int) -> bool:
        return self.graph.has_edge(u, v)

    def neighbors(self, node: int) -> List[int]:
        return sorted(self.graph.neighbors(node))

    def degree(self, node: int) -> int:
        """Number of real (non-virtual) contacts."""
        return sum(1 for _, _, d in self.graph.edges(node, data=True) if not d["virtual"])

    def strength(self, u: int, v: int) -> float:
        data = self.graph.get_edge_data(u, v)
        if data is None or data["virtual"]:
            return 0.0
        return data["strength"]

    def distance(self, u: int, v: int) -> float:
        return self.graph.edges[u, v]["distance"]

    def is_virtual(self, u: int, v: int) -> bool:
        return bool(self.graph.edges[u, v]["virtual"])

    def centroid(self, node: int) -> np.ndarray:
        return self.graph.nodes[node]["centroid"]

    def volume(self, node: int) -> float:
        return self.graph.nodes[node]["volume"]

    def centroids(self) -> Dict[int, np.ndarray]:
        return {n: self.centroid(n) for n in self.nodes}

    def volumes(self) -> Dict[int, float]:
        return {n: self.volume(n) for n in self.nodes}

    def components(self) -> List[List[int]]:
        comps = [sorted(c) for c in nx.connected_components(self.graph)]
        return sorted(comps, key=lambda c: c[0])

    def __len__(self) -> int:
        return self.graph.number_of_nodes()

    # ---- serialization -----------------------------------------------------
    def to_dict(self) -> Dict:
        return {
            "epsilon": self.epsilon,
            "nodes": [
                {"id": n, "centroid": [float(x) for x in self.centroid(n)], "volume": self.volume(n)}
                for n in self.nodes
            ],
            "edges": [
                {"u": u, "v": v, "distance": self.distance(u, v),
                 "strength": self.graph.edges[u, v]["strength"], "virtual": self.is_virtual(u, v)}
                for u, v in self.edges()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConnectionGraph":
        graph = cls(data.get("epsilon", 0.0))
        for node in data["nodes"]:
            if isinstance(node, Mapping):
                graph.add_part(node["id"], node.get("centroid", [0.0, 0.0, 0.0]), node.get("volume", 1.0))
            else:
                graph.add_part(node, [0.0, 0.0, 0.0], 1.0)
        for e in data["edges"]:
            graph.add_contact(e["u"], e["v"], e["distance"], e["strength"], e.get("virtual", False))
        return graph

    def dump_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")
        return path

    @classmethod
    def load_json(cls, path: Union[str, Path]) -> "ConnectionGraph":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def contact_strength(distance: float, epsilon: float) -> float:
    """clamp(1 - distance / epsilon, 0, 1)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return float(min(1.0, max(0.0, 1.0 - distance / epsilon)))


def bidirectional_min_distance(part_a: PartRecord, sdf_a: SdfField, part_b: PartRecord, sdf_b: SdfField,
                               n_samples: int = 4096, seed: int = 0,
                               samples_a: Optional[np.ndarray] = None,
                               samples_b: Optional[np.ndarray] = None) -> float:
    """min over samples of A of |sdf_b| together with min over samples of B of |sdf_a|."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if samples_a is None:
        samples_a, _ = sample_surface(part_a.mesh, n_samples, seed)
    if samples_b is None:
        samples_b, _ = sample_surface(part_b.mesh, n_samples, seed)
    d_ab = float(np.min(np.abs(sdf_b.query(samples_a))))
    d_ba = float(np.min(np.abs(sdf_a.query(samples_b))))
    return min(d_ab, d_ba)


def _aabb_gap(a: np.ndarray, b: np.ndarray) -> float:
    gap = np.maximum(0.0, np.maximum(a[0] - b[1], b[0] - a[1]))
    return float(np.linalg.norm(gap))


def build_connection_graph(parts: Sequence[PartRecord], sdfs: Sequence[SdfField], config: ContactConfig,
                           diagonal: float, threads: int = 1) -> ConnectionGraph:
    """
    Contact graph: edge (u, v) iff the bidirectional minimum distance is <= epsilon.

    Args:
        parts: Validated parts, indexed consistently with `sdfs`
        sdfs: One field per part
        config: Contact settings
        diagonal: Assembly diagonal used to resolve relative defaults
        threads: Worker threads for pair evaluation
    """
    epsilon = config.epsilon_for(diagonal)
    graph = ConnectionGraph(epsilon)
    for p in parts:
        graph.add_part(p.id, p.centroid, p.robust_volume)

    samples = [sample_surface(p.mesh, config.samples_per_part, config.seed)[0] for p in parts]
    pairs = []
    for i, j in combinations(range(len(parts)), 2):
        slack = epsilon + 2.0 * max(sdfs[i].cell_size, sdfs[j].cell_size)
        if _aabb_gap(parts[i].bounds, parts[j].bounds) > slack:
            continue
        pairs.append((i, j))
    logger.info(f"Evaluating {len(pairs)} candidate contact pairs (epsilon={epsilon:.4g})")

    def pair_distance(i: int, j: int) -> float:
        return bidirectional_min_distance(parts[i], sdfs[i], parts[j], sdfs[j],
                                          samples_a=samples[i], samples_b=samples[j])

    distances = Parallel(n_jobs=threads, prefer="threads")(delayed(pair_distance)(i, j) for i, j in pairs)
    for (i, j), d in zip(pairs, distances):
        if d <= epsilon:
            graph.add_contact(parts[i].id, parts[j].id, d, contact_strength(d, epsilon))
            logger.debug(f"Contact {parts[i].id}-{parts[j].id}: d={d:.4g}")

    logger.info(f"Connection graph: {len(graph)} nodes, {len(graph.edges())} edges, "
                f"{len(graph.components())} components")
    return graph


def attach_components(graph: ConnectionGraph, base: int, d_max: float) -> ConnectionGraph:
    """
    Connect every component to the one holding `base` with virtual edges.

    Repeatedly links the closest (attached, unattached) centroid pair, ties by
    lowest ids, as long as that distance is at most d_max.

    Raises:
        UnreachableComponent: when the closest remaining component is farther than d_max
    """
    result = graph.copy()
    components = result.components()
    attached = next(c for c in components if base in c)
    remaining = [c for c in components if base not in c]
    attached = list(attached)
    while remaining:
        best = None
        for ci, comp in enumerate(remaining):
            for u in attached:
                cu = result.centroid(u)
                for v in comp:
                    d = float(np.linalg.norm(result.centroid(v) - cu))
                    key = (d, u, v)
                    if best is None or key < best[0]:
                        best = (key, ci)
        (d, u, v), ci = best
        if d > d_max:
            raise UnreachableComponent(
                f"component {remaining[ci]} is {d:.4g} from the tree (d_max={d_max:.4g})")
        result.add_contact(u, v, d, 0.0, virtual=True)
        logger.info(f"Virtual edge {u}-{v} attaches component {remaining[ci]} (distance {d:.4g})")
        attached.extend(remaining.pop(ci))
    return result
