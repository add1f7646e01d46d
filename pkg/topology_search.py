"""
Kinematic Topology Search for LinkSmith
=======================================

Orients the connection graph into a rooted kinematic tree. A BFS orientation
serves as warm start and ablation baseline; Monte Carlo tree search with a
five-term structural reward is the default.

Features:
- Base selection (maximum degree, lowest id on ties)
- BFS orientation with broken-edge bookkeeping and virtual attachment
- Search states, feasible actions and transitions with symmetry constraints
- Structure, static-stability, contact, symmetry and hierarchy rewards
- UCT search with transposition table, greedy rollouts and best-tree cache
- Root-parallel workers and exhaustive enumeration for small assemblies

Author: LinkSmith Development Team
Date: 2024
"""

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterator, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from contact_graph import ConnectionGraph, attach_components
from kinematic_tree import KinematicTree, tree_from_edges
from part_assembly import PartRecord, SymmetryClusters

Edge = Tuple[int, int]
_GUARD = 1e-9
_MAD_SCALE = 1.4826


class EmptyGraph(ValueError):
    """The connection graph has no nodes."""


class InfeasibleAction(ValueError):
    """The oriented edge cannot be added to the search state."""


class SearchFailed(RuntimeError):
    """No spanning tree satisfies the search constraints."""


# --- CONFIG ---

class RewardConfig(BaseModel):
    """Weights and constants of the five reward terms."""
    model_config = ConfigDict(extra="forbid")

    w_struct: float = Field(1.0, ge=0)
    w_static: float = Field(1.0, ge=0)
    w_contact: float = Field(1.0, ge=0)
    w_sym: float = Field(1.0, ge=0)
    w_hier: float = Field(1.0, ge=0)
    preferred_out_degree: float = 2.0
    edge_penalty: float = Field(0.1, gt=0)
    density: float = Field(1.0, gt=0)
    gravity: float = Field(9.81, gt=0)
    epsilon_sym: float = Field(1e-6, gt=0)
    epsilon_hier: float = Field(1e-6, gt=0)
    torque_reference: Literal["centroid", "joint"] = "centroid"
    sigma_tau: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _positive_weights(self) -> "RewardConfig":
        if sum(self.weights) <= 0:
            raise ValueError("reward weights must sum to a positive value")
        return self

    @property
    def weights(self) -> Tuple[float, float, float, float, float]:
        return (self.w_struct, self.w_static, self.w_contact, self.w_sym, self.w_hier)

    def with_weights(self, weights: Sequence[float]) -> "RewardConfig":
        if len(weights) != 5:
            raise ValueError("expected five reward weights (struct, static, contact, sym, hier)")
        names = ("w_struct", "w_static", "w_contact", "w_sym", "w_hier")
        return RewardConfig.model_validate({**self.model_dump(), **dict(zip(names, map(float, weights)))})


class SearchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    exploration_constant: float = Field(1.414, gt=0)
    max_iterations: int = Field(2000, ge=1)
    rng_seed: int = 0
    workers: int = Field(1, ge=1)
    progress: bool = False


# --- GEOMETRY ACCESS ---

PartsLike = Union[ConnectionGraph, Sequence[PartRecord], Mapping[int, Tuple[np.ndarray, float]]]


def _geometry(parts: PartsLike) -> Tuple[Dict[int, np.ndarray], Dict[int, float]]:
    if isinstance(parts, ConnectionGraph):
        return parts.centroids(), parts.volumes()
    if isinstance(parts, Mapping):
        return ({k: np.asarray(v[0], dtype=np.float64) for k, v in parts.items()},
                {k: float(v[1]) for k, v in parts.items()})
    return ({p.id: p.centroid for p in parts}, {p.id: p.robust_volume for p in parts})


# --- BASE + BFS ---

def select_base(graph: ConnectionGraph) -> int:
    """Maximum-degree node; ties go to the lowest part id."""
    if len(graph) == 0:
        raise EmptyGraph("connection graph is empty")
    return min(graph.nodes, key=lambda n: (-graph.degree(n), n))


def _undirected(u: int, v: int) -> FrozenSet[int]:
    return frozenset((u, v))


def bfs_orient(graph: ConnectionGraph, base: int, d_max: float) -> Tuple[KinematicTree, List[Edge]]:
    """
    Orient the graph away from `base` by breadth-first search.

    Neighbors are visited in id order; the first reach defines the parent.
    Disconnected components are attached first through virtual edges.

    Returns:
        Tuple of (tree with fixed joints, broken edges as sorted (min, max) pairs)
    """
    if base not in graph.nodes:
        raise ValueError(f"base {base} is not in the graph")
    full = attach_components(graph, base, d_max)
    parent: Dict[int, int] = {}
    order = [base]
    seen = {base}
    queue = deque([base])
    tree_edges: List[Edge] = []
    while queue:
        u = queue.popleft()
        for v in full.neighbors(u):
            if v in seen:
                continue
            seen.add(v)
            parent[v] = u
            tree_edges.append((u, v))
            order.append(v)
            queue.append(v)
    in_tree = {_undirected(u, v) for u, v in tree_edges}
    broken = [e for e in full.edges() if _undirected(*e) not in in_tree]
    virtual = [(u, v) for u, v in tree_edges if full.is_virtual(u, v)]
    tree = tree_from_edges(base, full.nodes, tree_edges, full.centroids(), virtual)
    logger.info(f"BFS orientation from base {base}: {len(tree_edges)} edges, {len(broken)} broken")
    return tree, broken


# --- SEARCH STATE ---

@dataclass(frozen=True)
class SearchState:
    """Partial tree T_S (insertion order), visited nodes V_S and broken edges B_S."""
    edges: Tuple[Edge, ...]
    visited: FrozenSet[int]
    broken: FrozenSet[FrozenSet[int]] = frozenset()

    @classmethod
    def initial(cls, base: int) -> "SearchState":
        return cls((), frozenset([base]), frozenset())

    @property
    def key(self) -> FrozenSet[Edge]:
        return frozenset(self.edges)

    def origins(self, centroids: Mapping[int, np.ndarray]) -> Dict[Edge, np.ndarray]:
        return {(u, v): centroids[v] - centroids[u] for u, v in self.edges}


def feasible_actions(state: SearchState, graph: ConnectionGraph,
                     clusters: Optional[SymmetryClusters] = None) -> List[Edge]:
    """Oriented edges u->v with u visited, v unvisited, not broken, not intra-cluster; sorted by (u, v)."""
    actions = []
    for u in sorted(state.visited):
        for v in graph.neighbors(u):
            if v in state.visited or _undirected(u, v) in state.broken:
                continue
            if clusters is not None and clusters.same_multi_cluster(u, v):
                continue
            actions.append((u, v))
    return actions


def apply_action(state: SearchState, action: Edge, graph: ConnectionGraph,
                 clusters: Optional[SymmetryClusters] = None) -> SearchState:
    """
    Add u->v as a provisional fixed joint.

    Every graph edge (v, w) with w already visited (other than u) would close a
    cycle and is recorded as broken.
    """
    u, v = action
    if (u not in state.visited or v in state.visited or not graph.has_edge(u, v)
            or _undirected(u, v) in state.broken
            or (clusters is not None and clusters.same_multi_cluster(u, v))):
        raise InfeasibleAction(f"action {u}->{v} is not feasible")
    newly_broken = {_undirected(v, w) for w in graph.neighbors(v) if w in state.visited and w != u}
    return SearchState(state.edges + ((u, v),), state.visited | {v}, state.broken | newly_broken)


def state_tree(state: SearchState, base: int, graph: ConnectionGraph) -> KinematicTree:
    virtual = [(u, v) for u, v in state.edges if graph.is_virtual(u, v)]
    return tree_from_edges(base, sorted(state.visited), state.edges, graph.centroids(), virtual)


# --- REWARDS ---

def reward_struct(tree: KinematicTree, config: RewardConfig) -> float:
    """1 / (mean d^2 + mean (deg+ - k)^2 + lambda |E|)."""
    nodes = tree.nodes
    depth = np.array([tree.depth(n) for n in nodes], dtype=np.float64)
    degree = np.array([tree.out_degree(n) for n in nodes], dtype=np.float64)
    denom = (np.mean(depth ** 2) + np.mean((degree - config.preferred_out_degree) ** 2)
             + config.edge_penalty * len(tree.edges))
    return 1.0 / max(float(denom), _GUARD)


def torque_magnitudes(tree: KinematicTree, parts: PartsLike, config: RewardConfig) -> Dict[int, float]:
    """Per-node gravity torque of each subtree about its reference point (root excluded)."""
    centroids, volumes = _geometry(parts)
    masses = {n: config.density * volumes[n] for n in tree.nodes}
    total, center = tree.subtree_centers(masses, centroids)
    down = np.array([0.0, 0.0, -1.0])
    out: Dict[int, float] = {}
    for n in tree.nodes:
        if n == tree.root:
            continue
        ref = centroids[n] if config.torque_reference == "centroid" else centroids[tree.parent_of(n)]
        force = total[n] * config.gravity * down
        out[n] = float(np.linalg.norm(np.cross(center[n] - ref, force)))
    return out


def torque_scale(torques: Sequence[float], config: RewardConfig) -> float:
    """Robust torque normalizer: 1.4826 * MAD, falling back to the largest torque."""
    if config.sigma_tau is not None:
        return config.sigma_tau
    values = np.asarray(list(torques), dtype=np.float64)
    largest = float(values.max()) if values.size else 0.0
    if np.count_nonzero(values) >= 2:
        mad = _MAD_SCALE * float(np.median(np.abs(values - np.median(values))))
        if mad > _GUARD:
            return mad
    return max(largest, _GUARD)


def reward_static(tree: KinematicTree, parts: PartsLike, config: RewardConfig) -> float:
    """1 / (1 + tau / sigma_tau)."""
    torques = torque_magnitudes(tree, parts, config)
    tau = float(sum(torques.values()))
    if tau == 0.0:
        return 1.0
    return 1.0 / (1.0 + tau / torque_scale(torques.values(), config))


def reward_contact(tree: KinematicTree, graph: ConnectionGraph) -> float:
    """Mean contact strength over tree edges; virtual edges contribute 0."""
    if not tree.edges:
        return 1.0
    return float(np.mean([graph.strength(e.parent, e.child) for e in tree.edges]))


def reward_sym(tree: KinematicTree, clusters: Optional[SymmetryClusters], config: RewardConfig) -> float:
    """Mean over multi-member clusters of 1/(1+Var(depth)) + [1 - (|P_k|-1)/(|C_k|-1+eps)]."""
    groups = clusters.multi_member() if clusters is not None else []
    if not groups:
        return 1.0
    scores = []
    for members in groups:
        depths = np.array([tree.depth(m) for m in members], dtype=np.float64)
        parents = {tree.parent_of(m) for m in members}
        n_parents = max(len(parents), 1)
        scores.append(1.0 / (1.0 + float(np.var(depths)))
                      + 1.0 - (n_parents - 1) / (len(members) - 1 + config.epsilon_sym))
    return float(np.mean(scores))


def reward_hier(tree: KinematicTree, parts: PartsLike, config: RewardConfig) -> float:
    """1 / (1 + sum of max(0, v_child / (v_parent + eps) - 1))."""
    _, volumes = _geometry(parts)
    penalty = sum(max(0.0, volumes[e.child] / (volumes[e.parent] + config.epsilon_hier) - 1.0)
                  for e in tree.edges)
    return 1.0 / (1.0 + penalty)


def reward_breakdown(tree: KinematicTree, graph: ConnectionGraph, parts: PartsLike,
                     clusters: Optional[SymmetryClusters], config: RewardConfig) -> Dict[str, float]:
    terms = {
        "struct": reward_struct(tree, config),
        "static": reward_static(tree, parts, config),
        "contact": reward_contact(tree, graph),
        "sym": reward_sym(tree, clusters, config),
        "hier": reward_hier(tree, parts, config),
    }
    terms["total"] = float(sum(w * t for w, t in zip(config.weights, terms.values())))
    return terms


def reward(tree: KinematicTree, graph: ConnectionGraph, parts: PartsLike,
           clusters: Optional[SymmetryClusters], config: RewardConfig) -> float:
    """Weighted sum of the five terms; terms with zero weight are skipped."""
    terms = (
        (config.w_struct, lambda: reward_struct(tree, config)),
        (config.w_static, lambda: reward_static(tree, parts, config)),
        (config.w_contact, lambda: reward_contact(tree, graph)),
        (config.w_sym, lambda: reward_sym(tree, clusters, config)),
        (config.w_hier, lambda: reward_hier(tree, parts, config)),
    )
    return float(sum(w * term() for w, term in terms if w != 0.0))


# --- MCTS ---

@dataclass(eq=False)
class _Node:
    state: SearchState
    untried: List[Edge]
    children: Dict[Edge, FrozenSet[Edge]] = field(default_factory=dict)
    visits: int = 0
    value: float = 0.0


class _Search:
    """One seeded UCT search; nodes are shared through a transposition table keyed by edge set."""

    def __init__(self, graph: ConnectionGraph, base: int, clusters: Optional[SymmetryClusters],
                 reward_config: RewardConfig, search_config: SearchConfig, seed: int):
        self.graph = graph
        self.base = base
        self.clusters = clusters
        self.rc = reward_config
        self.sc = search_config
        self.rng = np.random.default_rng(seed)
        self.n_nodes = len(graph)
        self.table: Dict[FrozenSet[Edge], _Node] = {}
        self.rewards: Dict[FrozenSet[Edge], float] = {}
        self.rollouts: Dict[FrozenSet[Edge], Optional[SearchState]] = {}
        self.best: Optional[Tuple[float, Tuple[Edge, ...], SearchState]] = None
        self.volumes = graph.volumes()

    # ---- helpers ---------------------------------------------------------
    def _node(self, state: SearchState) -> _Node:
        node = self.table.get(state.key)
        if node is None:
            actions = feasible_actions(state, self.graph, self.clusters)
            order = self.rng.permutation(len(actions)) if actions else []
            node = _Node(state, [actions[i] for i in order])
            self.table[state.key] = node
        return node

    def _complete(self, state: SearchState) -> bool:
        return len(state.visited) == self.n_nodes

    def evaluate(self, state: SearchState) -> float:
        key = state.key
        if key not in self.rewards:
            tree = state_tree(state, self.base, self.graph)
            self.rewards[key] = reward(tree, self.graph, self.graph, self.clusters, self.rc)
            self.offer(self.rewards[key], state)
        return self.rewards[key]

    def offer(self, value: float, state: SearchState):
        ordered = tuple(sorted(state.edges))
        if self.best is None or value > self.best[0] or (value == self.best[0] and ordered < self.best[1]):
            self.best = (value, ordered, state)

    def _immediate_score(self, state: SearchState, action: Edge, depth: Dict[int, int]) -> float:
        u, v = action
        hier = max(0.0, self.volumes[v] / (self.volumes[u] + self.rc.epsilon_hier) - 1.0)
        return (self.rc.w_contact * self.graph.strength(u, v) - self.rc.w_hier * hier
                - self.rc.w_struct * (depth[u] + 1) ** 2 / self.n_nodes)

    def rollout(self, state: SearchState) -> Optional[SearchState]:
        """Greedy completion; None when a dead end is reached."""
        start = state.key
        if start in self.rollouts:
            return self.rollouts[start]
        depth = {self.base: 0}
        for u, v in state.edges:
            depth[v] = depth[u] + 1
        while not self._complete(state):
            actions = feasible_actions(state, self.graph, self.clusters)
            if not actions:
                self.rollouts[start] = None
                return None
            best_action, best_score = actions[0], self._immediate_score(state, actions[0], depth)
            for action in actions[1:]:
                score = self._immediate_score(state, action, depth)
                if score > best_score:
                    best_action, best_score = action, score
            state = apply_action(state, best_action, self.graph, self.clusters)
            depth[best_action[1]] = depth[best_action[0]] + 1
        self.rollouts[start] = state
        return state

    def _select(self, node: _Node) -> Tuple[Edge, _Node]:
        log_n = math.log(max(node.visits, 1))
        best = None
        for action in sorted(node.children):
            child = self.table[node.children[action]]
            if child.visits == 0:
                score = math.inf
            else:
                score = (child.value / child.visits
                         + self.sc.exploration_constant * math.sqrt(log_n / child.visits))
            if best is None or score > best[0]:
                best = (score, action, child)
        return best[1], best[2]

    # ---- main loop -------------------------------------------------------
    def iterate(self):
        node = self._node(SearchState.initial(self.base))
        path = [node]
        while True:
            if self._complete(node.state):
                break
            if node.untried:
                action = node.untried.pop()
                child = self._node(apply_action(node.state, action, self.graph, self.clusters))
                node.children[action] = child.state.key
                path.append(child)
                node = child
                break
            if not node.children:
                break  # dead end
            _, node = self._select(node)
            path.append(node)

        final = node.state if self._complete(node.state) else self.rollout(node.state)
        value = self.evaluate(final) if final is not None else 0.0
        for n in path:
            n.visits += 1
            n.value += value

    def run(self, warm_start: Optional[SearchState] = None) -> Optional[Tuple[float, SearchState]]:
        if warm_start is not None:
            self.evaluate(warm_start)
        iterations = range(self.sc.max_iterations)
        if self.sc.progress:
            iterations = tqdm(iterations, desc="MCTS", leave=False)
        for _ in iterations:
            self.iterate()
        if self.best is None:
            return None
        return self.best[0], self.best[2]


def _warm_start_state(tree: KinematicTree, graph: ConnectionGraph,
                      clusters: Optional[SymmetryClusters]) -> Optional[SearchState]:
    """Replay a tree as search actions; None if it violates the cluster constraint."""
    state = SearchState.initial(tree.root)
    try:
        for e in tree.breadth_first_edges():
            state = apply_action(state, e.key, graph, clusters)
    except InfeasibleAction:
        return None
    return state


def mcts_search(graph: ConnectionGraph, base: int, clusters: Optional[SymmetryClusters],
                reward_config: RewardConfig, search_config: SearchConfig,
                warm_start: Optional[KinematicTree] = None) -> KinematicTree:
    """
    Monte Carlo tree search over rooted spanning arborescences.

    The graph must already be connected (see attach_components). Returns the
    best complete tree seen in any expansion or rollout.

    Raises:
        SearchFailed: when no spanning tree satisfies the constraints
    """
    if base not in graph.nodes:
        raise ValueError(f"base {base} is not in the graph")
    start = _warm_start_state(warm_start, graph, clusters) if warm_start is not None else None

    def run_worker(offset: int):
        search = _Search(graph, base, clusters, reward_config, search_config, search_config.rng_seed + offset)
        return search.run(start)

    workers = search_config.workers
    if workers == 1:
        results = [run_worker(0)]
    else:
        results = Parallel(n_jobs=workers, prefer="threads")(delayed(run_worker)(i) for i in range(workers))

    best = None
    for result in results:
        if result is not None and (best is None or result[0] > best[0]):
            best = result
    if best is None:
        raise SearchFailed("no spanning tree satisfies the symmetry constraints")
    value, state = best
    logger.info(f"MCTS best reward {value:.6g} after {search_config.max_iterations} iterations "
                f"x {workers} worker(s)")
    return state_tree(state, base, graph)


# --- EXHAUSTIVE ---

def enumerate_arborescences(graph: ConnectionGraph, root: int,
                            clusters: Optional[SymmetryClusters] = None) -> Iterator[KinematicTree]:
    """Every constraint-respecting spanning arborescence rooted at `root`, each exactly once."""
    n = len(graph)
    seen = set()
    stack = [SearchState.initial(root)]
    while stack:
        state = stack.pop()
        if state.key in seen:
            continue
        seen.add(state.key)
        if len(state.visited) == n:
            yield state_tree(state, root, graph)
            continue
        for action in reversed(feasible_actions(state, graph, clusters)):
            stack.append(apply_action(state, action, graph, clusters))


def exhaustive_search(graph: ConnectionGraph, base: int, clusters: Optional[SymmetryClusters],
                      reward_config: RewardConfig, max_nodes: int = 9) -> KinematicTree:
    """Brute-force argmax of the reward; ties go to the lexicographically smallest edge list."""
    if len(graph) > max_nodes:
        raise ValueError(f"exhaustive search is limited to {max_nodes} parts, got {len(graph)}")
    best = None
    count = 0
    for tree in enumerate_arborescences(graph, base, clusters):
        count += 1
        value = reward(tree, graph, graph, clusters, reward_config)
        key = (-value, tree.edge_keys())
        if best is None or key < best[0]:
            best = (key, tree)
    if best is None:
        raise SearchFailed("no spanning tree satisfies the symmetry constraints")
    logger.info(f"Exhaustive search scored {count} trees, best reward {-best[0][0]:.6g}")
    return best[1]
