import itertools

import networkx as nx
import numpy as np
import pytest
from pydantic import ValidationError

from contact_graph import ConnectionGraph, UnreachableComponent
from kinematic_tree import tree_from_edges
from part_assembly import SymmetryClusters
from topology_search import (
    EmptyGraph, InfeasibleAction, RewardConfig, SearchConfig, SearchFailed, SearchState, apply_action, bfs_orient,
    enumerate_arborescences, exhaustive_search, feasible_actions, mcts_search, reward, reward_breakdown,
    reward_contact, reward_hier, reward_static, reward_struct, reward_sym, select_base,
)


def make_graph(n, edges, strengths=None, centroids=None, volumes=None) -> ConnectionGraph:
    graph = ConnectionGraph(epsilon=0.1)
    for i in range(n):
        c = centroids[i] if centroids is not None else (float(i), 0.0, 0.0)
        graph.add_part(i, c, volumes[i] if volumes is not None else 1.0)
    for k, (u, v) in enumerate(edges):
        s = strengths[k] if strengths is not None else 1.0
        graph.add_contact(u, v, 0.1 * (1.0 - s), s)
    return graph


def random_connected_graph(rng, n, max_edges=10) -> ConnectionGraph:
    edges = {(int(rng.integers(0, i)), i) for i in range(1, n)}
    candidates = [e for e in itertools.combinations(range(n), 2) if e not in edges]
    extra = int(rng.integers(0, max(1, min(max_edges - len(edges), len(candidates)) + 1)))
    for idx in rng.permutation(len(candidates))[:extra]:
        edges.add(candidates[idx])
    edges = sorted(edges)
    return make_graph(
        n, edges,
        strengths=rng.uniform(0.05, 1.0, size=len(edges)),
        centroids=rng.uniform(-1.0, 1.0, size=(n, 3)),
        volumes=rng.uniform(0.1, 2.0, size=n),
    )


# --- BASE + BFS ---

def test_select_base():
    assert select_base(make_graph(5, [(0, 1), (0, 2), (0, 3), (0, 4)])) == 0
    assert select_base(make_graph(4, [(0, 1), (1, 2), (2, 3)])) == 1
    assert select_base(make_graph(1, [])) == 0
    with pytest.raises(EmptyGraph):
        select_base(ConnectionGraph())


def test_bfs_orient_triangle():
    tree, broken = bfs_orient(make_graph(3, [(0, 1), (1, 2), (0, 2)]), 0, d_max=10.0)
    assert tree.edge_keys() == [(0, 1), (0, 2)]
    assert broken == [(1, 2)]
    np.testing.assert_allclose(tree.edge(0, 2).joint.origin, [2.0, 0.0, 0.0])


def test_bfs_orient_tree_has_no_broken_edges():
    tree, broken = bfs_orient(make_graph(4, [(0, 1), (1, 2), (1, 3)]), 1, d_max=10.0)
    assert tree.edge_keys() == [(1, 0), (1, 2), (1, 3)]
    assert broken == []


def test_bfs_orient_attaches_close_component():
    graph = make_graph(3, [(0, 1)], centroids=[(0, 0, 0), (0.05, 0, 0), (0.15, 0, 0)])
    tree, _ = bfs_orient(graph, 0, d_max=0.2)
    assert tree.edge_keys() == [(0, 1), (1, 2)]
    assert tree.edge(1, 2).virtual
    with pytest.raises(UnreachableComponent):
        bfs_orient(graph, 0, d_max=0.05)


# --- STATE ---

def test_feasible_actions_star_and_complete():
    star = make_graph(4, [(0, 1), (0, 2), (0, 3)])
    state = SearchState.initial(0)
    assert feasible_actions(state, star) == [(0, 1), (0, 2), (0, 3)]
    for action in [(0, 1), (0, 2), (0, 3)]:
        state = apply_action(state, action, star)
    assert feasible_actions(state, star) == []


def test_feasible_actions_respects_clusters():
    graph = make_graph(3, [(0, 1), (0, 2), (1, 2)])
    clusters = SymmetryClusters([[0], [1, 2]], 1e-3)
    state = apply_action(SearchState.initial(0), (0, 1), graph, clusters)
    assert feasible_actions(state, graph, clusters) == [(0, 2)]
    with pytest.raises(InfeasibleAction):
        apply_action(state, (1, 2), graph, clusters)


def test_apply_action_records_broken_edges():
    triangle = make_graph(3, [(0, 1), (1, 2), (0, 2)])
    s1 = apply_action(SearchState.initial(0), (0, 1), triangle)
    assert s1.broken == frozenset()
    s2 = apply_action(s1, (0, 2), triangle)
    assert s2.broken == {frozenset((1, 2))}
    assert s2.visited == {0, 1, 2}
    with pytest.raises(InfeasibleAction):
        apply_action(s1, (0, 1), triangle)


def test_state_key_ignores_insertion_order():
    star = make_graph(3, [(0, 1), (0, 2)])
    a = apply_action(apply_action(SearchState.initial(0), (0, 1), star), (0, 2), star)
    b = apply_action(apply_action(SearchState.initial(0), (0, 2), star), (0, 1), star)
    assert a.key == b.key


# --- REWARDS ---

def test_reward_struct_chain():
    chain = tree_from_edges(0, [0, 1, 2], [(0, 1), (1, 2)])
    config = RewardConfig(preferred_out_degree=1, edge_penalty=0.1)
    assert reward_struct(chain, config) == pytest.approx(1 / 2.2, abs=1e-9)
    longer = tree_from_edges(0, [0, 1, 2, 3], [(0, 1), (1, 2), (2, 3)])
    assert reward_struct(longer, config) < reward_struct(chain, config)


def test_reward_struct_single_node_is_guarded():
    single = tree_from_edges(0, [0], [])
    assert reward_struct(single, RewardConfig(preferred_out_degree=0)) == pytest.approx(1e9)


def test_reward_static_vertical_stack_is_stable():
    tree = tree_from_edges(0, [0, 1, 2], [(0, 1), (1, 2)])
    parts = {0: ([0, 0, 0], 1.0), 1: ([0, 0, -1], 1.0), 2: ([0, 0, -2], 1.0)}
    assert reward_static(tree, parts, RewardConfig()) == 1.0
    assert reward_static(tree_from_edges(0, [0], []), {0: ([0, 0, 0], 1.0)}, RewardConfig()) == 1.0


def test_reward_static_two_nodes_about_joint():
    tree = tree_from_edges(0, [0, 1], [(0, 1)])
    parts = {0: ([0, 0, 0], 1.0), 1: ([1, 0, 0], 1.0)}
    assert reward_static(tree, parts, RewardConfig(torque_reference="joint")) == pytest.approx(0.5)
    assert reward_static(tree, parts, RewardConfig(torque_reference="joint", sigma_tau=9.81 * 3)) == \
        pytest.approx(0.75)
    assert reward_static(tree, parts, RewardConfig()) == 1.0


def test_reward_contact():
    graph = make_graph(3, [(0, 1), (1, 2)], strengths=[1.0, 0.5])
    tree = tree_from_edges(0, [0, 1, 2], [(0, 1), (1, 2)])
    assert reward_contact(tree, graph) == pytest.approx(0.75)

    virtual = make_graph(2, [])
    virtual.add_contact(0, 1, 0.1, 0.0, virtual=True)
    assert reward_contact(tree_from_edges(0, [0, 1], [(0, 1)]), virtual) == 0.0


@pytest.mark.parametrize("edges,clusters,expected", [
    ([(0, 1), (0, 2)], [[0], [1, 2]], 2.0),
    ([(0, 1), (1, 2)], [[0], [1, 2]], 0.8 + 1.0 - 1.0 / (1.0 + 1e-6)),
    ([(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)], [[0], [1], [2], [3, 4, 5, 6]],
     1.0 + 1.0 - 1.0 / (3.0 + 1e-6)),
])
def test_reward_sym(edges, clusters, expected):
    nodes = sorted({n for e in edges for n in e})
    tree = tree_from_edges(0, nodes, edges)
    assert reward_sym(tree, SymmetryClusters(clusters, 1e-3), RewardConfig()) == pytest.approx(expected, abs=1e-9)


def test_reward_sym_without_clusters_is_neutral():
    tree = tree_from_edges(0, [0, 1], [(0, 1)])
    assert reward_sym(tree, None, RewardConfig()) == 1.0
    assert reward_sym(tree, SymmetryClusters.singletons([0, 1]), RewardConfig()) == 1.0


def test_reward_hier():
    tree = tree_from_edges(0, [0, 1], [(0, 1)])
    assert reward_hier(tree, {0: ([0, 0, 0], 1.0), 1: ([1, 0, 0], 2.0)}, RewardConfig()) == \
        pytest.approx(0.5, abs=1e-6)
    assert reward_hier(tree, {0: ([0, 0, 0], 1.0), 1: ([1, 0, 0], 1.0)}, RewardConfig()) == 1.0
    assert reward_hier(tree, {0: ([0, 0, 0], 2.0), 1: ([1, 0, 0], 1.0)}, RewardConfig()) == 1.0


def test_reward_weighting():
    graph = make_graph(3, [(0, 1), (1, 2)], strengths=[1.0, 0.5], volumes=[3.0, 2.0, 1.0])
    tree = tree_from_edges(0, [0, 1, 2], [(0, 1), (1, 2)], graph.centroids())
    only_contact = RewardConfig().with_weights([0, 0, 1, 0, 0])
    assert reward(tree, graph, graph, None, only_contact) == pytest.approx(reward_contact(tree, graph))

    config = RewardConfig()
    doubled = config.with_weights([2, 2, 2, 2, 2])
    assert reward(tree, graph, graph, None, doubled) == pytest.approx(2 * reward(tree, graph, graph, None, config))

    terms = reward_breakdown(tree, graph, graph, None, config)
    assert terms["total"] == pytest.approx(sum(v for k, v in terms.items() if k != "total"))
    assert terms["total"] == pytest.approx(reward(tree, graph, graph, None, config))


def test_reward_ignores_part_numbering():
    rng = np.random.default_rng(8)
    config = RewardConfig()
    for _ in range(20):
        n = int(rng.integers(3, 7))
        graph = random_connected_graph(rng, n)
        trees = list(enumerate_arborescences(graph, 0))
        tree = trees[int(rng.integers(len(trees)))]
        clusters = SymmetryClusters([[0], [1, 2]] + [[i] for i in range(3, n)], 1e-3)

        new_id = [int(x) for x in rng.permutation(n)]
        renamed = ConnectionGraph(epsilon=graph.epsilon)
        for old in sorted(range(n), key=lambda i: new_id[i]):
            renamed.add_part(new_id[old], graph.centroid(old), graph.volume(old))
        for u, v in graph.edges():
            renamed.add_contact(new_id[u], new_id[v], graph.distance(u, v), graph.strength(u, v))
        renamed_tree = tree_from_edges(new_id[tree.root], range(n),
                                       [(new_id[u], new_id[v]) for u, v in tree.edge_keys()],
                                       renamed.centroids())
        renamed_clusters = SymmetryClusters([sorted(new_id[m] for m in c) for c in clusters.clusters], 1e-3)

        expected = reward_breakdown(tree, graph, graph, clusters, config)
        actual = reward_breakdown(renamed_tree, renamed, renamed, renamed_clusters, config)
        for term, value in expected.items():
            assert actual[term] == pytest.approx(value, abs=1e-9), term


def test_reward_config_validation():
    with pytest.raises(ValidationError):
        RewardConfig(w_struct=0, w_static=0, w_contact=0, w_sym=0, w_hier=0)
    with pytest.raises(ValueError):
        RewardConfig().with_weights([1, 1])


# --- SEARCH ---

def test_enumerate_arborescences_matches_matrix_tree_count():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n = int(rng.integers(2, 7))
        graph = random_connected_graph(rng, n, max_edges=9)
        trees = [tuple(t.edge_keys()) for t in enumerate_arborescences(graph, 0)]
        assert len(set(trees)) == len(trees)

        # arborescences rooted at 0 of the symmetric digraph = spanning trees of the undirected graph
        laplacian = nx.laplacian_matrix(graph.graph, nodelist=graph.nodes).toarray().astype(float)
        expected = int(round(np.linalg.det(laplacian[1:, 1:])))
        assert len(trees) == expected


def test_mcts_on_tree_graph_returns_unique_orientation():
    graph = make_graph(4, [(0, 1), (1, 2), (1, 3)])
    tree = mcts_search(graph, 1, None, RewardConfig(), SearchConfig(max_iterations=50))
    assert tree.edge_keys() == [(1, 0), (1, 2), (1, 3)]
    bfs_tree, _ = bfs_orient(graph, 1, d_max=10.0)
    assert bfs_tree.edge_keys() == tree.edge_keys()


def test_mcts_matches_exhaustive_on_cycle():
    graph = make_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)], strengths=[1.0, 0.2, 0.9, 0.4],
                       volumes=[4.0, 1.0, 2.0, 1.5])
    config = RewardConfig()
    best = exhaustive_search(graph, 0, None, config)
    found = mcts_search(graph, 0, None, config, SearchConfig(max_iterations=500))
    assert found.edge_keys() == best.edge_keys()


def test_mcts_keeps_legs_on_torso():
    graph = make_graph(3, [(0, 1), (0, 2), (1, 2)], volumes=[5.0, 1.0, 1.0])
    clusters = SymmetryClusters([[0], [1, 2]], 1e-3)
    tree = mcts_search(graph, 0, clusters, RewardConfig(), SearchConfig(max_iterations=200))
    assert tree.edge_keys() == [(0, 1), (0, 2)]


def test_search_fails_when_constraints_block_every_tree():
    graph = make_graph(3, [(0, 1), (1, 2)])
    clusters = SymmetryClusters([[0], [1, 2]], 1e-3)
    with pytest.raises(SearchFailed):
        mcts_search(graph, 0, clusters, RewardConfig(), SearchConfig(max_iterations=20))
    with pytest.raises(SearchFailed):
        exhaustive_search(graph, 0, clusters, RewardConfig())


def test_mcts_is_deterministic_and_parallel_safe():
    rng = np.random.default_rng(5)
    graph = random_connected_graph(rng, 6)
    config = RewardConfig()
    a = mcts_search(graph, 0, None, config, SearchConfig(max_iterations=300, rng_seed=4))
    b = mcts_search(graph, 0, None, config, SearchConfig(max_iterations=300, rng_seed=4))
    assert a.edge_keys() == b.edge_keys()
    c = mcts_search(graph, 0, None, config, SearchConfig(max_iterations=300, rng_seed=4, workers=2))
    assert reward(c, graph, graph, None, config) >= reward(a, graph, graph, None, config) - 1e-12


def test_warm_start_is_never_beaten_by_worse_tree():
    rng = np.random.default_rng(8)
    graph = random_connected_graph(rng, 6)
    config = RewardConfig()
    warm, _ = bfs_orient(graph, 0, d_max=10.0)
    tree = mcts_search(graph, 0, None, config, SearchConfig(max_iterations=1), warm_start=warm)
    assert reward(tree, graph, graph, None, config) >= reward(warm, graph, graph, None, config) - 1e-12


def test_exhaustive_search_limits_size():
    graph = make_graph(10, [(i, i + 1) for i in range(9)])
    with pytest.raises(ValueError):
        exhaustive_search(graph, 0, None, RewardConfig())


@pytest.mark.slow
def test_mcts_attains_exhaustive_optimum_on_random_graphs():
    rng = np.random.default_rng(2024)
    config = RewardConfig()
    hits = 0
    for trial in range(50):
        n = int(rng.integers(3, 8))
        graph = random_connected_graph(rng, n)
        base = select_base(graph)
        best = reward(exhaustive_search(graph, base, None, config), graph, graph, None, config)
        found = mcts_search(graph, base, None, config, SearchConfig(max_iterations=2000, rng_seed=trial))
        hits += abs(reward(found, graph, graph, None, config) - best) <= 1e-9
    assert hits >= 48
