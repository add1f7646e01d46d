import numpy as np
import pytest

from kinematic_tree import (
    InvalidTree, JointSpec, JointType, KinematicTree, TreeEdge, joints_from_dict, joints_to_dict, tree_from_edges,
)


@pytest.fixture
def small_tree() -> KinematicTree:
    #   0
    #  / \
    # 1   2
    #     |
    #     3
    return tree_from_edges(0, [0, 1, 2, 3], [(0, 2), (2, 3), (0, 1)])


def test_structure_queries(small_tree):
    assert small_tree.edge_keys() == [(0, 1), (0, 2), (2, 3)]
    assert small_tree.parent_of(3) == 2
    assert small_tree.parent_of(0) is None
    assert small_tree.children_of(0) == [1, 2]
    assert small_tree.depths() == {0: 0, 1: 1, 2: 1, 3: 2}
    assert small_tree.out_degree(0) == 2
    assert small_tree.postorder() == [1, 3, 2, 0]
    assert [e.key for e in small_tree.breadth_first_edges()] == [(0, 1), (0, 2), (2, 3)]


@pytest.mark.parametrize("edges", [
    [(0, 1), (1, 2), (2, 1)],   # two parents
    [(0, 1)],                   # node 2 unreachable
    [(0, 1), (1, 0), (0, 2)],   # root with a parent
])
def test_invalid_trees_are_rejected(edges):
    with pytest.raises(InvalidTree):
        tree_from_edges(0, [0, 1, 2], edges)


def test_subtree_mass_and_centers(small_tree):
    masses = {0: 1.0, 1: 2.0, 2: 3.0, 3: 4.0}
    centroids = {0: [0, 0, 0], 1: [1, 0, 0], 2: [0, 1, 0], 3: [0, 2, 0]}
    assert small_tree.subtree_mass(masses) == {0: 10.0, 1: 2.0, 2: 7.0, 3: 4.0}
    total, center = small_tree.subtree_centers(masses, centroids)
    np.testing.assert_allclose(center[2], [0.0, 11.0 / 7.0, 0.0])
    np.testing.assert_allclose(center[0], [0.2, 1.1, 0.0])


def test_joint_spec_invariants():
    with pytest.raises(ValueError):
        JointSpec(JointType.REVOLUTE, [0, 0, 0], axis=[0, 0, 1])
    with pytest.raises(ValueError):
        JointSpec(JointType.PRISMATIC, [0, 0, 0], axis=[0, 0, 1], pivot=[0, 0, 0])
    with pytest.raises(ValueError):
        JointSpec(JointType.FIXED, [0, 0, 0], axis=[0, 0, 1])
    spec = JointSpec(JointType.PRISMATIC, [0, 0, 0], axis=[0, 0, 2])
    np.testing.assert_allclose(spec.axis, [0, 0, 1])


def test_tree_dump_round_trip(tmp_path, small_tree):
    path = small_tree.dump_json(tmp_path / "tree.json", {"struct": 0.5, "total": 0.5})
    loaded = KinematicTree.load_json(path)
    assert loaded.edge_keys() == small_tree.edge_keys()
    assert loaded.root == 0
    assert (tmp_path / "tree.json").read_text().endswith("}\n")


def test_joint_dump_round_trip():
    joints = {
        (0, 1): JointSpec(JointType.REVOLUTE, [1, 0, 0], axis=[0, 0, 1], pivot=[0.5, 0, 0], score=0.9,
                          lower=-1.5, upper=1.5),
        (0, 2): JointSpec(JointType.PRISMATIC, [0, 1, 0], axis=[1, 0, 0]),
    }
    entries = joints_to_dict(joints)
    assert [(e["parent"], e["child"]) for e in entries] == [(0, 1), (0, 2)]
    loaded = joints_from_dict(entries)
    assert loaded[(0, 1)].joint_type is JointType.REVOLUTE
    assert loaded[(0, 1)].upper == 1.5
    np.testing.assert_allclose(loaded[(0, 1)].pivot, [0.5, 0, 0])
    assert loaded[(0, 2)].pivot is None


def test_with_joints_replaces_edge_specs(small_tree):
    spec = JointSpec(JointType.PRISMATIC, [0, 0, 0], axis=[1, 0, 0])
    updated = small_tree.with_joints({(2, 3): spec})
    assert updated.edge(2, 3).joint is spec
    assert small_tree.edge(2, 3).joint.joint_type is JointType.FIXED


def test_tree_edge_key():
    edge = TreeEdge(3, 5, JointSpec.fixed([0, 0, 0]), virtual=True)
    assert edge.key == (3, 5)
