import json
import math
from functools import lru_cache

import numpy as np
import pandas as pd
import pytest
from scipy.spatial.transform import Rotation

from kinematic_metrics import (
    CorrespondenceMissing, MetricsReport, NonUnitAxis, axis_angle_error, axis_position_error, evaluate,
    summarize_reports, tree_edit_distance,
)
from kinematic_tree import JointSpec, JointType, tree_from_edges


def revolute(axis, pivot):
    return JointSpec(JointType.REVOLUTE, [0, 0, 0], axis=axis, pivot=pivot)


def prismatic(axis):
    return JointSpec(JointType.PRISMATIC, [0, 0, 0], axis=axis)


# --- JOINT METRICS ---

def test_axis_angle_error_ignores_sign():
    tilted = [math.sin(math.radians(10)), 0.0, math.cos(math.radians(10))]
    assert axis_angle_error(tilted, [0, 0, 1]) == pytest.approx(10.0)
    assert axis_angle_error([0, 0, -1], [0, 0, 1]) == 0.0
    assert axis_angle_error([1, 0, 0], [0, 1, 0]) == pytest.approx(90.0)


def test_axis_angle_error_requires_unit_axes():
    with pytest.raises(NonUnitAxis):
        axis_angle_error([0, 0, 2], [0, 0, 1])
    with pytest.raises(NonUnitAxis):
        axis_angle_error([0, 0, 1], [1, 0])


def test_axis_position_error_modes():
    assert axis_position_error([0, 0, 3], [0, 0, 0]) == pytest.approx(3.0)
    assert axis_position_error([1, 0, 3], [0, 0, 0], [0, 0, 1], mode="line") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        axis_position_error([0, 0, 0], [0, 0, 0], mode="line")
    with pytest.raises(ValueError):
        axis_position_error([0, 0, 0], [0, 0, 0], mode="angular")


# --- TREE EDIT DISTANCE ---

def as_forest(tree, node=None):
    node = tree.root if node is None else node
    return ((node, tuple(as_forest(tree, c)[0] for c in tree.children_of(node))),)


@lru_cache(maxsize=None)
def forest_distance(f, g):
    """Unit-cost ordered forest edit distance by the rightmost-root recursion."""
    if not f and not g:
        return 0
    if not f:
        return sum(1 + forest_distance((), t[1]) for t in g)
    if not g:
        return sum(1 + forest_distance(t[1], ()) for t in f)
    (lv, cv), (lw, cw) = f[-1], g[-1]
    return min(
        forest_distance(f[:-1] + cv, g) + 1,
        forest_distance(f, g[:-1] + cw) + 1,
        forest_distance(f[:-1], g[:-1]) + forest_distance(cv, cw) + (lv != lw),
    )


def random_tree(rng, n):
    nodes = [int(x) for x in rng.permutation(n)]
    edges = [(nodes[int(rng.integers(i))], nodes[i]) for i in range(1, n)]
    return tree_from_edges(nodes[0], sorted(nodes), edges)


def test_tree_edit_distance_small_cases():
    chain = tree_from_edges(0, [0, 1, 2], [(0, 1), (1, 2)])
    star = tree_from_edges(0, [0, 1, 2], [(0, 1), (0, 2)])
    assert tree_edit_distance(chain, chain) == 0
    # delete 1 and re-insert it as a leaf
    assert tree_edit_distance(chain, star) == 2
    flipped = tree_from_edges(2, [0, 1, 2], [(2, 1), (1, 0)])
    assert tree_edit_distance(chain, flipped) == 2


def test_tree_edit_distance_matches_forest_recursion():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a = random_tree(rng, int(rng.integers(1, 6)))
        b = random_tree(rng, int(rng.integers(1, 6)))
        assert tree_edit_distance(a, b) == forest_distance(as_forest(a), as_forest(b))


def test_tree_edit_distance_is_a_metric():
    rng = np.random.default_rng(12)
    for _ in range(60):
        a, b, c = (random_tree(rng, int(rng.integers(1, 6))) for _ in range(3))
        assert tree_edit_distance(a, a) == 0
        assert tree_edit_distance(a, b) == tree_edit_distance(b, a)
        assert tree_edit_distance(a, c) <= tree_edit_distance(a, b) + tree_edit_distance(b, c)


# --- EVALUATE ---

@pytest.fixture
def gt():
    tree = tree_from_edges(0, [0, 1, 2, 3], [(0, 1), (0, 2), (0, 3)])
    joints = {
        (0, 1): revolute([0, 0, 1], [0, 0, 0.5]),
        (0, 2): prismatic([1, 0, 0]),
        (0, 3): JointSpec.fixed([0, 0, 0]),
    }
    return tree, joints


def test_evaluate_matched_joints(gt):
    gt_tree, gt_joints = gt
    tilt = math.radians(10)
    pred = {
        (0, 1): revolute([math.sin(tilt), 0, math.cos(tilt)], [0.3, 0.4, 1.5]),
        (0, 2): prismatic([0, 1, 0]),
        (0, 3): JointSpec.fixed([0, 0, 0]),
    }
    report = evaluate(gt_tree, pred, gt_tree, gt_joints, diagonal=2.0, name="cabinet")
    rows = {(j.parent, j.child): j for j in report.joints}

    assert set(rows) == {(0, 1), (0, 2)}
    assert rows[(0, 1)].axis_angle_error == pytest.approx(10.0)
    assert rows[(0, 1)].axis_position_error == pytest.approx(math.sqrt(0.09 + 0.16 + 1.0))
    assert rows[(0, 1)].axis_line_error == pytest.approx(0.5)
    assert rows[(0, 2)].axis_angle_error == pytest.approx(90.0)
    assert rows[(0, 2)].axis_position_error is None
    assert report.tree_edit_distance == 0
    assert report.aggregates["type_accuracy"] == 1.0
    assert report.aggregates["mean_axis_angle_error"] == pytest.approx(50.0)
    assert report.aggregates["mean_axis_position_error"] == pytest.approx(math.sqrt(1.25))


def test_evaluate_unmatched_joints(gt):
    gt_tree, gt_joints = gt
    pred = {
        (0, 1): JointSpec.fixed([0, 0, 0]),
        (0, 2): prismatic([1, 0, 0]),
        (0, 3): revolute([1, 0, 0], [0, 0, 0]),
    }
    report = evaluate(gt_tree, pred, gt_tree, gt_joints, diagonal=2.0)
    rows = {(j.parent, j.child): j for j in report.joints}

    missed = rows[(0, 1)]
    assert (missed.gt_type, missed.pred_type, missed.matched) == ("revolute", "fixed", False)
    assert missed.axis_angle_error == 90.0 and missed.axis_line_error == 2.0
    spurious = rows[(0, 3)]
    assert (spurious.gt_type, spurious.pred_type) == ("fixed", "revolute")
    assert spurious.axis_position_error == 2.0
    assert report.aggregates["type_accuracy"] == pytest.approx(1 / 3)


def test_evaluate_structure_mismatch(gt):
    gt_tree, gt_joints = gt
    pred_tree = tree_from_edges(0, [0, 1, 2, 3], [(0, 1), (1, 2), (2, 3)])
    report = evaluate(pred_tree, {}, gt_tree, gt_joints, diagonal=1.0)
    assert report.tree_edit_distance == 4
    assert all(not j.matched for j in report.joints)

    other = tree_from_edges(0, [0, 1, 5], [(0, 1), (0, 5)])
    with pytest.raises(CorrespondenceMissing):
        evaluate(other, {}, gt_tree, gt_joints, diagonal=1.0)


def test_report_json_and_csv(tmp_path, gt):
    gt_tree, gt_joints = gt
    report = evaluate(gt_tree, gt_joints, gt_tree, gt_joints, diagonal=1.0, name="box")
    json_path = report.write_json(tmp_path / "metrics.json")
    data = json.loads(json_path.read_text(encoding="utf-8"))
    assert MetricsReport.from_dict(data).to_dict() == report.to_dict()
    assert data["aggregates"]["mean_axis_angle_error"] == 0.0

    frame = pd.read_csv(report.write_csv(tmp_path / "metrics.csv"))
    assert list(frame["row"]) == ["joint", "joint", "summary"]
    assert frame.loc[2, "tree_edit_distance"] == 0


def test_summarize_reports_pools_joints_and_objects(gt):
    gt_tree, gt_joints = gt
    perfect = evaluate(gt_tree, gt_joints, gt_tree, gt_joints, diagonal=1.0)
    lone = tree_from_edges(0, [0, 1], [(0, 1)])
    off = evaluate(lone, {(0, 1): revolute([1, 0, 0], [0, 0, 0.5])},
                   lone, {(0, 1): revolute([0, 0, 1], [0, 0, 0.5])}, diagonal=1.0)
    summary = summarize_reports([perfect, off])
    assert summary["per_joint"]["mean_axis_angle_error"] == pytest.approx(30.0)
    assert summary["per_object"]["mean_axis_angle_error"] == pytest.approx(45.0)
    assert summary["per_object"]["n_objects"] == 2.0
    assert summary["per_joint"]["n_joints"] == 3.0


def moved(spec: JointSpec, rotation: np.ndarray, shift: np.ndarray) -> JointSpec:
    return JointSpec(
        spec.joint_type, rotation @ spec.origin,
        axis=None if spec.axis is None else rotation @ spec.axis,
        pivot=None if spec.pivot is None else rotation @ spec.pivot + shift,
        lower=spec.lower, upper=spec.upper,
    )


def test_metrics_ignore_a_shared_rigid_motion(gt):
    gt_tree, gt_joints = gt
    tilt = math.radians(25)
    pred = {
        (0, 1): revolute([math.sin(tilt), 0, math.cos(tilt)], [0.3, -0.4, 1.2]),
        (0, 2): prismatic([0, 0.6, 0.8]),
        (0, 3): revolute([1, 0, 0], [1, 1, 1]),
    }
    rotation = Rotation.from_rotvec([0.4, 1.3, -0.9]).as_matrix()
    shift = np.array([3.0, -2.0, 7.5])
    before = evaluate(gt_tree, pred, gt_tree, gt_joints, diagonal=2.0)
    after = evaluate(gt_tree, {k: moved(s, rotation, shift) for k, s in pred.items()},
                     gt_tree, {k: moved(s, rotation, shift) for k, s in gt_joints.items()}, diagonal=2.0)

    for a, b in zip(before.joints, after.joints):
        assert (a.parent, a.child, a.matched) == (b.parent, b.child, b.matched)
        for name in ("axis_angle_error", "axis_position_error", "axis_line_error"):
            x, y = getattr(a, name), getattr(b, name)
            assert (x is None) == (y is None)
            if x is not None:
                assert y == pytest.approx(x, abs=1e-9), name
