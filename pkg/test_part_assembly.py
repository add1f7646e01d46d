import json
from pathlib import Path

import numpy as np
import pytest
import trimesh
from scipy.spatial.transform import Rotation

from conftest import make_box
from part_assembly import (
    ManifestError, MeshFormatError, PartRejected, RejectionReason, assembly_diagonal, chamfer_distance,
    cluster_symmetric_parts, EmptyPointSet, ground_truth_tree, load_assembly, load_manifest, load_mesh,
    robust_volume, validate_part,
)


def write_obj(path: Path, mesh: trimesh.Trimesh) -> Path:
    lines = [f"v {x} {y} {z}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_manifest(path: Path, data) -> Path:
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


# --- MESH LOADING ---

def test_load_obj_with_slashes_and_negative_indices(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 -1/1\n", encoding="utf-8")
    mesh = load_mesh(path)
    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_load_obj_rejects_quads(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n", encoding="utf-8")
    with pytest.raises(MeshFormatError):
        load_mesh(path)


def test_load_mesh_rejects_unknown_format(tmp_path):
    path = tmp_path / "part.stl"
    path.write_text("solid x\nendsolid x\n", encoding="utf-8")
    with pytest.raises(MeshFormatError):
        load_mesh(path)


def test_load_ply_round_trip(tmp_path):
    mesh = trimesh.creation.box(extents=(1, 1, 1))
    path = tmp_path / "box.ply"
    path.write_bytes(trimesh.exchange.ply.export_ply(mesh, encoding="binary"))
    loaded = load_mesh(path)
    assert len(loaded.faces) == 12


# --- VALIDATION ---

def test_validate_part_accepts_box():
    part = make_box((0, 0, 0), (1, 2, 3))
    np.testing.assert_allclose(part.centroid, [0.5, 1.0, 1.5], atol=1e-12)
    assert part.robust_volume == pytest.approx(6.0)
    np.testing.assert_allclose(part.aabb_extents, [1, 2, 3])


def test_validate_part_too_few_vertices():
    mesh = trimesh.Trimesh(vertices=[[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
                           faces=[[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]], process=False)
    with pytest.raises(PartRejected) as info:
        validate_part(mesh, min_vertices=10)
    assert info.value.reason is RejectionReason.TOO_FEW_VERTICES


def test_validate_part_flat_mesh():
    mesh = trimesh.creation.box(extents=(1.0, 1.0, 1e-6)).subdivide()
    with pytest.raises(PartRejected) as info:
        validate_part(mesh, min_vertices=3)
    assert info.value.reason is RejectionReason.DEGENERATE_SPREAD


def test_validate_part_bad_face_index():
    box = trimesh.creation.box(extents=(1, 1, 1)).subdivide()
    faces = np.asarray(box.faces).copy()
    faces[0, 0] = len(box.vertices) + 5
    mesh = trimesh.Trimesh(vertices=box.vertices, faces=faces, process=False, validate=False)
    with pytest.raises(PartRejected) as info:
        validate_part(mesh)
    assert info.value.reason is RejectionReason.INVALID_FACES


def test_robust_volume_of_open_box_is_close():
    box = trimesh.creation.box(extents=(1, 1, 1))
    open_box = trimesh.Trimesh(box.vertices, box.faces[:-2], process=False)
    assert robust_volume(open_box, resolution=24) == pytest.approx(1.0, rel=0.2)


def test_assembly_diagonal(stacked_boxes):
    assert assembly_diagonal(stacked_boxes) == pytest.approx(np.sqrt(36 + 1 + 4))


# --- MANIFEST / INGEST ---

def test_load_manifest_missing_mesh(tmp_path):
    path = write_manifest(tmp_path / "manifest.json", {"parts": [{"mesh": "nope.obj"}]})
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_load_manifest_rejects_unknown_keys(tmp_path):
    write_obj(tmp_path / "a.obj", trimesh.creation.box(extents=(1, 1, 1)).subdivide())
    path = write_manifest(tmp_path / "manifest.json", {"parts": [{"mesh": "a.obj"}], "colour": "red"})
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_load_manifest_checks_ground_truth_ids(tmp_path):
    write_obj(tmp_path / "a.obj", trimesh.creation.box(extents=(1, 1, 1)).subdivide())
    path = write_manifest(tmp_path / "manifest.json", {
        "parts": [{"mesh": "a.obj"}],
        "ground_truth": {"root": 0, "edges": [{"parent": 0, "child": 3, "type": "fixed"}]},
    })
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_load_assembly_lenient_skips_bad_part(tmp_path):
    write_obj(tmp_path / "good.obj", trimesh.creation.box(extents=(1, 1, 1)).subdivide())
    write_obj(tmp_path / "flat.obj", trimesh.creation.box(extents=(1, 1, 1e-7)).subdivide())
    write_obj(tmp_path / "good2.obj", trimesh.creation.box(bounds=[[0, 0, 0.5], [1, 1, 1.5]]).subdivide())
    path = write_manifest(tmp_path / "manifest.json",
                          {"parts": [{"mesh": "good.obj"}, {"mesh": "flat.obj"}, {"mesh": "good2.obj"}],
                           "units_scale": 2.0})
    parts, report = load_assembly(load_manifest(path))
    assert [p.id for p in parts] == [0, 1]
    assert report.accepted == {0: 0, 2: 1}
    assert report.rejected[0]["reason"] == "DegenerateSpread"
    assert parts[0].aabb_extents == pytest.approx([2.0, 2.0, 2.0])


def test_load_assembly_strict_raises(tmp_path):
    write_obj(tmp_path / "flat.obj", trimesh.creation.box(extents=(1, 1, 1e-7)).subdivide())
    path = write_manifest(tmp_path / "manifest.json", {"parts": [{"mesh": "flat.obj"}]})
    with pytest.raises(PartRejected):
        load_assembly(load_manifest(path), strict=True)


def test_load_assembly_all_rejected(tmp_path):
    write_obj(tmp_path / "flat.obj", trimesh.creation.box(extents=(1, 1, 1e-7)).subdivide())
    path = write_manifest(tmp_path / "manifest.json", {"parts": [{"mesh": "flat.obj"}]})
    with pytest.raises(ManifestError):
        load_assembly(load_manifest(path))


def test_ground_truth_tree_from_synthetic_manifest(door_manifest):
    manifest = load_manifest(door_manifest)
    tree = ground_truth_tree(manifest)
    assert tree.root == 0
    assert tree.edge_keys() == [(0, 1)]
    spec = tree.edge(0, 1).joint
    assert spec.joint_type.value == "revolute"
    np.testing.assert_allclose(spec.axis, [0, 0, 1])


# --- SYMMETRY ---

def test_chamfer_distance_identity_and_shift():
    a = np.random.default_rng(0).uniform(size=(50, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance(a, a + [10.0, 0, 0]) > 100.0
    with pytest.raises(EmptyPointSet):
        chamfer_distance(a, np.zeros((0, 3)))


def test_chamfer_distance_is_symmetric_and_rigid_invariant():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(200, 3))
    b = rng.normal(scale=0.7, size=(150, 3))
    assert chamfer_distance(a, b) == chamfer_distance(b, a)

    rotation = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
    shift = np.array([2.0, -5.0, 0.25])
    moved = chamfer_distance(a @ rotation.T + shift, b @ rotation.T + shift)
    assert moved == pytest.approx(chamfer_distance(a, b), rel=1e-9)


def test_cluster_symmetric_parts_groups_translated_copies():
    parts = [
        make_box((0, 0, 0), (1, 1, 1), part_id=0),
        make_box((5, 0, 0), (6, 1, 1), part_id=1),
        make_box((0, 3, 0), (2, 4, 1), part_id=2),
    ]
    clusters = cluster_symmetric_parts(parts, threshold=1e-3, samples=512)
    assert clusters.clusters == [[0, 1], [2]]
    assert clusters.same_multi_cluster(0, 1)
    assert not clusters.same_multi_cluster(0, 2)


def test_cluster_symmetric_parts_rejects_bad_threshold(stacked_boxes):
    with pytest.raises(ValueError):
        cluster_symmetric_parts(stacked_boxes, threshold=0.0)
