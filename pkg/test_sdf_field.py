import numpy as np
import pytest
import trimesh

from conftest import make_box
from part_assembly import validate_part
from sdf_field import (
    SdfCacheError, build_all_sdfs, build_sdf, grid_layout, load_sdf_cache, sample_tiers, save_sdf_cache,
    validate_sdf,
)


@pytest.fixture(scope="module")
def sphere_field():
    part = validate_part(trimesh.creation.icosphere(subdivisions=3, radius=1.0), voxel_resolution=16)
    return part, build_sdf(part, resolution=32)


def test_grid_layout_is_cubic_and_centered():
    origin, cell, counts = grid_layout(np.array([[0.0, 0.0, 0.0], [2.0, 1.0, 0.5]]), 33, 0.0)
    assert cell == pytest.approx(2.0 / 32)
    assert counts[0] == 33 and min(counts) >= 16
    upper = origin + (np.asarray(counts) - 1) * cell
    np.testing.assert_allclose(0.5 * (origin + upper), [1.0, 0.5, 0.25])


def test_build_sdf_rejects_low_resolution(unit_box):
    with pytest.raises(ValueError):
        build_sdf(unit_box, resolution=8)


def test_sign_convention(unit_box):
    field = build_sdf(unit_box, resolution=24)
    values = field.query(np.array([[0.0, 0.0, 0.0], [0.9, 0.0, 0.0]]))
    assert values[0] == pytest.approx(-0.5, abs=field.cell_size)
    assert values[1] == pytest.approx(0.4, abs=field.cell_size)


def box_distance(points, half=0.5):
    q = np.abs(points) - half
    return np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)


@pytest.fixture(scope="module")
def box_field():
    return build_sdf(make_box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5)), resolution=32)


def test_sign_agrees_with_inside_test_away_from_surface(box_field):
    rng = np.random.default_rng(5)
    points = rng.uniform(box_field.origin, box_field.upper, size=(10000, 3))
    exact = box_distance(points)
    far = np.abs(exact) > 1.5 * box_field.cell_size
    assert far.sum() > 5000
    values = box_field.query(points[far])
    np.testing.assert_array_equal(np.sign(values), np.sign(exact[far]))


def test_query_is_lipschitz_up_to_grid_error(box_field):
    rng = np.random.default_rng(6)
    x = rng.uniform(box_field.origin, box_field.upper, size=(2000, 3))
    y = rng.uniform(box_field.origin, box_field.upper, size=(2000, 3))
    # short pairs too, where the grid error dominates
    y[:1000] = np.clip(x[:1000] + rng.normal(scale=box_field.cell_size, size=(1000, 3)),
                       box_field.origin, box_field.upper)
    gap = np.abs(box_field.query(x) - box_field.query(y))
    assert np.all(gap <= np.linalg.norm(x - y, axis=1) + 2 * box_field.cell_size)


def test_query_outside_grid_adds_box_distance(unit_box):
    field = build_sdf(unit_box, resolution=24)
    edge = np.array([field.upper[0], 0.0, 0.0])
    far = edge + np.array([1.0, 0.0, 0.0])
    assert field.query(far[None])[0] == pytest.approx(field.query(edge[None])[0] + 1.0)
    assert field.gradient(far[None])[0, 0] == pytest.approx(1.0)


def test_icosphere_surface_values(sphere_field):
    part, field = sphere_field
    tiers = sample_tiers(part, (500, 500, 500), seed=1)
    assert np.abs(field.query(tiers.surface_points)).mean() < field.cell_size


def test_icosphere_exterior_is_radial(sphere_field):
    _, field = sphere_field
    rng = np.random.default_rng(0)
    directions = rng.normal(size=(100, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = rng.uniform(1.2, 1.3, size=(100, 1))
    values = field.query(directions * radii)
    np.testing.assert_allclose(values, radii[:, 0] - 1.0, rtol=0.05)


def test_gradient_matches_finite_differences(sphere_field):
    _, field = sphere_field
    nx, ny, nz = field.resolution
    rng = np.random.default_rng(2)
    idx = np.stack([rng.integers(1, n - 2, size=300) for n in (nx, ny, nz)], axis=1)
    points = field.origin + (idx + np.array([0.31, 0.62, 0.47])) * field.cell_size
    points = points[np.abs(field.query(points)) > 2 * field.cell_size][:50]
    assert len(points) > 10

    h = 1e-6
    fd = np.stack([
        (field.query(points + h * e) - field.query(points - h * e)) / (2 * h) for e in np.eye(3)
    ], axis=1)
    analytic = field.gradient(points)
    rel = np.linalg.norm(analytic - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-12)
    assert rel.max() < 1e-3


def test_validate_sdf_reports_ok(sphere_field):
    part, field = sphere_field
    report = validate_sdf(field, sample_tiers(part, (300, 300, 300), beta=0.05, seed=4), part)
    assert report.ok
    assert report.to_dict()["ok"] is True


def test_sample_tiers_rejects_bad_counts(unit_box):
    with pytest.raises(ValueError):
        sample_tiers(unit_box, (0, 10, 10))


def test_cache_round_trip(tmp_path, unit_box):
    field = build_sdf(unit_box, resolution=20)
    path = save_sdf_cache(field, tmp_path / "box.sdf")
    loaded = load_sdf_cache(path)
    np.testing.assert_array_equal(loaded.grid, field.grid)
    np.testing.assert_array_equal(loaded.origin, field.origin)
    assert loaded.cell_size == field.cell_size


def test_cache_rejects_truncated_and_foreign_files(tmp_path, unit_box):
    path = save_sdf_cache(build_sdf(unit_box, resolution=20), tmp_path / "box.sdf")
    data = path.read_bytes()
    (tmp_path / "short.sdf").write_bytes(data[:-4])
    (tmp_path / "foreign.sdf").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(SdfCacheError):
        load_sdf_cache(tmp_path / "short.sdf")
    with pytest.raises(SdfCacheError):
        load_sdf_cache(tmp_path / "foreign.sdf")


def test_build_all_sdfs_uses_cache(tmp_path):
    parts = [make_box((0, 0, 0), (1, 1, 1), 0), make_box((0, 0, 1), (1, 1, 2), 1)]
    first = build_all_sdfs(parts, resolution=20, threads=2, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.sdf"))) == 2
    second = build_all_sdfs(parts, resolution=20, cache_dir=tmp_path)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.grid, b.grid)
