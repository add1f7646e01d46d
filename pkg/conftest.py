"""Shared pytest fixtures for the LinkSmith test suite."""

from pathlib import Path

import numpy as np
import pytest
import trimesh
from loguru import logger

from part_assembly import PartRecord, validate_part
from synthetic_assembly import generate_synthetic, write_synthetic


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end checks that build SDFs or run the full pipeline")


@pytest.fixture(autouse=True)
def quiet_logs():
    logger.remove()
    yield


def make_box(lower, upper, part_id: int = 0, subdivide: bool = True) -> PartRecord:
    mesh = trimesh.creation.box(bounds=np.array([lower, upper], dtype=np.float64))
    if subdivide:
        mesh = mesh.subdivide()
    return validate_part(mesh, min_vertices=8, part_id=part_id, voxel_resolution=16)


@pytest.fixture
def unit_box() -> PartRecord:
    return make_box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


@pytest.fixture
def stacked_boxes():
    """Two unit boxes touching face to face along z, plus a third one far away."""
    return [
        make_box((0, 0, 0), (1, 1, 1), part_id=0),
        make_box((0, 0, 1), (1, 1, 2), part_id=1),
        make_box((5, 0, 0), (6, 1, 1), part_id=2),
    ]


@pytest.fixture
def door_manifest(tmp_path: Path) -> Path:
    return write_synthetic(generate_synthetic("door", seed=0), tmp_path / "door")


@pytest.fixture
def drawer_manifest(tmp_path: Path) -> Path:
    return write_synthetic(generate_synthetic("drawer", seed=0), tmp_path / "drawer")
