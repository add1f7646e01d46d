"""
Synthetic Assemblies for LinkSmith
==================================

Procedural box assemblies with known kinematic trees and joints, written as
OBJ meshes plus a manifest carrying the ground truth.

Templates:
- door: post + slab on a vertical hinge (revolute)
- drawer: cabinet shell + sliding drawer (prismatic)
- chain: folding screen of panels of different widths, hinged edge to edge
- star: hub with four hinged flaps
- multi-branch: hub with two arms of two segments
- symmetric-legs: torso with identical legs hinged underneath

All coordinates are scaled by a per-seed factor in [0.95, 1.05] rounded to
1e-4, so the same seed always gives byte-identical files.

Author: LinkSmith Development Team
Date: 2024
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import trimesh
from loguru import logger

from kinematic_tree import JointType, KinematicTree
from part_assembly import AssemblyManifest, GroundTruth, GroundTruthJoint, ground_truth_tree

TEMPLATES = ("door", "drawer", "chain", "star", "multi-branch", "symmetric-legs")


@dataclass(eq=False)
class SyntheticAssembly:
    template: str
    seed: int
    meshes: List[trimesh.Trimesh]
    names: List[str]
    root: int
    joints: List[GroundTruthJoint] = field(default_factory=list)

    def ground_truth(self) -> GroundTruth:
        return GroundTruth(root=self.root, edges=list(self.joints))

    def manifest(self) -> AssemblyManifest:
        return AssemblyManifest.model_validate({
            "parts": [{"mesh": f"part_{i}.obj", "name": n} for i, n in enumerate(self.names)],
            "units_scale": 1.0,
            "ground_truth": self.ground_truth().model_dump(mode="json"),
        })

    def tree(self) -> KinematicTree:
        centroids = {i: np.asarray(m.center_mass if m.is_watertight else m.centroid)
                     for i, m in enumerate(self.meshes)}
        return ground_truth_tree(self.manifest(), centroids)


# --- PRIMITIVES ---

def _round(values) -> List[float]:
    return [float(round(v, 4)) + 0.0 for v in values]


def box(lower: Sequence[float], upper: Sequence[float]) -> trimesh.Trimesh:
    """Axis-aligned box subdivided once (26 vertices, watertight)."""
    mesh = trimesh.creation.box(bounds=np.array([_round(lower), _round(upper)]))
    return mesh.subdivide()


def union(meshes: Sequence[trimesh.Trimesh]) -> trimesh.Trimesh:
    """Disjoint (face-touching) boxes as one part."""
    return trimesh.util.concatenate(list(meshes))


class _Builder:
    def __init__(self, scale: float):
        self.scale = scale
        self.root = 0
        self.meshes: List[trimesh.Trimesh] = []
        self.names: List[str] = []
        self.joints: List[GroundTruthJoint] = []

    def s(self, values: Sequence[float]) -> List[float]:
        return _round([v * self.scale for v in values])

    def box(self, lower, upper) -> trimesh.Trimesh:
        return box(self.s(lower), self.s(upper))

    def add(self, name: str, mesh: trimesh.Trimesh) -> int:
        self.meshes.append(mesh)
        self.names.append(name)
        return len(self.meshes) - 1

    def joint(self, parent: int, child: int, joint_type: JointType, axis=None, pivot=None):
        self.joints.append(GroundTruthJoint(
            parent=parent, child=child, type=joint_type,
            axis=None if axis is None else [float(a) for a in axis],
            pivot=None if pivot is None else self.s(pivot)))


# --- TEMPLATES ---

def _door(b: _Builder, n_parts: Optional[int]):
    post = b.add("post", b.box((-0.1, -0.02, 0.0), (0.0, 0.02, 1.0)))
    slab = b.add("door", b.box((0.0, -0.02, 0.0), (0.8, 0.02, 1.0)))
    b.joint(post, slab, JointType.REVOLUTE, (0, 0, 1), (0.0, 0.0, 0.5))


def _drawer(b: _Builder, n_parts: Optional[int]):
    cabinet = union([
        b.box((-0.4, -0.12, -0.02), (0.4, 0.12, 0.0)),
        b.box((-0.4, 0.1, 0.0), (0.4, 0.12, 0.15)),
        b.box((-0.4, -0.12, 0.0), (0.4, -0.1, 0.15)),
    ])
    shell = b.add("cabinet", cabinet)
    drawer = b.add("drawer", b.box((-0.3, -0.1, 0.0), (0.3, 0.1, 0.15)))
    b.joint(shell, drawer, JointType.PRISMATIC, (1, 0, 0))


def _chain(b: _Builder, n_parts: Optional[int]):
    n = n_parts or 3
    if n < 2:
        raise ValueError("chain needs at least two panels")
    x = 0.0
    hinges = []
    for i in range(n):
        width = 0.4 + 0.1 * i
        b.add(f"panel_{i}", b.box((x, -0.02, 0.0), (x + width, 0.02, 1.0)))
        x += width
        hinges.append(x)
    # root is panel 1: the lowest-id panel of highest contact degree
    if n == 2:
        b.joint(0, 1, JointType.REVOLUTE, (0, 0, 1), (hinges[0], 0.0, 0.5))
        return
    b.root = 1
    b.joint(1, 0, JointType.REVOLUTE, (0, 0, 1), (hinges[0], 0.0, 0.5))
    for i in range(1, n - 1):
        b.joint(i, i + 1, JointType.REVOLUTE, (0, 0, 1), (hinges[i], 0.0, 0.5))


def _star(b: _Builder, n_parts: Optional[int]):
    hub = b.add("hub", b.box((-0.2, -0.2, 0.0), (0.2, 0.2, 0.4)))
    flaps = [
        ("flap_px", (0.2, -0.05, 0.15), (0.6, 0.05, 0.25), (0, 1, 0), (0.2, 0.0, 0.2)),
        ("flap_nx", (-0.6, -0.05, 0.15), (-0.2, 0.05, 0.25), (0, 1, 0), (-0.2, 0.0, 0.2)),
        ("flap_py", (-0.05, 0.2, 0.15), (0.05, 0.6, 0.25), (1, 0, 0), (0.0, 0.2, 0.2)),
        ("flap_ny", (-0.05, -0.6, 0.15), (0.05, -0.2, 0.25), (1, 0, 0), (0.0, -0.2, 0.2)),
    ]
    for name, lo, hi, axis, pivot in flaps[:n_parts - 1 if n_parts else 4]:
        child = b.add(name, b.box(lo, hi))
        b.joint(hub, child, JointType.REVOLUTE, axis, pivot)


def _multi_branch(b: _Builder, n_parts: Optional[int]):
    hub = b.add("hub", b.box((-0.2, -0.2, 0.0), (0.2, 0.2, 0.4)))
    for sign, tag in ((1.0, "a"), (-1.0, "b")):
        inner_lo, inner_hi = sorted((0.2 * sign, 0.5 * sign))
        outer_lo, outer_hi = sorted((0.5 * sign, 0.75 * sign))
        inner = b.add(f"arm_{tag}_0", b.box((inner_lo, -0.05, 0.15), (inner_hi, 0.05, 0.25)))
        outer = b.add(f"arm_{tag}_1", b.box((outer_lo, -0.04, 0.16), (outer_hi, 0.04, 0.24)))
        b.joint(hub, inner, JointType.REVOLUTE, (0, 1, 0), (0.2 * sign, 0.0, 0.2))
        b.joint(inner, outer, JointType.REVOLUTE, (0, 1, 0), (0.5 * sign, 0.0, 0.2))


def _symmetric_legs(b: _Builder, n_parts: Optional[int]):
    n_legs = (n_parts - 1) if n_parts else 4
    torso = b.add("torso", b.box((-0.3, -0.15, 0.5), (0.3, 0.15, 0.7)))
    leg = b.box((-0.04, -0.04, 0.0), (0.04, 0.04, 0.5))
    spots = [(0.2, 0.08), (0.2, -0.08), (-0.2, 0.08), (-0.2, -0.08), (0.0, 0.08), (0.0, -0.08)]
    if not 1 <= n_legs <= len(spots):
        raise ValueError(f"symmetric-legs supports 1..{len(spots)} legs")
    for i, (x, y) in enumerate(spots[:n_legs]):
        offset = b.s((x, y, 0.0))
        mesh = leg.copy()
        mesh.apply_translation(offset)
        child = b.add(f"leg_{i}", mesh)
        b.joint(torso, child, JointType.REVOLUTE, (1, 0, 0), (x, y, 0.5))


_TEMPLATE_BUILDERS: Dict[str, Callable[[_Builder, Optional[int]], None]] = {
    "door": _door,
    "drawer": _drawer,
    "chain": _chain,
    "star": _star,
    "multi-branch": _multi_branch,
    "symmetric-legs": _symmetric_legs,
}


def generate_synthetic(template: str, seed: int = 0, n_parts: Optional[int] = None) -> SyntheticAssembly:
    """
    Build a synthetic assembly with ground truth.

    Args:
        template: One of TEMPLATES
        seed: Controls the global scale jitter
        n_parts: Part count for chain, star and symmetric-legs (template default otherwise)
    """
    if template not in _TEMPLATE_BUILDERS:
        raise ValueError(f"unknown template {template!r}; choose from {', '.join(TEMPLATES)}")
    rng = np.random.default_rng(seed)
    scale = float(round(1.0 + 0.05 * rng.uniform(-1.0, 1.0), 4))
    builder = _Builder(scale)
    _TEMPLATE_BUILDERS[template](builder, n_parts)
    logger.debug(f"Synthetic {template} (seed {seed}, scale {scale}): {len(builder.meshes)} parts")
    return SyntheticAssembly(template, seed, builder.meshes, builder.names, builder.root, builder.joints)


def write_synthetic(assembly: SyntheticAssembly, out_dir: Union[str, Path]) -> Path:
    """Write part_<i>.obj files and manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, mesh in enumerate(assembly.meshes):
        text = trimesh.exchange.obj.export_obj(mesh, include_normals=False, include_color=False,
                                               include_texture=False, header=None)
        (out_dir / f"part_{i}.obj").write_text(text, encoding="utf-8")
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(assembly.manifest().model_dump(mode="json", exclude_none=True), f, indent=2)
        f.write("\n")
    logger.info(f"Synthetic {assembly.template} assembly written to {manifest_path}")
    return manifest_path
