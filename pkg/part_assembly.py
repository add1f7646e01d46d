"""
Assembly Ingestion and Part Statistics for LinkSmith
====================================================

Loads segmented mesh assemblies, validates each part and computes the
per-part quantities every later stage relies on.

Features:
- Assembly manifest validation (pydantic) with ground-truth cross checks
- OBJ and PLY loading, triangles only (polygons are rejected)
- Part validation with typed rejection reasons (strict / lenient modes)
- Area-weighted centroid, robust volume (voxel winding-number fallback)
- Centered Chamfer distance and symmetry clustering of near-identical parts

Author: LinkSmith Development Team
Date: 2024
"""

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, model_validator
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial import cKDTree
from scipy.spatial.distance import squareform

from kinematic_tree import JointSpec, JointType, KinematicTree, TreeEdge
from mesh_geometry import sample_surface, surface_area, winding_numbers


# --- ERRORS ---

class RejectionReason(str, Enum):
    TOO_FEW_VERTICES = "TooFewVertices"
    DEGENERATE_SPREAD = "DegenerateSpread"
    INVALID_FACES = "InvalidFaces"


class PartRejected(ValueError):
    def __init__(self, reason: RejectionReason, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)


class MeshFormatError(ValueError):
    """Unreadable mesh file or unsupported polygon layout."""


class ManifestError(ValueError):
    """Manifest is malformed or references missing files."""


class EmptyPointSet(ValueError):
    """A point set passed to a distance computation is empty."""


# --- MANIFEST ---

class ManifestPart(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mesh: str
    name: Optional[str] = None


class GroundTruthJoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    parent: int
    child: int
    type: JointType
    axis: Optional[List[float]] = None
    pivot: Optional[List[float]] = None
    origin: Optional[List[float]] = None


class GroundTruth(BaseModel):
    model_config = ConfigDict(extra="forbid")

    root: int
    edges: List[GroundTruthJoint] = Field(default_factory=list)


class AssemblyManifest(BaseModel):
    """Assembly description: mesh files, unit scale and optional ground truth."""
    model_config = ConfigDict(extra="forbid")

    parts: List[ManifestPart] = Field(min_length=1)
    units_scale: float = Field(1.0, gt=0)
    ground_truth: Optional[GroundTruth] = None

    _base_dir: Path = PrivateAttr(default_factory=Path)

    @model_validator(mode="after")
    def _check_ground_truth(self) -> "AssemblyManifest":
        if self.ground_truth is None:
            return self
        n = len(self.parts)
        gt = self.ground_truth
        if not 0 <= gt.root < n:
            raise ValueError(f"ground_truth root {gt.root} is not a declared part")
        for e in gt.edges:
            if not (0 <= e.parent < n and 0 <= e.child < n):
                raise ValueError(f"ground_truth edge {e.parent}->{e.child} references an undeclared part")
        return self

    @property
    def base_dir(self) -> Path:
        return self._base_dir

    def mesh_paths(self) -> List[Path]:
        return [(self._base_dir / p.mesh).resolve() for p in self.parts]

    def part_names(self) -> List[str]:
        return [p.name or Path(p.mesh).stem for p in self.parts]


def load_manifest(path: Union[str, Path]) -> AssemblyManifest:
    """Parse and validate a manifest; mesh paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e

    try:
        manifest = AssemblyManifest.model_validate(raw)
    except ValidationError as e:
        raise ManifestError(f"invalid manifest {path}: {e}") from e

    manifest._base_dir = path.resolve().parent
    missing = [str(p) for p in manifest.mesh_paths() if not p.exists()]
    if missing:
        raise ManifestError(f"mesh files not found: {', '.join(missing)}")
    return manifest


def ground_truth_tree(manifest: AssemblyManifest, centroids: Optional[Dict[int, np.ndarray]] = None,
                      index_map: Optional[Dict[int, int]] = None) -> Optional[KinematicTree]:
    """Ground truth as a KinematicTree, with manifest indices remapped to part ids."""
    gt = manifest.ground_truth
    if gt is None:
        return None
    index_map = index_map or {i: i for i in range(len(manifest.parts))}
    edges = []
    for e in gt.edges:
        u, v = index_map[e.parent], index_map[e.child]
        if e.origin is not None:
            origin = e.origin
        elif centroids is not None:
            origin = centroids[v] - centroids[u]
        else:
            origin = [0.0, 0.0, 0.0]
        axis = e.axis if e.type.is_movable else None
        pivot = e.pivot if e.type is JointType.REVOLUTE else None
        edges.append(TreeEdge(u, v, JointSpec(e.type, origin, axis, pivot)))
    return KinematicTree(index_map[gt.root], sorted(index_map.values()), edges)


# --- MESH LOADING ---

def parse_obj(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Read `v` and `f` records; faces with more than three corners are rejected."""
    vs: List[List[float]] = []
    fs: List[List[int]] = []
    with open(path, "r", encoding="utf-8", errors="ignore") as f:
        for lineno, line in enumerate(f, start=1):
            sp = line.split()
            if not sp or sp[0].startswith("#"):
                continue
            if sp[0] == "v":
                if len(sp) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs three coordinates")
                vs.append([float(sp[1]), float(sp[2]), float(sp[3])])
            elif sp[0] == "f":
                corners = sp[1:]
                if len(corners) != 3:
                    raise MeshFormatError(
                        f"{path}:{lineno}: face with {len(corners)} corners (triangles only)")
                tri = []
                for token in corners:
                    idx = int(token.split("/")[0])
                    # OBJ indices are 1-based; negative ones count back from the end
                    tri.append(idx - 1 if idx > 0 else len(vs) + idx)
                fs.append(tri)
    if not vs or not fs:
        raise MeshFormatError(f"{path}: no vertices or faces")
    return np.asarray(vs, dtype=np.float64), np.asarray(fs, dtype=np.int64)


_PLY_FACE = re.compile(rb"^element\s+face\s+(\d+)", re.MULTILINE)


def _ply_declared_faces(path: Path) -> int:
    with open(path, "rb") as f:
        head = f.read(65536)
    end = head.find(b"end_header")
    if not head.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    match = _PLY_FACE.search(head[:end])
    return int(match.group(1)) if match else 0


def load_mesh(path: Union[str, Path]) -> trimesh.Trimesh:
    """Load an OBJ or PLY triangle mesh without merging or repairing anything."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces = parse_obj(path)
        return trimesh.Trimesh(vertices=vertices, faces=faces, process=False, validate=False)
    if suffix == ".ply":
        declared = _ply_declared_faces(path)
        try:
            mesh = trimesh.load(str(path), file_type="ply", force="mesh", process=False)
        except Exception as e:
            raise MeshFormatError(f"{path}: {e}") from e
        if len(mesh.faces) != declared:
            # trimesh fans polygons into triangles, so a count mismatch means non-triangles
            raise MeshFormatError(f"{path}: {declared} faces declared, {len(mesh.faces)} triangles (triangles only)")
        return mesh
    raise MeshFormatError(f"{path}: unsupported mesh format '{suffix}'")


# --- PARTS ---

@dataclass(eq=False)
class PartRecord:
    """One rigid part of the assembly, in assembly units."""
    id: int
    mesh: trimesh.Trimesh
    centroid: np.ndarray
    robust_volume: float
    aabb_extents: np.ndarray
    name: str = ""
    world_transform: np.ndarray = field(default_factory=lambda: np.eye(4))
    intrinsic_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    source_path: Optional[Path] = None
    manifest_index: Optional[int] = None

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(self.mesh.bounds, dtype=np.float64)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.aabb_extents))


def validate_part(mesh: trimesh.Trimesh, min_vertices: int = 10, min_spread: float = 1e-3,
                  part_id: int = 0, name: str = "", voxel_resolution: int = 64) -> PartRecord:
    """
    Validate a raw mesh and turn it into a PartRecord.

    Args:
        mesh: Parsed triangle mesh
        min_vertices: Minimum vertex count (>= 3)
        min_spread: Minimum AABB extent relative to the largest extent

    Returns:
        Accepted PartRecord

    Raises:
        PartRejected: with reason InvalidFaces, TooFewVertices or DegenerateSpread
    """
    if min_vertices < 3 or min_spread <= 0:
        raise ValueError("min_vertices must be >= 3 and min_spread > 0")

    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces)
    if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
        raise PartRejected(RejectionReason.INVALID_FACES, "faces must be a non-empty (F, 3) array")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise PartRejected(RejectionReason.INVALID_FACES, "face references a missing vertex")
    if not np.all(np.isfinite(vertices)):
        raise PartRejected(RejectionReason.INVALID_FACES, "non-finite vertex coordinates")
    if len(vertices) < min_vertices:
        raise PartRejected(RejectionReason.TOO_FEW_VERTICES,
                           f"{len(vertices)} vertices < {min_vertices}")

    extents = vertices.max(axis=0) - vertices.min(axis=0)
    largest = float(extents.max())
    if largest <= 0 or np.any(extents < min_spread * largest):
        raise PartRejected(RejectionReason.DEGENERATE_SPREAD, f"AABB extents {extents.tolist()}")

    clean = trimesh.Trimesh(vertices=vertices, faces=faces, process=True)
    centroid, volume, extents = part_stats(clean, voxel_resolution)
    return PartRecord(
        id=part_id,
        mesh=clean,
        centroid=centroid,
        robust_volume=volume,
        aabb_extents=extents,
        name=name or f"part_{part_id}",
        intrinsic_rotation=principal_frame(clean),
    )


def robust_volume(mesh: trimesh.Trimesh, resolution: int = 64) -> float:
    """
    Voxel-occupancy volume: cells whose centers have winding number > 0.5.

    The cell edge is the longest extent divided by `resolution`; the result is
    never below one cell volume.
    """
    bounds = np.asarray(mesh.bounds, dtype=np.float64)
    extents = bounds[1] - bounds[0]
    cell = float(extents.max()) / max(int(resolution), 1)
    if cell <= 0:
        return 1e-12
    counts = np.maximum(1, np.ceil(extents / cell - 1e-9).astype(int))
    axes = [bounds[0, i] + (np.arange(counts[i]) + 0.5) * cell for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = winding_numbers(grid, mesh.vertices, mesh.faces) > 0.5
    return max(float(np.count_nonzero(inside)) * cell ** 3, cell ** 3)


def part_stats(mesh: trimesh.Trimesh, voxel_resolution: int = 64) -> Tuple[np.ndarray, float, np.ndarray]:
    """
    Per-part statistics.

    Returns:
        Tuple of (area-weighted surface centroid, robust volume > 0, AABB extents)
    """
    areas = np.asarray(mesh.area_faces, dtype=np.float64)
    if areas.sum() > 0:
        centroid = (areas[:, None] * np.asarray(mesh.triangles_center)).sum(axis=0) / areas.sum()
    else:
        centroid = np.asarray(mesh.vertices, dtype=np.float64).mean(axis=0)

    volume = 0.0
    if mesh.is_watertight:
        volume = abs(float(mesh.volume))
    if volume <= 0:
        volume = robust_volume(mesh, voxel_resolution)
        logger.debug(f"Voxel fallback volume {volume:.6g} (watertight={mesh.is_watertight})")

    bounds = np.asarray(mesh.bounds, dtype=np.float64)
    return centroid, volume, bounds[1] - bounds[0]


def principal_frame(mesh: trimesh.Trimesh) -> np.ndarray:
    """Right-handed rotation whose columns are the vertex principal axes (largest first)."""
    v = np.asarray(mesh.vertices, dtype=np.float64)
    cov = np.cov((v - v.mean(axis=0)).T) if len(v) > 1 else np.eye(3)
    _, vecs = np.linalg.eigh(cov)
    frame = vecs[:, ::-1].copy()
    if np.linalg.det(frame) < 0:
        frame[:, 2] *= -1
    return frame


def assembly_diagonal(parts: Sequence[PartRecord]) -> float:
    """Diagonal of the union AABB, the length scale for relative defaults."""
    lo = np.min([p.bounds[0] for p in parts], axis=0)
    hi = np.max([p.bounds[1] for p in parts], axis=0)
    return float(np.linalg.norm(hi - lo))


# --- INGEST ---

@dataclass
class IngestReport:
    accepted: Dict[int, int] = field(default_factory=dict)  # manifest index -> part id
    rejected: List[Dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "accepted": [{"manifest_index": k, "part_id": v} for k, v in sorted(self.accepted.items())],
            "rejected": self.rejected,
            "warnings": self.warnings,
        }


def load_assembly(manifest: AssemblyManifest, min_vertices: int = 10, min_spread: float = 1e-3,
                  strict: bool = False, voxel_resolution: int = 64) -> Tuple[List[PartRecord], IngestReport]:
    """
    Load, scale and validate every manifest part.

    Accepted parts receive dense ids in manifest order. In lenient mode rejected
    parts are logged and skipped; in strict mode the first rejection is raised.
    """
    report = IngestReport()
    parts: List[PartRecord] = []
    for index, (path, name) in enumerate(zip(manifest.mesh_paths(), manifest.part_names())):
        mesh = load_mesh(path)
        if manifest.units_scale != 1.0:
            mesh = trimesh.Trimesh(vertices=np.asarray(mesh.vertices) * manifest.units_scale,
                                   faces=mesh.faces, process=False, validate=False)
        try:
            part = validate_part(mesh, min_vertices, min_spread, part_id=len(parts), name=name,
                                 voxel_resolution=voxel_resolution)
        except PartRejected as e:
            if strict:
                raise
            logger.warning(f"Rejected part {index} ({name}): {e}")
            report.rejected.append({"manifest_index": index, "name": name,
                                    "reason": e.reason.value, "detail": e.detail})
            report.warnings.append(f"part {index} rejected: {e}")
            continue
        part.source_path = path
        part.manifest_index = index
        report.accepted[index] = part.id
        parts.append(part)
        logger.debug(f"Part {part.id} '{name}': volume={part.robust_volume:.6g}, "
                     f"vertices={len(part.mesh.vertices)}")

    if not parts:
        raise ManifestError("every part in the manifest was rejected")
    logger.info(f"Loaded {len(parts)} parts ({len(report.rejected)} rejected)")
    return parts, report


# --- SYMMETRY ---

@dataclass
class SymmetryClusters:
    clusters: List[List[int]]
    chamfer_threshold: float

    def __post_init__(self):
        self._membership = {m: i for i, c in enumerate(self.clusters) for m in c}

    def cluster_of(self, part_id: int) -> List[int]:
        return self.clusters[self._membership[part_id]]

    def same_multi_cluster(self, a: int, b: int) -> bool:
        """True when a and b share a cluster with more than one member."""
        ca, cb = self._membership.get(a), self._membership.get(b)
        return ca is not None and ca == cb and len(self.clusters[ca]) > 1

    def multi_member(self) -> List[List[int]]:
        return [c for c in self.clusters if len(c) > 1]

    @classmethod
    def singletons(cls, ids: Sequence[int]) -> "SymmetryClusters":
        return cls([[i] for i in sorted(ids)], 0.0)

    def to_dict(self) -> Dict:
        return {"clusters": self.clusters, "chamfer_threshold": self.chamfer_threshold}


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyPointSet("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def centered_samples(part: PartRecord, count: int = 2048, seed: int = 0) -> np.ndarray:
    points, _ = sample_surface(part.mesh, count, seed)
    return points - part.centroid


def _linkage_labels(dist: np.ndarray, threshold: float, method: str) -> np.ndarray:
    if len(dist) == 1:
        return np.ones(1, dtype=int)
    z = linkage(squareform(dist, checks=False), method=method)
    return fcluster(z, t=threshold, criterion="distance")


def cluster_symmetric_parts(parts: Sequence[PartRecord], threshold: float,
                            samples: int = 2048, seed: int = 0) -> SymmetryClusters:
    """
    Group near-identical parts by single linkage on centered Chamfer distance.

    A chained cluster whose members are not all pairwise within `threshold` is
    split again with complete linkage so that invariant always holds.
    """
    if threshold <= 0:
        raise ValueError("chamfer threshold must be positive")
    ids = [p.id for p in parts]
    if not ids:
        return SymmetryClusters([], threshold)

    clouds = [centered_samples(p, samples, seed) for p in parts]
    n = len(parts)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = chamfer_distance(clouds[i], clouds[j])

    labels = _linkage_labels(dist, threshold, "single")
    groups: List[List[int]] = []
    for label in dict.fromkeys(labels):
        members = [i for i in range(n) if labels[i] == label]
        sub = dist[np.ix_(members, members)]
        if len(members) > 1 and sub.max() > threshold:
            logger.debug(f"Splitting chained cluster {[ids[m] for m in members]}")
            sub_labels = _linkage_labels(sub, threshold, "complete")
            for sl in dict.fromkeys(sub_labels):
                groups.append([members[k] for k in range(len(members)) if sub_labels[k] == sl])
        else:
            groups.append(members)

    clusters = sorted((sorted(ids[m] for m in g) for g in groups), key=lambda c: c[0])
    multi = [c for c in clusters if len(c) > 1]
    if multi:
        logger.info(f"Symmetry clusters: {multi}")
    return SymmetryClusters(clusters, threshold)
