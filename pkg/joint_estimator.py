"""
Joint Estimation for LinkSmith
==============================

Estimates the type and parameters of every kinematic tree edge from static
geometry. Candidate axes and pivots come from the contact region between
parent and child; each candidate is scored by moving the child's surface
samples through small virtual motions inside the parent's signed distance
field (distance-weighted contact-aware virtual linkage objective).

Features:
- Contact region extraction (weighted centroid, covariance, normal, hinge axis)
- Candidate pool: PCA axis, normal, orthogonal completion, principal axes, random axes
- Rodrigues rotation, translation and the unit-axis Jacobian
- Consistency / collision / pivot-anchor objective with analytic gradients
- Monotone gradient descent with backtracking, coarse ranking and top-K refinement
- Geometric type rule with an optional type prior, symmetry-cluster harmonization
- Per-edge JSON diagnostics

Author: LinkSmith Development Team
Date: 2024
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial import cKDTree

from kinematic_tree import JointSpec, JointType, KinematicTree
from mesh_geometry import sample_surface
from part_assembly import EmptyPointSet, PartRecord, SymmetryClusters
from sdf_field import SdfField

Edge = Tuple[int, int]
REVOLUTE = "revolute"
PRISMATIC = "prismatic"
_SIGN_DEDUP = 1e-9
_JOINT_LABELS = frozenset(t.value for t in JointType)


class NoContact(ValueError):
    """No sample of either part lies within the contact threshold of the other."""


class DegenerateAxis(ValueError):
    """Raw axis vector is too short to normalize."""


class NonFiniteObjective(ArithmeticError):
    """The objective or its gradient became NaN or infinite."""


# --- CONFIG ---

class DwCavlConfig(BaseModel):
    """
    Joint estimation settings. Lengths are fractions of the assembly diagonal
    and are resolved to absolute values per assembly (see `resolve`).
    """
    model_config = ConfigDict(extra="forbid")

    m_vol_fraction: float = Field(0.005, gt=0)
    k_sharp_scale: float = Field(200.0, gt=0)
    sigma_c_fraction: float = Field(0.01, gt=0)
    eps_small: float = Field(1e-9, gt=0)
    lambda_c: float = Field(1.0, ge=0)
    lambda_coll: float = Field(1.0, ge=0)
    lambda_p: float = Field(0.1, ge=0)
    revolute_angles_deg: List[float] = Field(default_factory=lambda: [5.0, 10.0, 20.0])
    prismatic_fractions: List[float] = Field(default_factory=lambda: [0.02, 0.05])
    n_random: int = Field(4, ge=0)
    n_slide: int = Field(2, ge=0)
    slide_step_fraction: float = Field(0.02, gt=0)
    top_k: int = Field(5, ge=1)
    zeta: float = Field(1.1, gt=0)
    s_min: float = Field(0.25, gt=0, lt=1)
    p_conf: float = Field(0.8, gt=0, le=1)
    coarse_samples: int = Field(512, ge=1)
    refine_samples: int = Field(2048, ge=1)
    contact_samples: int = Field(4096, ge=1)
    iterations: int = Field(200, ge=0)
    axis_step: float = Field(0.05, gt=0)
    pivot_step_fraction: float = Field(0.02, gt=0)
    tau_c_factor: float = Field(2.0, gt=0)
    residual_scale_fraction: Optional[float] = Field(None, gt=0)
    anchor: bool = True
    seed: int = 0

    @field_validator("revolute_angles_deg", "prismatic_fractions")
    @classmethod
    def _non_empty_motion(cls, v: List[float]) -> List[float]:
        if not v or any(x <= 0 for x in v):
            raise ValueError("virtual motion magnitudes must be a non-empty list of positive values")
        return v

    def resolve(self, diagonal: float, epsilon: float) -> "DwCavlParams":
        """Absolute parameters for an assembly of the given diagonal and contact tolerance."""
        m_vol = self.m_vol_fraction * diagonal
        tau_c = self.tau_c_factor * epsilon
        angles = sorted({s * math.radians(a) for a in self.revolute_angles_deg for s in (-1.0, 1.0)})
        displacements = sorted({s * f * diagonal for f in self.prismatic_fractions for s in (-1.0, 1.0)})
        return DwCavlParams(
            m_vol=m_vol,
            k_sharp=self.k_sharp_scale / diagonal,
            sigma_c=self.sigma_c_fraction * diagonal,
            eps_small=self.eps_small,
            lambda_c=self.lambda_c,
            lambda_coll=self.lambda_coll,
            lambda_p=self.lambda_p if self.anchor else 0.0,
            angles=tuple(angles),
            displacements=tuple(displacements),
            n_random=self.n_random,
            n_slide=self.n_slide,
            slide_step=self.slide_step_fraction * diagonal,
            top_k=self.top_k,
            zeta=self.zeta,
            s_min=self.s_min,
            p_conf=self.p_conf,
            coarse_samples=self.coarse_samples,
            refine_samples=self.refine_samples,
            contact_samples=self.contact_samples,
            iterations=self.iterations,
            axis_step=self.axis_step,
            pivot_step=self.pivot_step_fraction * diagonal,
            tau_c=tau_c,
            decay_scale=tau_c,
            residual_scale=(self.residual_scale_fraction * diagonal
                            if self.residual_scale_fraction is not None else m_vol),
            anchor=self.anchor,
            seed=self.seed,
            diagonal=diagonal,
        )


@dataclass(frozen=True)
class DwCavlParams:
    """Resolved (absolute) joint estimation parameters."""
    m_vol: float
    k_sharp: float
    sigma_c: float
    eps_small: float = 1e-9
    lambda_c: float = 1.0
    lambda_coll: float = 1.0
    lambda_p: float = 0.1
    angles: Tuple[float, ...] = ()
    displacements: Tuple[float, ...] = ()
    n_random: int = 4
    n_slide: int = 2
    slide_step: float = 0.02
    top_k: int = 5
    zeta: float = 1.1
    s_min: float = 0.25
    p_conf: float = 0.8
    coarse_samples: int = 512
    refine_samples: int = 2048
    contact_samples: int = 4096
    iterations: int = 200
    axis_step: float = 0.05
    pivot_step: float = 0.02
    tau_c: float = 0.02
    decay_scale: float = 0.02
    residual_scale: float = 1.0
    anchor: bool = True
    seed: int = 0
    diagonal: float = 1.0

    def motions(self, kind: str) -> Tuple[float, ...]:
        return self.angles if kind == REVOLUTE else self.displacements


# --- CONTACT REGION ---

@dataclass(eq=False)
class ContactRegion:
    """Weighted contact region between a parent and a child sample set."""
    points: np.ndarray
    weights: np.ndarray
    centroid: np.ndarray
    covariance: np.ndarray
    normal: np.ndarray
    u_pca: np.ndarray
    u_perp: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    fallback: bool = False

    def to_dict(self) -> Dict:
        return {
            "n_points": int(len(self.points)),
            "centroid": [float(x) for x in self.centroid],
            "normal": [float(x) for x in self.normal],
            "u_pca": [float(x) for x in self.u_pca],
            "u_perp": [float(x) for x in self.u_perp],
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "fallback": self.fallback,
        }


def _orthogonal_completion(u: np.ndarray, n: np.ndarray, eigenvectors: np.ndarray) -> np.ndarray:
    perp = np.cross(u, n)
    norm = np.linalg.norm(perp)
    if norm > 1e-6:
        return perp / norm
    # u and n coincide (planar contact): complete with the largest-variance direction
    perp = np.cross(n, eigenvectors[:, 2])
    norm = np.linalg.norm(perp)
    if norm > 1e-6:
        return perp / norm
    return eigenvectors[:, 1]


def _region_from(points: np.ndarray, weights: np.ndarray, diffs: np.ndarray, fallback: bool) -> ContactRegion:
    total = weights.sum()
    centroid = (weights[:, None] * points).sum(axis=0) / total
    centered = points - centroid
    covariance = (weights[:, None, None] * np.einsum("ni,nj->nij", centered, centered)).sum(axis=0) / total
    covariance = 0.5 * (covariance + covariance.T)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    eigenvalues = np.maximum(eigenvalues, 0.0)

    mean_diff = (weights[:, None] * diffs).sum(axis=0) / total
    mean_len = float((weights * np.linalg.norm(diffs, axis=1)).sum() / total)
    if np.linalg.norm(mean_diff) > max(1e-12, 0.25 * mean_len):
        normal = mean_diff / np.linalg.norm(mean_diff)
    else:
        # coincident surfaces: difference vectors cancel, use the thinnest direction
        normal = eigenvectors[:, 0].copy()
        if mean_diff @ normal < 0:
            normal = -normal
    u_pca = eigenvectors[:, 0].copy()
    u_perp = _orthogonal_completion(u_pca, normal, eigenvectors)
    return ContactRegion(points, weights, centroid, covariance, normal, u_pca, u_perp,
                         eigenvalues, eigenvectors, fallback)


def extract_contact_region(samples_parent: np.ndarray, samples_child: np.ndarray,
                           tau_c: float, decay_scale: float) -> ContactRegion:
    """
    Union of samples whose nearest neighbor on the other part lies within tau_c.

    Each point is weighted by exp(-d^2 / (2 decay_scale^2)). The normal averages
    parent-to-child nearest-point difference vectors.

    Raises:
        EmptyPointSet: when either sample set is empty
        NoContact: when no point qualifies
    """
    samples_parent = np.asarray(samples_parent, dtype=np.float64)
    samples_child = np.asarray(samples_child, dtype=np.float64)
    if len(samples_parent) == 0 or len(samples_child) == 0:
        raise EmptyPointSet("contact region needs samples on both parts")

    d_pc, i_pc = cKDTree(samples_child).query(samples_parent)
    d_cp, i_cp = cKDTree(samples_parent).query(samples_child)
    keep_p = d_pc <= tau_c
    keep_c = d_cp <= tau_c
    if not keep_p.any() and not keep_c.any():
        raise NoContact(f"no samples within tau_c={tau_c:.4g}")

    points = np.concatenate([samples_parent[keep_p], samples_child[keep_c]])
    dists = np.concatenate([d_pc[keep_p], d_cp[keep_c]])
    diffs = np.concatenate([
        samples_child[i_pc[keep_p]] - samples_parent[keep_p],
        samples_child[keep_c] - samples_parent[i_cp[keep_c]],
    ])
    weights = np.exp(-dists ** 2 / (2.0 * decay_scale ** 2))
    return _region_from(points, weights, diffs, fallback=False)


def closest_pair_region(samples_parent: np.ndarray, samples_child: np.ndarray, k: int = 8) -> ContactRegion:
    """Region built from the midpoints of the k closest parent/child sample pairs."""
    samples_parent = np.asarray(samples_parent, dtype=np.float64)
    samples_child = np.asarray(samples_child, dtype=np.float64)
    if len(samples_parent) == 0 or len(samples_child) == 0:
        raise EmptyPointSet("closest pair needs samples on both parts")
    d, idx = cKDTree(samples_child).query(samples_parent)
    order = np.argsort(d, kind="stable")[:max(1, k)]
    a, b = samples_parent[order], samples_child[idx[order]]
    diffs = b - a
    if np.all(np.linalg.norm(diffs, axis=1) <= 1e-12):
        diffs = np.tile([0.0, 0.0, 1.0], (len(order), 1))
    midpoints = 0.5 * (a + b)
    return _region_from(midpoints, np.ones(len(order)), diffs, fallback=True)


# --- MOTIONS ---

def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """R(u, theta) = I + sin(theta) [u]x + (1 - cos(theta)) [u]x^2."""
    u = np.asarray(axis, dtype=np.float64)
    k = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotate_points(points: np.ndarray, pivot: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """y = p + R(u, theta)(x - p)."""
    pivot = np.asarray(pivot, dtype=np.float64)
    rot = rotation_matrix(axis, angle)
    return pivot + (np.asarray(points, dtype=np.float64) - pivot) @ rot.T


def translate_points(points: np.ndarray, axis: np.ndarray, displacement: float) -> np.ndarray:
    """y = x + t u."""
    return np.asarray(points, dtype=np.float64) + displacement * np.asarray(axis, dtype=np.float64)


def axis_jacobian(raw_axis: np.ndarray) -> np.ndarray:
    """Jacobian of u = a / |a|: (1/|a|)(I - a a^T / |a|^2)."""
    a = np.asarray(raw_axis, dtype=np.float64)
    norm = float(np.linalg.norm(a))
    if norm <= 1e-12:
        raise DegenerateAxis("raw axis has (near) zero length")
    return (np.eye(3) - np.outer(a, a) / norm ** 2) / norm


def _normalize(a: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(a))
    if norm <= 1e-12:
        raise DegenerateAxis("raw axis has (near) zero length")
    return a / norm


# --- CANDIDATES ---

@dataclass(eq=False)
class JointCandidate:
    kind: str
    raw_axis: np.ndarray
    pivot: Optional[np.ndarray] = None
    objective: float = math.nan
    breakdown: Dict[str, object] = field(default_factory=dict)
    index: int = 0

    @property
    def axis(self) -> np.ndarray:
        return _normalize(np.asarray(self.raw_axis, dtype=np.float64))

    @property
    def score(self) -> float:
        return 1.0 / (1.0 + self.objective)

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "pivot": None if self.pivot is None else [float(x) for x in self.pivot],
            "axis": [float(x) for x in self.axis],
            "objective": float(self.objective),
            "breakdown": self.breakdown,
        }


def _axis_pool(region: ContactRegion, n_random: int, rng: np.random.Generator) -> List[np.ndarray]:
    raw = [region.u_pca, region.normal, region.u_perp]
    raw.extend(region.eigenvectors[:, i] for i in range(3))
    for _ in range(n_random):
        v = rng.normal(size=3)
        raw.append(v / np.linalg.norm(v))
    pool: List[np.ndarray] = []
    for axis in raw:
        axis = axis / np.linalg.norm(axis)
        if all(abs(float(axis @ other)) <= 1.0 - _SIGN_DEDUP for other in pool):
            pool.append(axis)
    return pool


def generate_candidates(region: ContactRegion, params: DwCavlParams,
                        rng: Optional[np.random.Generator] = None,
                        kinds: Sequence[str] = (REVOLUTE, PRISMATIC)) -> List[JointCandidate]:
    """
    Unoptimized candidates: revolute (axis, pivot) pairs first, then one prismatic per axis.

    Pivots sit at the contact centroid plus offsets 0, +1, -1, ..., +n_slide, -n_slide
    times the slide step along the axis. Axes equal up to sign are kept once.
    """
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    pool = _axis_pool(region, params.n_random, rng)
    offsets = [0]
    for k in range(1, params.n_slide + 1):
        offsets.extend([k, -k])

    candidates: List[JointCandidate] = []
    if REVOLUTE in kinds:
        for axis in pool:
            for k in offsets:
                pivot = region.centroid + k * params.slide_step * axis
                candidates.append(JointCandidate(REVOLUTE, axis.copy(), pivot, index=len(candidates)))
    if PRISMATIC in kinds:
        for axis in pool:
            candidates.append(JointCandidate(PRISMATIC, axis.copy(), None, index=len(candidates)))
    return candidates


# --- OBJECTIVE ---

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def contact_weights(s0: np.ndarray, params: DwCavlParams) -> Tuple[np.ndarray, np.ndarray]:
    """(w, w_tilde): near-surface contact weights and inverse volumetric weights."""
    w_vol = _sigmoid(-params.k_sharp * (s0 - params.m_vol))
    if params.anchor:
        w_dist = np.exp(-s0 ** 2 / (2.0 * params.sigma_c ** 2))
    else:
        w_dist = np.ones_like(s0)
    w_tilde = _sigmoid(params.k_sharp * (s0 - params.m_vol))
    return w_vol * w_dist, w_tilde


def _moved(points: np.ndarray, kind: str, axis: np.ndarray, pivot: Optional[np.ndarray], delta: float):
    if kind == REVOLUTE:
        return rotate_points(points, pivot, axis, delta)
    return translate_points(points, axis, delta)


def dwcavl_losses(kind: str, axis: np.ndarray, pivot: Optional[np.ndarray], child_samples: np.ndarray,
                  parent_sdf: SdfField, delta: float, params: DwCavlParams,
                  s0: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Consistency and collision losses for one virtual motion delta."""
    child_samples = np.asarray(child_samples, dtype=np.float64)
    if s0 is None:
        s0 = parent_sdf.query(child_samples)
    w, w_tilde = contact_weights(s0, params)
    s_delta = parent_sdf.query(_moved(child_samples, kind, axis, pivot, delta))
    scale = params.residual_scale
    r_cons = np.maximum(0.0, s_delta - params.m_vol) / scale
    r_coll = np.maximum(0.0, -s_delta - params.m_vol) / scale
    l_cons = float((w * r_cons ** 2).sum() / (w.sum() + params.eps_small))
    l_coll = float((w_tilde * r_coll ** 2).sum() / (w_tilde.sum() + params.eps_small))
    return l_cons, l_coll


def objective_and_gradient(kind: str, raw_axis: np.ndarray, pivot: Optional[np.ndarray],
                           child_samples: np.ndarray, parent_sdf: SdfField, mu_c: np.ndarray,
                           params: DwCavlParams, s0: Optional[np.ndarray] = None,
                           with_gradient: bool = True):
    """
    Objective J and its gradient with respect to the pivot and the raw axis.

    Returns:
        Tuple of (J, grad_pivot or None, grad_raw_axis or None, breakdown dict)

    Raises:
        NonFiniteObjective: when J or a gradient is not finite
    """
    x = np.asarray(child_samples, dtype=np.float64)
    a = np.asarray(raw_axis, dtype=np.float64)
    u = _normalize(a)
    if s0 is None:
        s0 = parent_sdf.query(x)
    w, w_tilde = contact_weights(s0, params)
    w_sum = w.sum() + params.eps_small
    wt_sum = w_tilde.sum() + params.eps_small
    scale = params.residual_scale
    motions = params.motions(kind)
    n_motions = len(motions)

    grad_p = np.zeros(3)
    grad_u = np.zeros(3)
    cons, coll = [], []
    for delta in motions:
        if kind == REVOLUTE:
            rot = rotation_matrix(u, delta)
            v = x - pivot
            y = pivot + v @ rot.T
        else:
            y = x + delta * u
        s = parent_sdf.query(y)
        r_cons = np.maximum(0.0, s - params.m_vol) / scale
        r_coll = np.maximum(0.0, -s - params.m_vol) / scale
        cons.append(float((w * r_cons ** 2).sum() / w_sum))
        coll.append(float((w_tilde * r_coll ** 2).sum() / wt_sum))
        if not with_gradient:
            continue
        # dJ/ds per sample, already averaged over the motion set
        coef = (params.lambda_c * 2.0 * w * r_cons / (scale * w_sum)
                - params.lambda_coll * 2.0 * w_tilde * r_coll / (scale * wt_sum)) / n_motions
        active = coef != 0.0
        if not active.any():
            continue
        g = parent_sdf.gradient(y[active]) * coef[active, None]
        g_sum = g.sum(axis=0)
        if kind == REVOLUTE:
            grad_p += g_sum - rot.T @ g_sum
            va = v[active]
            sin_t, one_cos = math.sin(delta), 1.0 - math.cos(delta)
            grad_u += (-sin_t * np.cross(g, va).sum(axis=0)
                       + one_cos * ((va * (g @ u)[:, None]).sum(axis=0) + ((va @ u)[:, None] * g).sum(axis=0)))
        else:
            grad_u += delta * g_sum

    l_reg = 0.0
    if kind == REVOLUTE and params.lambda_p > 0.0:
        offset = np.asarray(pivot, dtype=np.float64) - mu_c
        l_reg = params.lambda_p * float(offset @ offset)
        grad_p += 2.0 * params.lambda_p * offset

    objective = float(np.mean([params.lambda_c * c + params.lambda_coll * k for c, k in zip(cons, coll)]) + l_reg)
    breakdown = {"l_cons": cons, "l_coll": coll, "l_reg": l_reg}
    if not math.isfinite(objective):
        raise NonFiniteObjective(f"objective is {objective}")
    if not with_gradient:
        return objective, None, None, breakdown
    grad_a = axis_jacobian(a) @ grad_u
    if not (np.all(np.isfinite(grad_p)) and np.all(np.isfinite(grad_a))):
        raise NonFiniteObjective("gradient is not finite")
    return objective, (grad_p if kind == REVOLUTE else None), grad_a, breakdown


def total_objective(candidate: JointCandidate, child_samples: np.ndarray, parent_sdf: SdfField,
                    mu_c: np.ndarray, params: DwCavlParams) -> float:
    value, _, _, _ = objective_and_gradient(candidate.kind, candidate.raw_axis, candidate.pivot,
                                            child_samples, parent_sdf, mu_c, params, with_gradient=False)
    return value


def _scored(candidate: JointCandidate, child_samples: np.ndarray, parent_sdf: SdfField,
            mu_c: np.ndarray, params: DwCavlParams, s0: Optional[np.ndarray] = None) -> JointCandidate:
    value, _, _, breakdown = objective_and_gradient(candidate.kind, candidate.raw_axis, candidate.pivot,
                                                    child_samples, parent_sdf, mu_c, params, s0=s0,
                                                    with_gradient=False)
    return replace(candidate, objective=value, breakdown=breakdown)


def optimize_candidate(candidate: JointCandidate, child_samples: np.ndarray, parent_sdf: SdfField,
                       mu_c: np.ndarray, params: DwCavlParams, max_halvings: int = 12) -> JointCandidate:
    """
    Monotone descent over (pivot, axis) for revolute or axis only for prismatic.

    Each iteration moves along the normalized negative gradient of every block
    with the base step sizes and halves both until J decreases; the loop stops
    when no halving helps. The raw axis is renormalized after each accepted step.

    Raises:
        NonFiniteObjective: when the objective becomes NaN or infinite
    """
    x = np.asarray(child_samples, dtype=np.float64)
    s0 = parent_sdf.query(x)
    kind = candidate.kind
    a = _normalize(np.asarray(candidate.raw_axis, dtype=np.float64))
    p = None if candidate.pivot is None else np.asarray(candidate.pivot, dtype=np.float64).copy()
    value, g_p, g_a, breakdown = objective_and_gradient(kind, a, p, x, parent_sdf, mu_c, params, s0=s0)

    for _ in range(params.iterations):
        n_a = float(np.linalg.norm(g_a))
        n_p = float(np.linalg.norm(g_p)) if g_p is not None else 0.0
        if n_a <= 1e-15 and n_p <= 1e-15:
            break
        eta = 1.0
        improved = False
        for _ in range(max_halvings):
            a_new = a - eta * params.axis_step * g_a / n_a if n_a > 1e-15 else a
            p_new = p
            if p is not None and n_p > 1e-15:
                p_new = p - eta * params.pivot_step * g_p / n_p
            if np.linalg.norm(a_new) > 1e-12:
                a_new = a_new / np.linalg.norm(a_new)
                trial = objective_and_gradient(kind, a_new, p_new, x, parent_sdf, mu_c, params,
                                               s0=s0, with_gradient=False)[0]
                if trial < value:
                    improved = True
                    break
            eta *= 0.5
        if not improved:
            break
        a, p = a_new, p_new
        value, g_p, g_a, breakdown = objective_and_gradient(kind, a, p, x, parent_sdf, mu_c, params, s0=s0)

    return replace(candidate, raw_axis=a, pivot=p, objective=value, breakdown=breakdown)


# --- RANKING ---

def _dedupe(candidates: Sequence[JointCandidate]) -> List[JointCandidate]:
    kept: List[JointCandidate] = []
    for cand in candidates:
        axis = cand.axis
        duplicate = False
        for other in kept:
            if other.kind != cand.kind or abs(float(axis @ other.axis)) <= 1.0 - _SIGN_DEDUP:
                continue
            if cand.pivot is None or np.allclose(cand.pivot, other.pivot, atol=1e-12, rtol=0.0):
                duplicate = True
                break
        if not duplicate:
            kept.append(cand)
    return kept


@dataclass(eq=False)
class RankResult:
    best: Dict[str, JointCandidate]
    refined: List[JointCandidate]
    coarse: List[JointCandidate]

    def score(self, kind: str) -> float:
        cand = self.best.get(kind)
        return cand.score if cand is not None else 0.0


def rank_and_refine(candidates: Sequence[JointCandidate], child_samples: np.ndarray, parent_sdf: SdfField,
                    mu_c: np.ndarray, params: DwCavlParams) -> RankResult:
    """
    Coarse-score every candidate on a subsample, optimize the top-K of each kind
    on the full samples and keep the best per kind. Ties go to the lower index.
    """
    x = np.asarray(child_samples, dtype=np.float64)
    coarse_x = x[:params.coarse_samples]
    coarse_s0 = parent_sdf.query(coarse_x)
    coarse: List[JointCandidate] = []
    for cand in _dedupe(candidates):
        try:
            coarse.append(_scored(cand, coarse_x, parent_sdf, mu_c, params, s0=coarse_s0))
        except (NonFiniteObjective, DegenerateAxis) as exc:
            logger.warning(f"Discarding candidate {cand.index} ({cand.kind}): {exc}")

    best: Dict[str, JointCandidate] = {}
    refined: List[JointCandidate] = []
    for kind in (REVOLUTE, PRISMATIC):
        ranked = sorted((c for c in coarse if c.kind == kind), key=lambda c: (c.objective, c.index))
        for cand in ranked[:params.top_k]:
            try:
                opt = optimize_candidate(cand, x, parent_sdf, mu_c, params)
            except (NonFiniteObjective, DegenerateAxis) as exc:
                logger.warning(f"Discarding candidate {cand.index} ({kind}) during refinement: {exc}")
                continue
            refined.append(opt)
            current = best.get(kind)
            if current is None or (opt.objective, opt.index) < (current.objective, current.index):
                best[kind] = opt
    return RankResult(best, refined, coarse)


# --- TYPE DECISION ---

class JointTypePrior(ABC):
    """Source of a joint-type distribution for an edge, or None to abstain."""

    @abstractmethod
    def predict(self, edge: Edge, features: Mapping[str, object]) -> Optional[Dict[str, float]]:
        """Probabilities over fixed/revolute/prismatic/abstain, or None."""


class AbstainingPrior(JointTypePrior):
    def predict(self, edge: Edge, features: Mapping[str, object]) -> Optional[Dict[str, float]]:
        return None


class FixedTablePrior(JointTypePrior):
    """Prior read from a table of per-edge distributions (e.g. annotations)."""

    def __init__(self, table: Mapping[Edge, Mapping[str, float]]):
        self.table = {tuple(k): dict(v) for k, v in table.items()}

    def predict(self, edge: Edge, features: Mapping[str, object]) -> Optional[Dict[str, float]]:
        return self.table.get(tuple(edge))


def classify_joint(s_rev: float, s_pri: float, prior: Optional[Mapping[str, float]],
                   params: DwCavlParams) -> JointType:
    """
    Confident non-abstaining prior wins; otherwise revolute if s_rev > zeta * s_pri
    and s_rev >= s_min, else prismatic if s_pri >= s_min, else fixed.
    """
    if prior:
        label, prob = max(prior.items(), key=lambda kv: (kv[1], kv[0]))
        if label != "abstain" and prob >= params.p_conf:
            if label in _JOINT_LABELS:
                return JointType(label)
            logger.warning(f"Type prior returned unknown label {label!r}, treating it as an abstention")
    if s_rev > params.zeta * s_pri and s_rev >= params.s_min:
        return JointType.REVOLUTE
    if s_pri >= params.s_min:
        return JointType.PRISMATIC
    return JointType.FIXED


def joint_limits(joint_type: JointType, diagonal: float) -> Tuple[Optional[float], Optional[float]]:
    if joint_type is JointType.REVOLUTE:
        return -math.pi / 2.0, math.pi / 2.0
    if joint_type is JointType.PRISMATIC:
        return -0.1 * diagonal, 0.1 * diagonal
    return None, None


def spec_from_candidate(joint_type: JointType, origin: np.ndarray, best: Mapping[str, JointCandidate],
                        diagonal: float) -> JointSpec:
    """JointSpec for the given type using the optimized parameters of the same kind."""
    lower, upper = joint_limits(joint_type, diagonal)
    if joint_type is JointType.FIXED or joint_type.value not in best:
        if joint_type is not JointType.FIXED:
            logger.warning(f"No {joint_type.value} candidate available, falling back to fixed")
        return JointSpec.fixed(origin)
    cand = best[joint_type.value]
    return JointSpec(joint_type, origin, axis=cand.axis,
                     pivot=cand.pivot if joint_type is JointType.REVOLUTE else None,
                     score=cand.score, lower=lower, upper=upper)


def harmonize_types(tree: KinematicTree, clusters: Optional[SymmetryClusters],
                    joint_specs: Mapping[Edge, JointSpec],
                    refit: Optional[Callable[[Edge, JointType], JointSpec]] = None) -> Dict[Edge, JointSpec]:
    """
    Impose the majority joint type within each multi-member cluster of child parts.

    Ties keep the original types. Corrected joints are rebuilt through `refit`
    from the optimized parameters of the imposed kind. Without `refit` only a
    correction to fixed can be applied.
    """
    result = dict(joint_specs)
    if clusters is None:
        return result
    for members in clusters.multi_member():
        edges = [(tree.parent_of(m), m) for m in members if tree.parent_of(m) is not None]
        if len(edges) < 2:
            continue
        counts: Dict[JointType, int] = {}
        for e in edges:
            counts[result[e].joint_type] = counts.get(result[e].joint_type, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: -kv[1])
        if len(ranked) == 1 or ranked[0][1] == ranked[1][1]:
            continue
        majority = ranked[0][0]
        for e in edges:
            if result[e].joint_type is majority:
                continue
            logger.info(f"Harmonizing joint {e[0]}->{e[1]}: {result[e].joint_type.value} -> {majority.value}")
            if refit is not None:
                result[e] = refit(e, majority)
            elif majority is JointType.FIXED:
                result[e] = JointSpec.fixed(result[e].origin)
            else:
                logger.warning(f"No refit available for {e}; keeping {result[e].joint_type.value}")
    return result


# --- PER-EDGE DRIVER ---

@dataclass(eq=False)
class EdgeEstimate:
    edge: Edge
    spec: JointSpec
    best: Dict[str, JointCandidate]
    diagnostics: Dict


def estimate_edge(edge: Edge, parent: PartRecord, child: PartRecord, parent_sdf: SdfField,
                  params: DwCavlParams, prior: Optional[JointTypePrior] = None,
                  virtual: bool = False) -> EdgeEstimate:
    """Contact region, candidates, ranking and type decision for one tree edge."""
    u, v = edge
    origin = child.centroid - parent.centroid
    if virtual:
        spec = JointSpec.fixed(origin)
        return EdgeEstimate(edge, spec, {}, {"edge": [u, v], "virtual": True, "candidates": [],
                                             "chosen": spec.joint_type.value})

    seed = params.seed + 7919 * u + v
    parent_pts, _ = sample_surface(parent.mesh, params.contact_samples, seed)
    child_pts, _ = sample_surface(child.mesh, params.contact_samples, seed + 1)
    try:
        region = extract_contact_region(parent_pts, child_pts, params.tau_c, params.decay_scale)
    except NoContact:
        logger.warning(f"Edge {u}->{v}: no contact region, using closest-pair midpoint")
        region = closest_pair_region(parent_pts, child_pts)

    rng = np.random.default_rng([params.seed, u, v])
    candidates = generate_candidates(region, params, rng)
    child_samples, _ = sample_surface(child.mesh, params.refine_samples, seed + 2)
    ranking = rank_and_refine(candidates, child_samples, parent_sdf, region.centroid, params)

    s_rev, s_pri = ranking.score(REVOLUTE), ranking.score(PRISMATIC)
    features = {"s_rev": s_rev, "s_pri": s_pri, "region": region.to_dict()}
    distribution = prior.predict(edge, features) if prior is not None else None
    joint_type = classify_joint(s_rev, s_pri, distribution, params)
    spec = spec_from_candidate(joint_type, origin, ranking.best, params.diagonal)
    logger.info(f"Edge {u}->{v}: s_rev={s_rev:.4f} s_pri={s_pri:.4f} -> {spec.joint_type.value}")

    diagnostics = {
        "edge": [u, v],
        "region": region.to_dict(),
        "candidates": [c.to_dict() for c in ranking.refined],
        "scores": {"revolute": s_rev, "prismatic": s_pri},
        "prior": distribution,
        "chosen": spec.joint_type.value,
    }
    return EdgeEstimate(edge, spec, ranking.best, diagnostics)


def estimate_joints(tree: KinematicTree, parts: Sequence[PartRecord], sdfs: Sequence[SdfField],
                    params: DwCavlParams, clusters: Optional[SymmetryClusters] = None,
                    prior: Optional[JointTypePrior] = None,
                    threads: int = 1) -> Tuple[Dict[Edge, JointSpec], List[Dict]]:
    """
    Estimate every tree edge (in parallel), then harmonize types within symmetry clusters.

    Returns:
        Tuple of (joint specs keyed by (parent, child), per-edge diagnostics)
    """
    by_id = {p.id: i for i, p in enumerate(parts)}
    prior = prior if prior is not None else AbstainingPrior()

    def run(e):
        return estimate_edge(e.key, parts[by_id[e.parent]], parts[by_id[e.child]], sdfs[by_id[e.parent]],
                             params, prior, virtual=e.virtual)

    estimates = Parallel(n_jobs=threads, prefer="threads")(delayed(run)(e) for e in tree.edges)
    by_edge = {est.edge: est for est in estimates}
    specs = {est.edge: est.spec for est in estimates}

    def refit(edge: Edge, joint_type: JointType) -> JointSpec:
        est = by_edge[edge]
        return spec_from_candidate(joint_type, est.spec.origin, est.best, params.diagonal)

    harmonized = harmonize_types(tree, clusters, specs, refit)
    diagnostics = []
    for est in estimates:
        entry = dict(est.diagnostics)
        entry["chosen"] = harmonized[est.edge].joint_type.value
        diagnostics.append(entry)
    return harmonized, diagnostics
