"""Weighted closed-form estimation of primitive parameters.

Every fitter takes a :class:`WeightedSupport` (positions, unit normals and
non-negative membership weights) and returns a canonicalized primitive.
Degenerate supports raise :class:`FitError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .primitives import (CONE, CYLINDER, PLANE, SPHERE, Cone, Cylinder, Plane, Primitive,
                         Sphere)


class FitError(ValueError):
    """Support is degenerate for the requested primitive type."""


@dataclass(frozen=True, eq=False)
class WeightedSupport:
    positions: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (len(p) == len(n) == len(w)):
            raise ValueError("positions, normals and weights must have equal lengths")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        if w.sum() <= 0:
            raise ValueError("weights must have a positive sum")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, positions, normals=None):
        p = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = np.zeros_like(p) if normals is None else normals
        return cls(p, n, np.ones(len(p)))

    @property
    def normalized_weights(self) -> np.ndarray:
        return self.weights / self.weights.sum()


def _scatter(x: np.ndarray, w: np.ndarray, center=None):
    if center is None:
        center = w @ x
    d = x - center
    return center, (d * w[:, None]).T @ d


def fit_plane(support: WeightedSupport) -> Plane:
    """Weighted total least squares plane."""
    w = support.normalized_weights
    centroid, cov = _scatter(support.positions, w)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise FitError("plane fit: support is collinear (rank-deficient scatter)")
    normal = evecs[:, 0]
    return Plane(normal, float(normal @ centroid)).canonical()


def fit_sphere(support: WeightedSupport) -> Sphere:
    """Algebraic weighted least squares: minimize sum w (|p|^2 - 2 c.p + k)^2."""
    p = support.positions
    sw = np.sqrt(support.normalized_weights)
    # shift for conditioning; the objective is translation-covariant
    shift = support.normalized_weights @ p
    q = p - shift
    a = np.column_stack([2.0 * q, -np.ones(len(q))]) * sw[:, None]
    b = np.einsum("ij,ij->i", q, q) * sw
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise FitError("sphere fit: support is underdetermined (coplanar or too few points)")
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    c, k = sol[:3], sol[3]
    r2 = c @ c - k
    if not r2 > 0:
        raise FitError("sphere fit: recovered squared radius is not positive")
    return Sphere(c + shift, float(math.sqrt(r2)))


def _fit_circle_2d(xy: np.ndarray, w: np.ndarray):
    shift = w @ xy
    q = xy - shift
    sw = np.sqrt(w)
    a = np.column_stack([2.0 * q, -np.ones(len(q))]) * sw[:, None]
    b = np.einsum("ij,ij->i", q, q) * sw
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise FitError("cylinder fit: cross-section is degenerate")
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    c, k = sol[:2], sol[2]
    r2 = c @ c - k
    if not r2 > 0:
        raise FitError("cylinder fit: recovered squared radius is not positive")
    return c + shift, math.sqrt(r2)


def fit_cylinder(support: WeightedSupport) -> Cylinder:
    """Axis from the normal scatter, then an algebraic circle in the cross-section."""
    w = support.normalized_weights
    nrm = support.normals
    ntn = (nrm * w[:, None]).T @ nrm
    evals, evecs = np.linalg.eigh(ntn)
    if evals[1] - evals[0] < 1e-6 * max(evals.sum(), 1e-300):
        raise FitError("cylinder fit: normal scatter has no dominant axis (eigengap < 1e-6)")
    axis = evecs[:, 0]
    e1 = np.cross(axis, [1.0, 0.0, 0.0] if abs(axis[0]) < 0.9 else [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    centroid = w @ support.positions
    d = support.positions - centroid
    xy = np.column_stack([d @ e1, d @ e2])
    c2, radius = _fit_circle_2d(xy, w)
    point = centroid + c2[0] * e1 + c2[1] * e2
    return Cylinder(axis, point, radius).canonical()


def fit_cone(support: WeightedSupport) -> Cone:
    """Apex from tangent planes, axis and opening from the unit generator directions."""
    w = support.normalized_weights
    p, nrm = support.positions, support.normals
    m = (nrm * w[:, None]).T @ nrm
    rhs = (nrm * w[:, None]).T @ np.einsum("ij,ij->i", nrm, p)
    if np.linalg.cond(m) > 1e8:
        raise FitError("cone fit: apex system is ill-conditioned (near-parallel normals)")
    apex = np.linalg.solve(m, rhs)
    v = p - apex
    vn = np.linalg.norm(v, axis=1)
    keep = vn > 1e-12
    if keep.sum() < 3:
        raise FitError("cone fit: support collapses onto the apex")
    u = v[keep] / vn[keep, None]
    wk = w[keep] / w[keep].sum()
    # unit generators lie on a circle of the unit sphere: fit its supporting plane
    mean_u, cov = _scatter(u, wk)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-14:
        raise FitError("cone fit: generator directions do not span a circle")
    axis = evecs[:, 0]
    if axis @ mean_u < 0:
        axis = -axis
    angles = np.arccos(np.clip(u @ axis, -1.0, 1.0))
    half_angle = float(wk @ angles)
    if not math.radians(0.5) < half_angle < math.radians(89.5):
        raise FitError(f"cone fit: half angle {math.degrees(half_angle):.3f} deg out of range")
    return Cone(apex, axis, half_angle).canonical()


FITTERS = {PLANE: fit_plane, SPHERE: fit_sphere, CYLINDER: fit_cylinder, CONE: fit_cone}


def fit_primitive(kind: int, support: WeightedSupport) -> Primitive:
    return FITTERS[kind](support)


def weighted_residual(prim: Primitive, support: WeightedSupport) -> float:
    return float(support.normalized_weights @ prim.distance(support.positions))


def fit_best(support: WeightedSupport, preferred: int | None = None) -> tuple[Primitive, bool]:
    """Fit ``preferred``; if it is degenerate, return the best-fitting other type.

    The flag is True when the fallback was used.
    """
    if preferred is not None:
        try:
            return fit_primitive(preferred, support), False
        except FitError:
            pass
    best, best_res = None, math.inf
    for kind in (PLANE, SPHERE, CYLINDER, CONE):
        if kind == preferred:
            continue
        try:
            prim = fit_primitive(kind, support)
        except (FitError, np.linalg.LinAlgError):
            continue
        res = weighted_residual(prim, support)
        if res < best_res:
            best, best_res = prim, res
    if best is None:
        raise FitError("no primitive type can be fitted to this support")
    return best, preferred is not None
