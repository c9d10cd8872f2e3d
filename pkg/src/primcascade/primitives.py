"""Analytic primitives (plane, sphere, cylinder, cone) and trimmed surface patches.

Primitives are untrimmed analytic surfaces used for fitting and distance
queries. The ``Bounded*`` classes carry a trimming region on top of a
primitive so that scenes can be sampled with known areas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

PLANE, SPHERE, CYLINDER, CONE = 0, 1, 2, 3
TYPE_NAMES = ("plane", "sphere", "cylinder", "cone")
NO_TYPE = 255


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("zero-length direction")
    return v / n


def canonical_direction(v) -> np.ndarray:
    """Flip ``v`` so it points toward +z (ties broken toward +y, then +x)."""
    v = _unit(v)
    for comp in (2, 1, 0):
        if v[comp] > 0:
            return v
        if v[comp] < 0:
            return -v
    return v


def orthonormal_frame(axis) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``axis`` to a right-handed orthonormal basis."""
    a = _unit(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return e1, e2


@dataclass(frozen=True, eq=False)
class Plane:
    normal: np.ndarray
    offset: float

    kind = PLANE

    def canonical(self) -> "Plane":
        n = _unit(self.normal)
        c = canonical_direction(n)
        sign = 1.0 if np.dot(c, n) > 0 else -1.0
        return Plane(c, sign * float(self.offset))

    def distance(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.abs(p @ self.normal - self.offset)

    def surface_normals(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.broadcast_to(self.normal, p.shape).copy()

    @property
    def direction(self) -> np.ndarray:
        return self.normal

    def to_frame(self, center, scale) -> "Plane":
        return Plane(self.normal.copy(), (self.offset - float(self.normal @ center)) / scale)

    def from_frame(self, center, scale) -> "Plane":
        return Plane(self.normal.copy(), self.offset * scale + float(self.normal @ center))

    def params(self) -> dict:
        return {"normal": self.normal.tolist(), "offset": float(self.offset)}


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    kind = SPHERE

    def canonical(self) -> "Sphere":
        return self

    def distance(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.abs(np.linalg.norm(p - self.center, axis=1) - self.radius)

    def surface_normals(self, points) -> np.ndarray:
        d = np.atleast_2d(points) - self.center
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return d / np.where(n > 0, n, 1.0)

    direction = None

    def to_frame(self, center, scale) -> "Sphere":
        return Sphere((self.center - center) / scale, self.radius / scale)

    def from_frame(self, center, scale) -> "Sphere":
        return Sphere(self.center * scale + center, self.radius * scale)

    def params(self) -> dict:
        return {"center": self.center.tolist(), "radius": float(self.radius)}


@dataclass(frozen=True, eq=False)
class Cylinder:
    axis: np.ndarray
    axis_point: np.ndarray
    radius: float

    kind = CYLINDER

    def canonical(self) -> "Cylinder":
        a = canonical_direction(self.axis)
        q = self.axis_point - (self.axis_point @ a) * a
        return Cylinder(a, q, float(self.radius))

    def _radial(self, points):
        d = np.atleast_2d(points) - self.axis_point
        return d - np.outer(d @ self.axis, self.axis)

    def distance(self, points) -> np.ndarray:
        return np.abs(np.linalg.norm(self._radial(points), axis=1) - self.radius)

    def surface_normals(self, points) -> np.ndarray:
        r = self._radial(points)
        n = np.linalg.norm(r, axis=1, keepdims=True)
        return r / np.where(n > 0, n, 1.0)

    @property
    def direction(self) -> np.ndarray:
        return self.axis

    def to_frame(self, center, scale) -> "Cylinder":
        return Cylinder(self.axis.copy(), (self.axis_point - center) / scale, self.radius / scale)

    def from_frame(self, center, scale) -> "Cylinder":
        return Cylinder(self.axis.copy(), self.axis_point * scale + center, self.radius * scale)

    def params(self) -> dict:
        return {"axis": self.axis.tolist(), "axis_point": self.axis_point.tolist(),
                "radius": float(self.radius)}


@dataclass(frozen=True, eq=False)
class Cone:
    """Single-nappe cone; ``axis`` points from the apex into the opening."""

    apex: np.ndarray
    axis: np.ndarray
    half_angle: float

    kind = CONE

    def canonical(self) -> "Cone":
        # the axis sign carries geometry (which nappe), so it is only normalized
        return Cone(self.apex, _unit(self.axis), float(self.half_angle))

    def _meridian(self, points):
        v = np.atleast_2d(points) - self.apex
        h = v @ self.axis
        radial = v - np.outer(h, self.axis)
        r = np.linalg.norm(radial, axis=1)
        return v, h, r, radial

    def distance(self, points) -> np.ndarray:
        v, h, r, _ = self._meridian(points)
        s, c = math.sin(self.half_angle), math.cos(self.half_angle)
        along = h * c + r * s
        return np.where(along >= 0, np.abs(r * c - h * s), np.linalg.norm(v, axis=1))

    def surface_normals(self, points) -> np.ndarray:
        _, _, r, radial = self._meridian(points)
        e_r = radial / np.where(r > 0, r, 1.0)[:, None]
        s, c = math.sin(self.half_angle), math.cos(self.half_angle)
        return c * e_r - s * self.axis

    @property
    def direction(self) -> np.ndarray:
        return self.axis

    def to_frame(self, center, scale) -> "Cone":
        return Cone((self.apex - center) / scale, self.axis.copy(), self.half_angle)

    def from_frame(self, center, scale) -> "Cone":
        return Cone(self.apex * scale + center, self.axis.copy(), self.half_angle)

    def params(self) -> dict:
        return {"apex": self.apex.tolist(), "axis": self.axis.tolist(),
                "half_angle": float(self.half_angle)}


Primitive = Union[Plane, Sphere, Cylinder, Cone]


def distance_to(primitive: Primitive, point) -> float | np.ndarray:
    """Unsigned Euclidean distance from point(s) to the untrimmed surface.

    A single 3-vector returns a float; an (M, 3) array returns an (M,) array.
    """
    p = np.asarray(point, dtype=float)
    d = primitive.distance(p)
    return float(d[0]) if p.ndim == 1 else d


def primitive_to_dict(prim: Primitive) -> dict:
    return {"kind": TYPE_NAMES[prim.kind], **prim.params()}


def primitive_from_dict(d: dict) -> Primitive:
    kind = d["kind"]
    arr = lambda key: np.asarray(d[key], dtype=float)  # noqa: E731
    if kind == "plane":
        return Plane(arr("normal"), float(d["offset"]))
    if kind == "sphere":
        return Sphere(arr("center"), float(d["radius"]))
    if kind == "cylinder":
        return Cylinder(arr("axis"), arr("axis_point"), float(d["radius"]))
    if kind == "cone":
        return Cone(arr("apex"), arr("axis"), float(d["half_angle"]))
    raise ValueError(f"unknown primitive kind {kind!r}")


def primitives_equal(a: Primitive, b: Primitive) -> bool:
    if a.kind != b.kind:
        return False
    pa, pb = a.params(), b.params()
    return all(np.array_equal(np.asarray(pa[k]), np.asarray(pb[k])) for k in pa)


# --- trimmed surfaces used for synthesis --------------------------------------------


@dataclass(frozen=True, eq=False)
class Rectangle:
    """Planar rectangle: ``center`` plus half extents along two in-plane axes."""

    center: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    half_u: float
    half_v: float

    kind = PLANE

    @property
    def v(self) -> np.ndarray:
        return np.cross(self.normal, self.u)

    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v

    def primitive(self) -> Plane:
        return Plane(self.normal, float(self.normal @ self.center))

    def sample(self, n: int, rng: np.random.Generator):
        a = rng.uniform(-self.half_u, self.half_u, n)
        b = rng.uniform(-self.half_v, self.half_v, n)
        pts = self.center + np.outer(a, self.u) + np.outer(b, self.v)
        return pts, np.tile(self.normal, (n, 1))

    def transformed(self, center, scale) -> "Rectangle":
        return Rectangle((self.center - center) / scale, self.normal, self.u,
                         self.half_u / scale, self.half_v / scale)


@dataclass(frozen=True, eq=False)
class SphereCap:
    """Points of a sphere within polar angle ``cap_angle`` of ``pole``."""

    center: np.ndarray
    radius: float
    pole: np.ndarray
    cap_angle: float = math.pi

    kind = SPHERE

    def area(self) -> float:
        return 2.0 * math.pi * self.radius**2 * (1.0 - math.cos(self.cap_angle))

    def primitive(self) -> Sphere:
        return Sphere(self.center, self.radius)

    def sample(self, n: int, rng: np.random.Generator):
        cos_t = rng.uniform(math.cos(self.cap_angle), 1.0, n)
        sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
        phi = rng.uniform(0.0, 2.0 * math.pi, n)
        e1, e2 = orthonormal_frame(self.pole)
        nrm = (np.outer(cos_t, self.pole) + np.outer(sin_t * np.cos(phi), e1)
               + np.outer(sin_t * np.sin(phi), e2))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return self.center + self.radius * nrm, nrm

    def transformed(self, center, scale) -> "SphereCap":
        return SphereCap((self.center - center) / scale, self.radius / scale, self.pole,
                         self.cap_angle)


@dataclass(frozen=True, eq=False)
class CylinderBand:
    """Cylinder between heights 0 and ``height`` above ``base``, spanning ``arc`` radians."""

    base: np.ndarray
    axis: np.ndarray
    radius: float
    height: float
    arc: float = 2.0 * math.pi

    kind = CYLINDER

    def area(self) -> float:
        return self.arc * self.radius * self.height

    def primitive(self) -> Cylinder:
        return Cylinder(self.axis, self.base, self.radius)

    def sample(self, n: int, rng: np.random.Generator):
        t = rng.uniform(0.0, self.height, n)
        phi = rng.uniform(0.0, self.arc, n)
        e1, e2 = orthonormal_frame(self.axis)
        nrm = np.outer(np.cos(phi), e1) + np.outer(np.sin(phi), e2)
        return self.base + np.outer(t, self.axis) + self.radius * nrm, nrm

    def transformed(self, center, scale) -> "CylinderBand":
        return CylinderBand((self.base - center) / scale, self.axis, self.radius / scale,
                            self.height / scale, self.arc)


@dataclass(frozen=True, eq=False)
class ConeFrustum:
    """Cone surface between slant distances ``s0`` and ``s1`` from the apex."""

    apex: np.ndarray
    axis: np.ndarray
    half_angle: float
    s0: float
    s1: float
    arc: float = 2.0 * math.pi

    kind = CONE

    def area(self) -> float:
        return 0.5 * self.arc * math.sin(self.half_angle) * (self.s1**2 - self.s0**2)

    def primitive(self) -> Cone:
        return Cone(self.apex, self.axis, self.half_angle)

    def sample(self, n: int, rng: np.random.Generator):
        # slant density grows linearly with s
        s = np.sqrt(rng.uniform(self.s0**2, self.s1**2, n))
        phi = rng.uniform(0.0, self.arc, n)
        e1, e2 = orthonormal_frame(self.axis)
        e_r = np.outer(np.cos(phi), e1) + np.outer(np.sin(phi), e2)
        sa, ca = math.sin(self.half_angle), math.cos(self.half_angle)
        gen = ca * self.axis + sa * e_r
        nrm = ca * e_r - sa * self.axis
        return self.apex + s[:, None] * gen, nrm

    def transformed(self, center, scale) -> "ConeFrustum":
        return ConeFrustum((self.apex - center) / scale, self.axis, self.half_angle,
                           self.s0 / scale, self.s1 / scale, self.arc)


BoundedSurface = Union[Rectangle, SphereCap, CylinderBand, ConeFrustum]

_SURFACE_CLASSES = {"rectangle": Rectangle, "sphere_cap": SphereCap,
                    "cylinder_band": CylinderBand, "cone_frustum": ConeFrustum}


def surface_to_dict(s: BoundedSurface) -> dict:
    name = {v: k for k, v in _SURFACE_CLASSES.items()}[type(s)]
    out = {"surface": name}
    for field in s.__dataclass_fields__:
        val = getattr(s, field)
        out[field] = val.tolist() if isinstance(val, np.ndarray) else float(val)
    return out


def surface_from_dict(d: dict) -> BoundedSurface:
    cls = _SURFACE_CLASSES[d["surface"]]
    kwargs = {}
    for field in cls.__dataclass_fields__:
        val = d[field]
        kwargs[field] = np.asarray(val, dtype=float) if isinstance(val, list) else float(val)
    return cls(**kwargs)
