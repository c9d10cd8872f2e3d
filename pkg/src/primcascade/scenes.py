"""Scene recipes with controlled primitive scales."""

from __future__ import annotations

import math

import numpy as np

from .cloud import SceneSpec, random_surface
from .primitives import CylinderBand, Rectangle, SphereCap, orthonormal_frame


def _surface_with_area(kind: int, area: float, seed) -> object:
    # all surface dimensions scale linearly with size, so area scales with size^2
    unit = random_surface(kind, 1.0, np.random.default_rng(seed))
    return random_surface(kind, math.sqrt(area / unit.area()), np.random.default_rng(seed))


def small_primitive_spec(seed: int, n_large: int = 4, n_small: int = 4,
                         small_fraction=(0.006, 0.009)) -> SceneSpec:
    """A few large random primitives plus ``n_small`` owning 0.6-0.9% of the area each."""
    ss = np.random.SeedSequence([seed, 1729])
    rng = np.random.default_rng(ss.spawn(1)[0])
    kinds_large = rng.choice(4, size=n_large, p=[0.4, 0.1, 0.3, 0.2])
    large = [random_surface(int(k), float(rng.uniform(0.5, 0.9)), rng) for k in kinds_large]
    area_large = sum(s.area() for s in large)
    fr = rng.uniform(*small_fraction, size=n_small)
    total = area_large / (1.0 - fr.sum())
    kinds_small = rng.choice(4, size=n_small)
    small = [_surface_with_area(int(k), f * total, rng.integers(2**63))
             for k, f in zip(kinds_small, fr)]
    return SceneSpec(seed=seed, surfaces=tuple(large + small))


def curvature_aligned_spec(seed: int = 0) -> SceneSpec:
    """Large flat panels plus small, strongly curved spheres and cylinders.

    Panels sit apart from each other so no crease adds curvature; the curved
    parts own roughly 15% of the area in total, each under 5%.
    """
    rng = np.random.default_rng(seed)
    surfaces = []
    for k in range(3):
        c = np.array([0.0, 0.0, -1.2 + 1.2 * k]) + rng.uniform(-0.05, 0.05, 3)
        nrm = np.array([0.0, 0.0, 1.0]) + rng.uniform(-0.1, 0.1, 3)
        nrm /= np.linalg.norm(nrm)
        u, _ = orthonormal_frame(nrm)
        surfaces.append(Rectangle(c, nrm, u, 1.0, 0.8))
    panel_area = sum(s.area() for s in surfaces)
    target = 0.15 / 0.85 * panel_area
    small = []
    for k in range(6):
        c = np.array([2.2 + 0.6 * (k % 3), 0.7 * (k // 3), -0.6 + 0.4 * k])
        a = target / 6
        if k % 2 == 0:
            r = math.sqrt(a / (4 * math.pi))
            small.append(SphereCap(c, r, np.array([0.0, 0.0, 1.0]), math.pi))
        else:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            r = math.sqrt(a / (2 * math.pi * 3.0))
            small.append(CylinderBand(c, axis, r, 3.0 * r))
    return SceneSpec(seed=seed, surfaces=tuple(surfaces + small))


def flat_facet_spec(seed: int = 0) -> SceneSpec:
    """A large sphere and cylinder with small flat facets: small parts are flat."""
    rng = np.random.default_rng(seed)
    big = [SphereCap(np.array([0.0, 0.0, 0.0]), 0.8, np.array([0.0, 0.0, 1.0]), math.pi),
           CylinderBand(np.array([2.2, 0.0, -0.8]), np.array([0.0, 0.0, 1.0]), 0.6, 1.6)]
    big_area = sum(s.area() for s in big)
    facets = []
    for k in range(5):
        c = np.array([-1.6 - 0.5 * k, 1.2 * (k % 2), 0.3 * k])
        nrm = rng.normal(size=3)
        nrm /= np.linalg.norm(nrm)
        u, _ = orthonormal_frame(nrm)
        half = math.sqrt(0.02 * big_area / 4)
        facets.append(Rectangle(c, nrm, u, half, half))
    return SceneSpec(seed=seed, surfaces=tuple(big + facets))

