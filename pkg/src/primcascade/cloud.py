"""Point clouds, synthetic scenes with ground truth, cloud files and FPS."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .primitives import (BoundedSurface, ConeFrustum, CylinderBand, Primitive,
                         Rectangle, SphereCap, orthonormal_frame, primitive_from_dict,
                         primitive_to_dict, surface_from_dict, surface_to_dict)

K_GLOB = 28
K_LOC = 21
SURFACE_SAMPLES = 512
CULL_AREA_FRACTION = 0.005

MAGIC = "CPFCLOUD"
_FLAG_SETS = ("P", "PN", "PNL", "PNLT")


class CloudFormatError(ValueError):
    pass


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    gt_label: Optional[np.ndarray] = None
    gt_type: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != n:
                raise ValueError("normals length differs from points")
            bad = np.flatnonzero(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-9)
            if len(bad):
                raise ValueError(f"normal of record {bad[0] + 1} is not unit length")
        if self.gt_label is not None:
            self.gt_label = np.ascontiguousarray(self.gt_label, dtype=np.int32).reshape(-1)
            if len(self.gt_label) != n:
                raise ValueError("gt_label length differs from points")
        if self.gt_type is not None:
            self.gt_type = np.ascontiguousarray(self.gt_type, dtype=np.uint8).reshape(-1)
            if len(self.gt_type) != n:
                raise ValueError("gt_type length differs from points")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def flags(self) -> str:
        flags = "P"
        if self.normals is not None:
            flags += "N"
            if self.gt_label is not None:
                flags += "L"
                if self.gt_type is not None:
                    flags += "T"
        return flags

    def subset(self, idx) -> "PointCloud":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return PointCloud(self.points[idx], pick(self.normals), pick(self.gt_label),
                          pick(self.gt_type))

    def identical(self, other: "PointCloud") -> bool:
        """Bitwise equality of every channel."""
        for name in ("points", "normals", "gt_label", "gt_type"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.dtype != b.dtype or a.tobytes() != b.tobytes()):
                return False
        return True


# --- cloud file ---------------------------------------------------------------------


def cloud_to_bytes(cloud: PointCloud) -> bytes:
    flags = cloud.flags
    if flags not in _FLAG_SETS:
        raise ValueError(f"unsupported channel combination {flags}")
    parts = [f"{MAGIC} 1 {len(cloud)} {flags}\n".encode("ascii"),
             cloud.points.astype("<f8").tobytes()]
    if "N" in flags:
        parts.append(cloud.normals.astype("<f8").tobytes())
    if "L" in flags:
        parts.append(cloud.gt_label.astype("<i4").tobytes())
    if "T" in flags:
        parts.append(cloud.gt_type.astype("u1").tobytes())
    return b"".join(parts)


def save_cloud(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(cloud_to_bytes(cloud))


def _read_block(buf: bytes, pos: int, count: int, width: int, dtype: str, name: str):
    end = pos + count * width
    if end > len(buf):
        have = (len(buf) - pos) // width
        raise CloudFormatError(f"truncated {name} block: record {have + 1} of {count} missing")
    return np.frombuffer(buf, dtype=dtype, count=count * (width // np.dtype(dtype).itemsize),
                         offset=pos), end


def cloud_from_bytes(buf: bytes) -> PointCloud:
    nl = buf.find(b"\n")
    if nl < 0:
        raise CloudFormatError("malformed header: no newline")
    try:
        magic, version, count_s, flags = buf[:nl].decode("ascii").split()
        count = int(count_s)
    except (UnicodeDecodeError, ValueError) as exc:
        raise CloudFormatError(f"malformed header: {buf[:nl][:80]!r}") from exc
    if magic != MAGIC or version != "1":
        raise CloudFormatError(f"malformed header: expected '{MAGIC} 1', got '{magic} {version}'")
    if count < 0 or flags not in _FLAG_SETS:
        raise CloudFormatError(f"malformed header: count={count_s} flags={flags}")
    pos = nl + 1
    pts, pos = _read_block(buf, pos, count, 24, "<f8", "position")
    pts = pts.reshape(count, 3)
    nrm = lab = typ = None
    if "N" in flags:
        nrm, pos = _read_block(buf, pos, count, 24, "<f8", "normal")
        nrm = nrm.reshape(count, 3)
    if "L" in flags:
        lab, pos = _read_block(buf, pos, count, 4, "<i4", "label")
    if "T" in flags:
        typ, pos = _read_block(buf, pos, count, 1, "u1", "type")
    if pos != len(buf):
        raise CloudFormatError(f"{len(buf) - pos} trailing bytes after {count} records")
    for name, arr in (("position", pts), ("normal", nrm)):
        if arr is not None:
            bad = np.flatnonzero(~np.all(np.isfinite(arr), axis=1))
            if len(bad):
                raise CloudFormatError(f"non-finite {name} at record {bad[0] + 1}")
    return PointCloud(pts.astype(np.float64), None if nrm is None else nrm.astype(np.float64),
                      None if lab is None else lab.astype(np.int32),
                      None if typ is None else typ.astype(np.uint8))


def load_cloud(path) -> PointCloud:
    return cloud_from_bytes(Path(path).read_bytes())


# --- scenes -------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic scene.

    Either ``surfaces`` lists explicit trimmed primitives, or ``n_primitives``
    random ones are drawn using ``type_mix`` (relative weights for plane,
    sphere, cylinder, cone) and a log-uniform ``size_range``.
    """

    n_primitives: int = 0
    type_mix: tuple = (0.4, 0.1, 0.3, 0.2)
    size_range: tuple = (0.15, 0.9)
    seed: int = 0
    surfaces: tuple = ()


@dataclass(eq=False)
class Scene:
    surfaces: list
    cloud: PointCloud
    surface_samples: np.ndarray
    culled: list = field(default_factory=list)
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    @property
    def primitives(self) -> list:
        return [s.primitive() for s in self.surfaces]

    @property
    def types(self) -> np.ndarray:
        return np.array([s.kind for s in self.surfaces], dtype=np.uint8)

    def identical(self, other: "Scene") -> bool:
        return (self.cloud.identical(other.cloud)
                and self.surface_samples.tobytes() == other.surface_samples.tobytes()
                and json.dumps([surface_to_dict(s) for s in self.surfaces])
                == json.dumps([surface_to_dict(s) for s in other.surfaces]))


def _random_rotation_axis(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_surface(kind: int, size: float, rng: np.random.Generator) -> BoundedSurface:
    center = rng.uniform(-1.0, 1.0, 3)
    axis = _random_rotation_axis(rng)
    if kind == 0:
        e1, _ = orthonormal_frame(axis)
        return Rectangle(center, axis, e1, size, size * rng.uniform(0.5, 1.0))
    if kind == 1:
        return SphereCap(center, 0.5 * size, axis, rng.uniform(0.5 * math.pi, math.pi))
    if kind == 2:
        return CylinderBand(center, axis, size * rng.uniform(0.2, 0.5), size * rng.uniform(0.8, 2.0))
    alpha = math.radians(rng.uniform(15.0, 60.0))
    s0 = size * rng.uniform(0.2, 0.5)
    return ConeFrustum(center, axis, alpha, s0, s0 + size * rng.uniform(0.8, 1.5))


def _allocate(counts_total: int, areas: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``counts_total`` proportional to ``areas``."""
    share = areas / areas.sum() * counts_total
    base = np.floor(share).astype(int)
    rest = counts_total - base.sum()
    order = np.lexsort((np.arange(len(areas)), -(share - base)))
    base[order[:rest]] += 1
    return base


def synthesize_scene(spec: SceneSpec, total_points: int, noise_amplitude: float) -> Scene:
    """Sample a labelled, unit-sphere-normalized noisy point cloud from ``spec``."""
    if total_points < 1024:
        raise ValueError("total_points must be at least 1024")
    if noise_amplitude < 0 or noise_amplitude >= 1:
        raise ValueError("noise_amplitude must lie in [0, 1)")
    seq = np.random.SeedSequence(spec.seed)
    layout_rng, point_rng, noise_rng, sample_rng = (np.random.default_rng(s) for s in seq.spawn(4))

    if spec.surfaces:
        surfaces = list(spec.surfaces)
    else:
        if not 1 <= spec.n_primitives <= K_GLOB:
            raise ValueError(f"n_primitives must lie in [1, {K_GLOB}]")
        mix = np.asarray(spec.type_mix, dtype=float)
        mix = mix / mix.sum()
        lo, hi = spec.size_range
        surfaces = []
        for _ in range(spec.n_primitives):
            kind = int(layout_rng.choice(4, p=mix))
            size = float(np.exp(layout_rng.uniform(math.log(lo), math.log(hi))))
            surfaces.append(random_surface(kind, size, layout_rng))
    if len(surfaces) > K_GLOB:
        raise ValueError(f"scene requests {len(surfaces)} primitives, more than {K_GLOB}")
    if not surfaces:
        raise ValueError("scene needs at least one primitive")

    areas = np.array([s.area() for s in surfaces], dtype=float)
    for i, a in enumerate(areas):
        if not np.isfinite(a) or a <= 0:
            raise ValueError(f"degenerate primitive {i} ({type(surfaces[i]).__name__}): area {a}")
    keep = areas / areas.sum() >= CULL_AREA_FRACTION
    culled = [i for i in range(len(surfaces)) if not keep[i]]
    surfaces = [s for s, k in zip(surfaces, keep) if k]
    areas = areas[keep]

    counts = _allocate(total_points, areas)
    pts, nrm, lab = [], [], []
    for i, (surf, c) in enumerate(zip(surfaces, counts)):
        p, n = surf.sample(int(c), point_rng)
        pts.append(p)
        nrm.append(n)
        lab.append(np.full(int(c), i, dtype=np.int32))
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)
    lab = np.concatenate(lab)

    center = pts.mean(axis=0)
    radius = float(np.max(np.linalg.norm(pts - center, axis=1)))
    # leave room for the noise so noisy points stay in the unit ball
    scale = radius / (1.0 - noise_amplitude)
    surfaces = [s.transformed(center, scale) for s in surfaces]
    pts = (pts - center) / scale
    pts = pts + noise_rng.uniform(-noise_amplitude, noise_amplitude, len(pts))[:, None] * nrm

    perm = point_rng.permutation(len(pts))
    pts, nrm, lab = pts[perm], nrm[perm], lab[perm]
    types = np.array([s.kind for s in surfaces], dtype=np.uint8)[lab]

    samples = np.stack([s.sample(SURFACE_SAMPLES, sample_rng)[0] for s in surfaces])
    cloud = PointCloud(pts, nrm, lab, types)
    return Scene(surfaces, cloud, samples, culled, center, scale)


def save_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_cloud(scene.cloud, d / "cloud.cpf")
    meta = {
        "format": "cpfscene 1",
        "center": scene.center.tolist(),
        "scale": scene.scale,
        "culled": scene.culled,
        "surfaces": [surface_to_dict(s) for s in scene.surfaces],
        "primitives": [primitive_to_dict(p) for p in scene.primitives],
        "surface_samples": scene.surface_samples.tolist(),
    }
    (d / "scene.json").write_text(json.dumps(meta))


def load_scene(directory) -> Scene:
    d = Path(directory)
    cloud = load_cloud(d / "cloud.cpf")
    meta = json.loads((d / "scene.json").read_text())
    surfaces = [surface_from_dict(s) for s in meta["surfaces"]]
    samples = np.asarray(meta["surface_samples"], dtype=float).reshape(len(surfaces),
                                                                      SURFACE_SAMPLES, 3)
    return Scene(surfaces, cloud, samples, list(meta["culled"]),
                 np.asarray(meta["center"], dtype=float), float(meta["scale"]))


def save_primitives(prims: Sequence[Optional[Primitive]], path) -> None:
    Path(path).write_text(json.dumps(
        [None if p is None else primitive_to_dict(p) for p in prims], indent=1))


def load_primitives(path) -> list:
    return [None if d is None else primitive_from_dict(d)
            for d in json.loads(Path(path).read_text())]


# --- furthest point sampling --------------------------------------------------------


def fps_downsample(cloud, n: int, start_index: int = 0) -> np.ndarray:
    """Greedy furthest point sampling; ties go to the lowest index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    total = len(pts)
    if total == 0:
        raise ValueError("cannot downsample an empty cloud")
    if not 1 <= n <= total:
        raise ValueError(f"n={n} must lie in [1, {total}]")
    if not 0 <= start_index < total:
        raise ValueError(f"start_index {start_index} out of range")
    x, y, z = (np.ascontiguousarray(pts[:, i]) for i in range(3))
    mind = np.full(total, np.inf)
    d = np.empty(total)
    tmp = np.empty(total)
    out = np.empty(n, dtype=np.int64)
    cur = start_index
    for i in range(n):
        out[i] = cur
        np.subtract(x, x[cur], out=d)
        np.multiply(d, d, out=d)
        np.subtract(y, y[cur], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        d += tmp
        np.subtract(z, z[cur], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        d += tmp
        np.minimum(mind, d, out=mind)
        mind[cur] = -1.0
        cur = int(np.argmax(mind))
    return out
