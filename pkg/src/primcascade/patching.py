"""Small-primitive heatmaps, pool binarization and covering patch extraction."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud

GT_SCALE = "GtScale"
CURVATURE = "Curvature"


@dataclass(eq=False)
class Heatmap:
    scores: np.ndarray
    source: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("heatmap scores must lie in [0, 1]")


@dataclass(eq=False)
class Patch:
    seed_index: int
    member_indices: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def to_frame(self, points):
        return (np.asarray(points) - self.center) / self.scale

    def from_frame(self, points):
        return np.asarray(points) * self.scale + self.center


@dataclass(eq=False)
class PatchCover:
    """Result of covering sampling; iterable over its patches."""

    patches: list
    pool_indices: np.ndarray
    covered: np.ndarray
    mapping_distance: np.ndarray

    def __iter__(self):
        return iter(self.patches)

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, i):
        return self.patches[i]

    @property
    def complete(self) -> bool:
        return bool(self.covered.all())

    @property
    def uncovered_count(self) -> int:
        return int((~self.covered).sum())


def gt_scale_heatmap(labels, eta: float, subset=None) -> Heatmap:
    """Score 1 for points whose ground-truth primitive owns fewer than ``eta * N`` points.

    ``labels`` are the full-resolution labels (or a Scene/PointCloud carrying
    them); counts are always taken at full resolution. ``subset`` selects the
    (downsampled) points the heatmap is reported on.
    """
    if hasattr(labels, "cloud"):
        labels = labels.cloud
    if isinstance(labels, PointCloud):
        if labels.gt_label is None:
            raise ValueError("ground-truth labels are required for the scale heatmap")
        labels = labels.gt_label
    labels = np.asarray(labels)
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    valid = labels >= 0
    counts = np.bincount(labels[valid], minlength=1) if valid.any() else np.zeros(1, int)
    small = counts < eta * len(labels)
    scores = np.zeros(len(labels))
    scores[valid] = small[labels[valid]].astype(float)
    if subset is not None:
        scores = scores[np.asarray(subset)]
    return Heatmap(scores, GT_SCALE)


def mean_curvature(points, k_neighbors: int = 30) -> np.ndarray:
    """Unsigned mean curvature from a weighted quadric height field over kNN.

    The height field lives in the local PCA frame of each neighbourhood,
    centred at the query point.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if k_neighbors < 6:
        raise ValueError("k_neighbors must be at least 6")
    if n < k_neighbors:
        raise ValueError(f"cloud has {n} points, fewer than k_neighbors={k_neighbors}")
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=k_neighbors)
    nb = pts[idx] - pts[:, None, :]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, evecs = np.linalg.eigh(cov)
    local = np.einsum("nki,nij->nkj", nb, evecs)
    u, v, h = local[..., 2], local[..., 1], local[..., 0]
    scale = np.maximum(dist[:, -1:], 1e-12)
    w = np.exp(-(dist / scale) ** 2)
    us, vs = u / scale, v / scale
    design = np.stack([us * us, us * vs, vs * vs, us, vs, np.ones_like(us)], axis=-1)
    dw = design * w[..., None]
    lhs = np.einsum("nki,nkj->nij", dw, design) + 1e-12 * np.eye(6)
    rhs = np.einsum("nki,nk->ni", dw, h / scale)
    coef = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    # back to unscaled coordinates: second derivatives pick up 1/scale
    s = scale[:, 0]
    fuu, fuv, fvv = 2 * coef[:, 0] / s, coef[:, 1] / s, 2 * coef[:, 2] / s
    fu, fv = coef[:, 3], coef[:, 4]
    num = (1 + fv**2) * fuu - 2 * fu * fv * fuv + (1 + fu**2) * fvv
    return np.abs(num / (2 * (1 + fu**2 + fv**2) ** 1.5))


def curvature_heatmap(cloud, k_neighbors: int = 30, top_fraction: float = 0.2,
                      clip_percentile: float = 99.0) -> Heatmap:
    """Top ``top_fraction`` of points by clipped mean curvature score 1."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must lie in (0, 1]")
    curv = mean_curvature(pts, k_neighbors)
    curv = np.minimum(curv, np.percentile(curv, clip_percentile))
    n_top = int(round(top_fraction * len(pts)))
    order = np.lexsort((np.arange(len(pts)), -curv))
    scores = np.zeros(len(pts))
    scores[order[:n_top]] = 1.0
    return Heatmap(scores, CURVATURE)


def binarize_and_pool(heatmap: Heatmap, theta: float = 0.5) -> np.ndarray:
    if not 0 <= theta <= 1:
        raise ValueError("theta must lie in [0, 1]")
    return np.flatnonzero(heatmap.scores > theta)


def sample_covering_patches(cloud, pool_points, n: int, max_patches: int = 32,
                            seed: int = 0, tree: Optional[cKDTree] = None) -> PatchCover:
    """Extract kNN patches of ``n`` points until every pool point is covered.

    ``pool_points`` are positions (typically from the downsampled cloud); each
    is mapped to its nearest full-resolution point before sampling.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    pool_points = np.asarray(pool_points, dtype=float).reshape(-1, 3)
    if n > len(pts):
        raise ValueError(f"patch size {n} exceeds cloud size {len(pts)}")
    tree = tree if tree is not None else cKDTree(pts)
    if len(pool_points) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return PatchCover([], empty, np.zeros(0, bool), np.zeros(0))
    map_dist, pool_idx = tree.query(pool_points, k=1)
    pool_idx = pool_idx.astype(np.int64)
    covered = np.zeros(len(pool_idx), dtype=bool)
    rng = np.random.default_rng(seed)
    patches = []
    in_patch = np.zeros(len(pts), dtype=bool)
    while not covered.all() and len(patches) < max_patches:
        candidates = np.flatnonzero(~covered)
        pick = candidates[rng.integers(len(candidates))]
        seed_index = int(pool_idx[pick])
        _, members = tree.query(pts[seed_index], k=n)
        members = np.atleast_1d(members).astype(np.int64)
        if seed_index not in members:
            # equidistant ties can push the seed out of its own neighbourhood
            members[-1] = seed_index
        patches.append(Patch(seed_index, members))
        in_patch[:] = False
        in_patch[members] = True
        covered |= in_patch[pool_idx]
    return PatchCover(patches, pool_idx, covered, map_dist)


def normalize_patch(patch: Patch, cloud) -> tuple:
    """Center on the patch centroid and scale to the unit ball.

    Returns ``(points, normals, patch)`` where the returned patch records the
    transform; normals are unchanged because the transform has no rotation.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    nrm = cloud.normals if isinstance(cloud, PointCloud) else None
    local = pts[patch.member_indices]
    center = local.mean(axis=0)
    radius = float(np.max(np.linalg.norm(local - center, axis=1)))
    if not radius > 0:
        raise ValueError("degenerate patch: all points coincide")
    # snap round-off so an already-normalized patch gets the identity transform
    if np.linalg.norm(center) < 1e-12:
        center = np.zeros(3)
    if abs(radius - 1.0) < 1e-12:
        radius = 1.0
    out = Patch(patch.seed_index, patch.member_indices, center, radius)
    normals = None if nrm is None else nrm[patch.member_indices].copy()
    return (local - center) / radius, normals, out


# --- patch set file -----------------------------------------------------------------


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_patch_set(cover: PatchCover, path, cloud_path=None, extra: Optional[dict] = None):
    rec = {
        "format": "cpfpatches 1",
        "cloud": None if cloud_path is None else str(cloud_path),
        "cloud_sha256": None if cloud_path is None else file_sha256(cloud_path),
        "pool_indices": cover.pool_indices.tolist(),
        "covered": cover.covered.astype(int).tolist(),
        "mapping_distance": cover.mapping_distance.tolist(),
        "patches": [{"seed_index": int(p.seed_index), "members": p.member_indices.tolist(),
                     "center": np.asarray(p.center).tolist(), "scale": float(p.scale)}
                    for p in cover.patches],
    }
    if extra:
        rec.update(extra)
    Path(path).write_text(json.dumps(rec))


def load_patch_set(path, verify_cloud: bool = True) -> tuple:
    rec = json.loads(Path(path).read_text())
    if rec.get("format") != "cpfpatches 1":
        raise ValueError(f"{path}: not a patch set file")
    if verify_cloud and rec.get("cloud") and Path(rec["cloud"]).exists():
        if file_sha256(rec["cloud"]) != rec["cloud_sha256"]:
            raise ValueError(f"{path}: referenced cloud content hash mismatch")
    patches = [Patch(int(p["seed_index"]), np.asarray(p["members"], dtype=np.int64),
                     np.asarray(p["center"], dtype=float), float(p["scale"]))
               for p in rec["patches"]]
    cover = PatchCover(patches, np.asarray(rec["pool_indices"], dtype=np.int64),
                       np.asarray(rec["covered"], dtype=bool),
                       np.asarray(rec["mapping_distance"], dtype=float))
    return cover, rec
