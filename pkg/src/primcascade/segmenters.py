"""Segmentation backends: a corruptible ground-truth oracle and multi-type RANSAC.

Both return a :class:`SoftSegmentation` over a scope (the whole cloud or one
patch). Probabilities are stored sparsely: one row per scoped point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import fitprim
from .cloud import K_GLOB, PointCloud
from .primitives import CONE, CYLINDER, PLANE, SPHERE, Cone, Cylinder, Plane, Sphere

GLOBAL = -1
N_TYPES = 4


class SegmenterError(RuntimeError):
    pass


def scope_name(scope: int) -> str:
    return "global" if scope == GLOBAL else f"patch:{scope}"


def parse_scope(text: str) -> int:
    if text == "global":
        return GLOBAL
    if text.startswith("patch:") and text[6:].isdigit():
        return int(text[6:])
    raise ValueError(f"bad scope {text!r}")


@dataclass(eq=False)
class SoftSegmentation:
    """Per-point membership probabilities of one scope.

    ``probs`` has one row per entry of ``indices`` (full-cloud point ids);
    rows of points outside the scope are implicitly zero.
    """

    scope: int
    n_points: int
    indices: np.ndarray
    probs: np.ndarray
    type_probs: np.ndarray
    normals: np.ndarray
    primitives: Optional[list] = None
    leftover: Optional[np.ndarray] = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=float).reshape(len(self.indices), -1)
        self.type_probs = np.asarray(self.type_probs, dtype=float).reshape(len(self.indices),
                                                                           N_TYPES)
        self.normals = np.asarray(self.normals, dtype=float).reshape(len(self.indices), 3)

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_points, self.k))
        out[self.indices] = self.probs
        return out

    def labels(self) -> np.ndarray:
        """Per scoped point argmax segment (lowest index on ties)."""
        return np.argmax(self.probs, axis=1)

    def check(self, k_max: Optional[int] = None) -> None:
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("probability rows must sum to 1")
        if not np.allclose(self.type_probs.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("type probability rows must sum to 1")
        if k_max is not None and self.k > k_max:
            raise ValueError(f"{self.k} segments exceed the limit {k_max}")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("duplicate scope indices")


# --- segmentation file --------------------------------------------------------------


def save_segmentation(seg: SoftSegmentation, path) -> None:
    head = f"CPFSEG 1 {scope_name(seg.scope)} {seg.n_points} {seg.k}\n".encode("ascii")
    rec = np.zeros(len(seg.indices), dtype=[("i", "<i4"), ("p", "<f8", (seg.k,))])
    rec["i"] = seg.indices
    rec["p"] = seg.probs
    Path(path).write_bytes(head + rec.tobytes() + seg.type_probs.astype("<f8").tobytes()
                           + seg.normals.astype("<f8").tobytes())


def load_segmentation(path) -> SoftSegmentation:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    try:
        magic, ver, scope, n_full, k = buf[:nl].decode("ascii").split()
        n_full, k = int(n_full), int(k)
        scope_id = parse_scope(scope)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed segmentation header") from exc
    if magic != "CPFSEG" or ver != "1":
        raise ValueError(f"{path}: not a segmentation file")
    payload = len(buf) - nl - 1
    per_point = 4 + 8 * k + 8 * N_TYPES + 24
    if payload % per_point:
        raise ValueError(f"{path}: payload size {payload} is not a whole number of records")
    m = payload // per_point
    pos = nl + 1
    rec = np.frombuffer(buf, dtype=[("i", "<i4"), ("p", "<f8", (k,))], count=m, offset=pos)
    pos += rec.nbytes
    tp = np.frombuffer(buf, dtype="<f8", count=m * N_TYPES, offset=pos).reshape(m, N_TYPES)
    pos += tp.nbytes
    nrm = np.frombuffer(buf, dtype="<f8", count=m * 3, offset=pos).reshape(m, 3)
    return SoftSegmentation(scope_id, n_full, rec["i"].astype(np.int64),
                            rec["p"].astype(float).reshape(m, k), tp.astype(float),
                            nrm.astype(float))


# --- ground-truth oracle ------------------------------------------------------------


@dataclass(frozen=True)
class Corruption:
    flip_rate: float = 0.0
    temperature: float = 0.0
    normal_jitter_deg: float = 0.0
    split: bool = False
    merge: bool = False

    def validate(self):
        for name in ("flip_rate", "temperature"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.normal_jitter_deg <= 180.0:
            raise ValueError("normal_jitter_deg must lie in [0, 180]")


def _jitter_normals(normals, max_deg, rng):
    if max_deg <= 0:
        return normals.copy()
    m = len(normals)
    axis = np.cross(normals, rng.normal(size=(m, 3)))
    axis /= np.maximum(np.linalg.norm(axis, axis=1, keepdims=True), 1e-300)
    ang = np.radians(rng.uniform(0.0, max_deg, m))[:, None]
    # Rodrigues with axis perpendicular to the normal
    out = normals * np.cos(ang) + np.cross(axis, normals) * np.sin(ang)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def oracle_segment(indices, cloud: PointCloud, corruption: Corruption = Corruption(),
                   seed: int = 0, scope: int = GLOBAL, k_max: int = K_GLOB,
                   ) -> SoftSegmentation:
    """Ground-truth segmentation of a scope with controlled corruption."""
    corruption.validate()
    if hasattr(cloud, "cloud"):
        cloud = cloud.cloud
    if cloud.gt_label is None or cloud.gt_type is None:
        raise ValueError("oracle segmenter needs ground-truth labels and types")
    idx = np.asarray(indices, dtype=np.int64)
    rng = np.random.default_rng(seed)
    gt = cloud.gt_label[idx]
    uniq, local = np.unique(gt, return_inverse=True)
    seg_type = np.array([cloud.gt_type[idx][local == j][0] for j in range(len(uniq))])
    pts = cloud.points[idx]

    if corruption.merge and len(uniq) >= 2:
        sizes = np.bincount(local)
        a, b = sorted(np.argsort(-sizes, kind="stable")[:2])
        local = np.where(local == b, a, local)
        local = np.where(local > b, local - 1, local)
        seg_type = np.delete(seg_type, b)
    if corruption.split:
        sizes = np.bincount(local)
        big = int(np.argmax(sizes))
        sel = local == big
        if sel.sum() >= 2:
            p = pts[sel]
            c = p.mean(axis=0)
            _, vecs = np.linalg.eigh((p - c).T @ (p - c))
            side = (p - c) @ vecs[:, -1] > 0
            new = len(seg_type)
            loc_sel = local[sel]
            loc_sel[side] = new
            local[sel] = loc_sel
            seg_type = np.append(seg_type, seg_type[big])
    k = len(seg_type)
    if k > k_max:
        raise SegmenterError(f"scope has {k} segments, more than k_max={k_max}")

    labels = local.copy()
    if corruption.flip_rate > 0 and k >= 2:
        flip = rng.random(len(idx)) < corruption.flip_rate
        for j in range(k):
            src = flip & (local == j)
            if not src.any():
                continue
            others = np.flatnonzero(local != j)
            _, nn = cKDTree(pts[others]).query(pts[src], k=1)
            labels[src] = local[others[nn]]

    tau = corruption.temperature
    probs = np.full((len(idx), k), tau / k)
    probs[np.arange(len(idx)), labels] += 1.0 - tau
    tprobs = np.full((len(idx), N_TYPES), tau / N_TYPES)
    tprobs[np.arange(len(idx)), seg_type[labels]] += 1.0 - tau
    normals = _jitter_normals(cloud.normals[idx], corruption.normal_jitter_deg, rng)
    return SoftSegmentation(scope, len(cloud), idx, probs, tprobs, normals,
                            flags={"flipped": int((labels != local).sum())})


# --- RANSAC -------------------------------------------------------------------------


@dataclass(frozen=True)
class RansacParams:
    """``min_inliers`` below 1 is read as a fraction of the scope size."""

    max_dist: float = 0.01
    min_inliers: float = 0.01
    normal_thresh_deg: float = 25.84
    max_candidates: int = 1024
    k_max: int = K_GLOB
    seed: int = 0
    score_subset: int = 4096
    local_k: int = 48
    # sampling neighbourhoods cover at least this fraction of the scope, so dense
    # clouds do not draw minimal sets from noise-dominated specks
    local_fraction: float = 0.02
    cluster_epsilon: Optional[float] = None
    refit_iters: int = 2
    top_candidates: int = 3
    max_failed_rounds: int = 2

    def scaled(self, scale: float) -> "RansacParams":
        """Same parameters expressed in a frame shrunk by ``scale``."""
        eps = None if self.cluster_epsilon is None else self.cluster_epsilon / scale
        return RansacParams(**{**self.__dict__, "max_dist": self.max_dist / scale,
                               "cluster_epsilon": eps})


def _unit_rows(v):
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(n > 0, n, 1.0), n[:, 0]


def _line_closest(p1, d1, p2, d2):
    """Midpoints of closest approach of lines p1 + t d1 and p2 + s d2 (rows)."""
    w = p1 - p2
    a = np.einsum("ij,ij->i", d1, d1)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d2, d2)
    d = np.einsum("ij,ij->i", d1, w)
    e = np.einsum("ij,ij->i", d2, w)
    den = a * c - b * b
    ok = den > 1e-10
    den = np.where(ok, den, 1.0)
    t = (b * e - c * d) / den
    s = (a * e - b * d) / den
    return 0.5 * (p1 + t[:, None] * d1 + p2 + s[:, None] * d2), ok


def _plane_candidates(p, n):
    nrm, length = _unit_rows(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))
    ok = length > 1e-9
    return {"normal": nrm, "offset": np.einsum("ij,ij->i", nrm, p[:, 0])}, ok


def _sphere_candidates(p, n):
    c, ok = _line_closest(p[:, 0], n[:, 0], p[:, 1], n[:, 1])
    r = 0.5 * (np.linalg.norm(p[:, 0] - c, axis=1) + np.linalg.norm(p[:, 1] - c, axis=1))
    return {"center": c, "radius": r}, ok & (r > 1e-6)


def _cylinder_candidates(p, n):
    axis, length = _unit_rows(np.cross(n[:, 0], n[:, 1]))
    ok = length > 1e-3

    def proj(v):
        return v - np.einsum("ij,ij->i", v, axis)[:, None] * axis

    q1, q2 = proj(p[:, 0]), proj(p[:, 1])
    d1, _ = _unit_rows(proj(n[:, 0]))
    d2, _ = _unit_rows(proj(n[:, 1]))
    c, ok2 = _line_closest(q1, d1, q2, d2)
    r = 0.5 * (np.linalg.norm(q1 - c, axis=1) + np.linalg.norm(q2 - c, axis=1))
    return {"axis": axis, "point": c, "radius": r}, ok & ok2 & (r > 1e-6)


def _cone_candidates(p, n):
    m = n
    det = np.linalg.det(m)
    ok = np.abs(det) > 1e-3
    rhs = np.einsum("kij,kij->ki", n, p)
    safe = np.where(ok[:, None, None], m, np.eye(3))
    apex = np.linalg.solve(safe, rhs[..., None])[..., 0]
    d = p - apex[:, None, :]
    dn = np.linalg.norm(d, axis=2, keepdims=True)
    ok &= np.all(dn[..., 0] > 1e-9, axis=1)
    d = d / np.where(dn > 0, dn, 1.0)
    axis, length = _unit_rows(np.cross(d[:, 1] - d[:, 0], d[:, 2] - d[:, 0]))
    ok &= length > 1e-9
    flip = np.einsum("ij,ij->i", axis, d.mean(axis=1)) < 0
    axis[flip] *= -1
    ang = np.arccos(np.clip(np.einsum("kij,kj->ki", d, axis), -1, 1)).mean(axis=1)
    ok &= (ang > math.radians(2.0)) & (ang < math.radians(88.0))
    return {"apex": apex, "axis": axis, "half_angle": ang}, ok


def _dist_and_agree(kind, prm, pts, nrm):
    """(C, M) distances and |cos| normal agreement for a batch of candidates."""
    if kind == PLANE:
        dist = np.abs(prm["normal"] @ pts.T - prm["offset"][:, None])
        agree = np.abs(prm["normal"] @ nrm.T)
        return dist, agree
    if kind == SPHERE:
        v = pts[None] - prm["center"][:, None]
        vn = np.linalg.norm(v, axis=2)
        dist = np.abs(vn - prm["radius"][:, None])
        agree = np.abs(np.einsum("cmi,mi->cm", v, nrm)) / np.maximum(vn, 1e-300)
        return dist, agree
    if kind == CYLINDER:
        v = pts[None] - prm["point"][:, None]
        h = np.einsum("cmi,ci->cm", v, prm["axis"])
        radial = v - h[..., None] * prm["axis"][:, None]
        rn = np.linalg.norm(radial, axis=2)
        dist = np.abs(rn - prm["radius"][:, None])
        agree = np.abs(np.einsum("cmi,mi->cm", radial, nrm)) / np.maximum(rn, 1e-300)
        return dist, agree
    v = pts[None] - prm["apex"][:, None]
    h = np.einsum("cmi,ci->cm", v, prm["axis"])
    radial = v - h[..., None] * prm["axis"][:, None]
    r = np.linalg.norm(radial, axis=2)
    s = np.sin(prm["half_angle"])[:, None]
    c = np.cos(prm["half_angle"])[:, None]
    along = h * c + r * s
    dist = np.where(along >= 0, np.abs(r * c - h * s), np.linalg.norm(v, axis=2))
    e_r = radial / np.maximum(r, 1e-300)[..., None]
    sn = c[..., None] * e_r - s[..., None] * prm["axis"][:, None]
    agree = np.abs(np.einsum("cmi,mi->cm", sn, nrm))
    return dist, agree


def _to_primitive(kind, prm, i):
    if kind == PLANE:
        return Plane(prm["normal"][i], float(prm["offset"][i]))
    if kind == SPHERE:
        return Sphere(prm["center"][i], float(prm["radius"][i]))
    if kind == CYLINDER:
        return Cylinder(prm["axis"][i], prm["point"][i], float(prm["radius"][i]))
    return Cone(prm["apex"][i], prm["axis"][i], float(prm["half_angle"][i]))


_GENERATORS = {PLANE: (_plane_candidates, 3), SPHERE: (_sphere_candidates, 2),
               CYLINDER: (_cylinder_candidates, 2), CONE: (_cone_candidates, 3)}


def _inliers(prim, pts, nrm, max_dist, cos_thresh):
    dist = prim.distance(pts)
    agree = np.abs(np.einsum("ij,ij->i", prim.surface_normals(pts), nrm))
    return (dist < max_dist) & (agree >= cos_thresh)


def _largest_component(pts, eps):
    if len(pts) < 2:
        return np.ones(len(pts), dtype=bool)
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    if len(pairs) == 0:
        keep = np.zeros(len(pts), dtype=bool)
        keep[0] = True
        return keep
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(pts),) * 2)
    _, comp = connected_components(g, directed=False)
    return comp == np.argmax(np.bincount(comp))


def _auto_epsilon(pts, rng):
    sample = pts[rng.choice(len(pts), size=min(len(pts), 1000), replace=False)]
    k = min(5, len(pts))
    d, _ = cKDTree(pts).query(sample, k=k)
    return 3.0 * float(np.median(d[:, -1]))


def ransac_segment(points, normals, params: RansacParams = RansacParams(),
                   indices=None, n_points: Optional[int] = None,
                   scope: int = GLOBAL) -> SoftSegmentation:
    """Sequential multi-type RANSAC extraction.

    Candidates are scored on a random subset of the remaining points; the best
    few are refit by weighted least squares on their full inlier sets and
    restricted to their largest connected component. Points left over at the
    end go to the nearest detected surface and are flagged in ``leftover``.
    """
    pts = np.asarray(points, dtype=float)
    if normals is None:
        raise ValueError("RANSAC segmentation requires normals")
    nrm = np.asarray(normals, dtype=float)
    if not params.max_dist > 0:
        raise ValueError("max_dist must be positive")
    m = len(pts)
    idx = np.arange(m) if indices is None else np.asarray(indices, dtype=np.int64)
    n_points = m if n_points is None else n_points
    rng = np.random.default_rng(params.seed)
    min_in = params.min_inliers
    min_in = int(math.ceil(min_in * m)) if min_in < 1 else int(min_in)
    min_in = max(min_in, 3)
    cos_t = math.cos(math.radians(params.normal_thresh_deg))
    eps = params.cluster_epsilon or _auto_epsilon(pts, rng)

    label = np.full(m, -1, dtype=np.int64)
    prims, kinds = [], []
    remaining = np.arange(m)
    failed = 0
    per_type = max(1, params.max_candidates // 4)
    while len(remaining) >= min_in and len(prims) < params.k_max:
        rp, rn = pts[remaining], nrm[remaining]
        tree = cKDTree(rp)
        k_loc = min(max(params.local_k, int(math.ceil(params.local_fraction * m))),
                    len(remaining))
        sub = remaining if len(remaining) <= params.score_subset else \
            rng.choice(remaining, size=params.score_subset, replace=False)
        sp, sn = pts[sub], nrm[sub]
        scored = []
        for kind in (PLANE, SPHERE, CYLINDER, CONE):
            gen, need = _GENERATORS[kind]
            seeds = rng.integers(len(remaining), size=per_type)
            _, nb = tree.query(rp[seeds], k=k_loc)
            nb = nb.reshape(per_type, -1)
            pick = rng.integers(nb.shape[1], size=(per_type, need - 1))
            members = np.column_stack([seeds, np.take_along_axis(nb, pick, axis=1)])
            prm, ok = gen(rp[members], rn[members])
            if kind == CONE:
                ok &= np.abs(np.linalg.det(rn[members])) > 1e-3
            if not ok.any():
                continue
            prm = {key: val[ok] for key, val in prm.items()}
            members = members[ok]
            # the minimal set itself must agree with its candidate
            d_min, a_min = _dist_and_agree(kind, prm, rp[members].reshape(-1, 3),
                                           rn[members].reshape(-1, 3))
            c, need_ = members.shape
            d_own = d_min.reshape(c, c, need_)[np.arange(c), np.arange(c)]
            a_own = a_min.reshape(c, c, need_)[np.arange(c), np.arange(c)]
            self_ok = np.all(d_own < params.max_dist, axis=1) & np.all(a_own >= cos_t, axis=1)
            if not self_ok.any():
                continue
            prm = {key: val[self_ok] for key, val in prm.items()}
            dist, agree = _dist_and_agree(kind, prm, sp, sn)
            score = ((dist < params.max_dist) & (agree >= cos_t)).sum(axis=1)
            for i in range(len(score)):
                scored.append((int(score[i]), kind, i, prm))
        if not scored:
            failed += 1
            if failed >= params.max_failed_rounds:
                break
            continue
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        # the best few overall plus the best of every type get refit, since a
        # coarse candidate of the right type can lose to a close wrong-type one
        shortlist = scored[:params.top_candidates]
        for kind in (PLANE, SPHERE, CYLINDER, CONE):
            first = next((t for t in scored if t[1] == kind), None)
            if first is not None and all(first is not t for t in shortlist):
                shortlist.append(first)
        best_mask, best_prim, best_kind = None, None, None
        for _, kind, i, prm in shortlist:
            prim = _to_primitive(kind, prm, i)
            mask = _inliers(prim, rp, rn, params.max_dist, cos_t)
            for _ in range(params.refit_iters):
                if mask.sum() < 5:
                    break
                try:
                    ref = fitprim.fit_primitive(kind, fitprim.WeightedSupport.uniform(
                        rp[mask], rn[mask]))
                except (fitprim.FitError, np.linalg.LinAlgError):
                    break
                new_mask = _inliers(ref, rp, rn, params.max_dist, cos_t)
                if new_mask.sum() < mask.sum():
                    break
                prim, mask = ref, new_mask
            if mask.any():
                where = np.flatnonzero(mask)
                keep = _largest_component(rp[where], eps)
                mask = np.zeros(len(remaining), dtype=bool)
                mask[where[keep]] = True
            if best_mask is None or mask.sum() > best_mask.sum():
                best_mask, best_prim, best_kind = mask, prim, kind
        if best_mask.sum() < min_in:
            failed += 1
            if failed >= params.max_failed_rounds:
                break
            continue
        failed = 0
        label[remaining[best_mask]] = len(prims)
        prims.append(best_prim)
        kinds.append(best_kind)
        remaining = remaining[~best_mask]

    flags = {"unsegmented": False, "min_inliers": min_in}
    if not prims:
        flags["unsegmented"] = True
        return SoftSegmentation(scope, n_points, idx, np.ones((m, 1)),
                                np.full((m, N_TYPES), 1.0 / N_TYPES), nrm.copy(),
                                primitives=[None], leftover=np.ones(m, dtype=bool), flags=flags)
    leftover = label < 0
    if leftover.any():
        lp = pts[leftover]
        d = np.stack([p.distance(lp) for p in prims], axis=1)
        label[leftover] = np.argmin(d, axis=1)
    k = len(prims)
    probs = np.zeros((m, k))
    probs[np.arange(m), label] = 1.0
    tprobs = np.zeros((m, N_TYPES))
    tprobs[np.arange(m), np.asarray(kinds)[label]] = 1.0
    flags["leftover"] = int(leftover.sum())
    return SoftSegmentation(scope, n_points, idx, probs, tprobs, nrm.copy(), primitives=prims,
                            leftover=leftover, flags=flags)
