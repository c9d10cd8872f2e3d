"""Merging of overlapping soft segmentations into final primitives.

The stacked membership matrix W (points x segment columns) gives pairwise
overlaps I = W^T W. Columns are partitioned into groups maximizing the summed
within-group overlap, with the rule that no group holds two columns from the
same scope. Per-point labels come from the group-averaged memberships.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import fitprim
from .primitives import NO_TYPE
from .segmenters import GLOBAL, N_TYPES, SoftSegmentation, scope_name

MASS_FLOOR = 1e-3


@dataclass(eq=False)
class StackedSegmentation:
    matrix: sp.csr_matrix
    column_scope: np.ndarray
    column_source: list
    column_mass: np.ndarray
    segmentations: list
    dropped: list = field(default_factory=list)

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_points(self) -> int:
        return self.matrix.shape[0]


@dataclass(eq=False)
class IntersectionMatrix:
    values: np.ndarray
    column_scope: np.ndarray

    def same_scope(self) -> np.ndarray:
        """Mask of entries between columns of one scope (never mergeable)."""
        return self.column_scope[:, None] == self.column_scope[None, :]


@dataclass(eq=False)
class MergeGrouping:
    groups: list
    objective: float
    solved: bool = True
    status: str = "ok"
    merge_values: list = field(default_factory=list)
    elapsed: float = 0.0
    group_types: Optional[list] = None

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def assignment(self, n_columns: int) -> np.ndarray:
        out = np.full(n_columns, -1, dtype=np.int64)
        for g, cols in enumerate(self.groups):
            out[cols] = g
        return out


def stack(segmentations: Sequence[SoftSegmentation], mass_floor: float = MASS_FLOOR,
          ) -> StackedSegmentation:
    """Column-stack scoped segmentations: patches in index order, global last.

    Columns whose mass falls below ``mass_floor`` times the scope size are
    dropped and listed in ``dropped``.
    """
    segs = list(segmentations)
    if not segs:
        raise ValueError("nothing to stack")
    n = segs[0].n_points
    if any(s.n_points != n for s in segs):
        raise ValueError("segmentations disagree on the number of points")
    if sum(s.scope == GLOBAL for s in segs) > 1:
        raise ValueError("more than one global segmentation")
    scopes = [s.scope for s in segs]
    if len(set(scopes)) != len(scopes):
        raise ValueError("duplicate scopes")
    segs.sort(key=lambda s: (s.scope == GLOBAL, s.scope))
    blocks, col_scope, col_source, col_mass, dropped = [], [], [], [], []
    offset = 0
    for si, seg in enumerate(segs):
        mass = seg.probs.sum(axis=0)
        keep = mass >= mass_floor * len(seg.indices)
        for j in np.flatnonzero(~keep):
            dropped.append({"scope": scope_name(seg.scope), "column": int(j),
                            "mass": float(mass[j])})
        kept = np.flatnonzero(keep)
        if len(kept) == 0:
            continue
        sub = seg.probs[:, kept]
        rows, cols = np.nonzero(sub)
        blocks.append((seg.indices[rows], cols + offset, sub[rows, cols]))
        col_scope.extend([seg.scope] * len(kept))
        col_source.extend((si, int(j)) for j in kept)
        col_mass.extend(mass[kept].tolist())
        offset += len(kept)
    if blocks:
        r = np.concatenate([b[0] for b in blocks])
        c = np.concatenate([b[1] for b in blocks])
        v = np.concatenate([b[2] for b in blocks])
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    mat = sp.csr_matrix((v, (r, c)), shape=(n, offset))
    return StackedSegmentation(mat, np.asarray(col_scope, dtype=np.int64), col_source,
                               np.asarray(col_mass, dtype=float), segs, dropped)


def intersections(stacked: StackedSegmentation) -> IntersectionMatrix:
    w = stacked.matrix
    vals = np.asarray((w.T @ w).todense())
    return IntersectionMatrix(vals, stacked.column_scope.copy())


def _as_values(intersection):
    if isinstance(intersection, IntersectionMatrix):
        return intersection.values
    return np.asarray(intersection, dtype=float)


def grouping_objective(intersection, groups) -> float:
    """tr(I C^T C): summed overlap over ordered pairs inside every group."""
    vals = _as_values(intersection)
    return float(sum(vals[np.ix_(g, g)].sum() for g in groups))


def constraint_violations(grouping: MergeGrouping, column_scope) -> list:
    """Structural audit: every column in exactly one group, scopes distinct per group."""
    column_scope = np.asarray(column_scope)
    problems = []
    seen = np.zeros(len(column_scope), dtype=int)
    for g, cols in enumerate(grouping.groups):
        if len(cols) == 0:
            problems.append(f"group {g} is empty")
        for c in cols:
            seen[c] += 1
        sc = column_scope[list(cols)]
        if len(set(sc.tolist())) != len(sc):
            problems.append(f"group {g} holds two columns of one scope")
    for c in np.flatnonzero(seen != 1):
        problems.append(f"column {c} is assigned {seen[c]} times")
    return problems


def _canonical_groups(groups):
    groups = [sorted(int(c) for c in g) for g in groups if len(g)]
    return sorted(groups, key=lambda g: g[0])


def greedy_merge(intersection, column_scope=None) -> MergeGrouping:
    """Merge the highest-overlap admissible pair of segments until none is left.

    Entries are visited in decreasing value (ties: lower column pair first).
    Once two groups share a scope they stay incompatible, so a single sorted
    pass is equivalent to repeatedly picking the largest valid entry.
    """
    start = time.perf_counter()
    vals = _as_values(intersection)
    if column_scope is None:
        column_scope = intersection.column_scope
    scope = np.asarray(column_scope)
    s = len(scope)
    iu, ju = np.triu_indices(s, k=1)
    v = vals[iu, ju]
    cand = (v > 0) & (scope[iu] != scope[ju])
    iu, ju, v = iu[cand], ju[cand], v[cand]
    order = np.lexsort((ju, iu, -v))
    parent = list(range(s))
    scopes = [{int(scope[c])} for c in range(s)]

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    merged = []
    for k in order:
        a, b = find(int(iu[k])), find(int(ju[k]))
        if a == b or scopes[a] & scopes[b]:
            continue
        if len(scopes[a]) < len(scopes[b]):
            a, b = b, a
        parent[b] = a
        scopes[a] |= scopes[b]
        scopes[b] = set()
        merged.append(float(v[k]))
    groups = {}
    for c in range(s):
        groups.setdefault(find(c), []).append(c)
    groups = _canonical_groups(groups.values())
    return MergeGrouping(groups, grouping_objective(vals, groups), merge_values=merged,
                         elapsed=time.perf_counter() - start)


class _Budget(Exception):
    pass


def exact_merge(intersection, column_scope=None, max_columns: int = 16,
                time_budget: float = 60.0) -> MergeGrouping:
    """Optimal constrained partition by depth-first branch and bound.

    Columns are placed one at a time into a compatible existing group or a
    new one. The bound adds, for every unplaced column, its diagonal, its best
    attainable gain against placed groups, and all positive admissible
    overlaps among unplaced columns. The greedy result seeds the incumbent.
    Returns ``solved=False`` when the instance is too large or the budget runs
    out.
    """
    start = time.perf_counter()
    vals = _as_values(intersection)
    if column_scope is None:
        column_scope = intersection.column_scope
    scope = np.asarray(column_scope)
    s = len(scope)
    if s > max_columns:
        return MergeGrouping([], float("nan"), solved=False,
                             status=f"not solved: {s} columns exceed limit {max_columns}")
    greedy = greedy_merge(vals, scope)
    best = [greedy.objective, [list(g) for g in greedy.groups]]
    if s == 0:
        return MergeGrouping([], 0.0, elapsed=time.perf_counter() - start)

    order = sorted(range(s), key=lambda c: (-np.clip(vals[c], 0, None).sum(), c))
    compat = scope[:, None] != scope[None, :]
    pos_pair = np.where(compat, np.clip(vals, 0, None), 0.0)
    diag = np.diag(vals).copy()
    groups: list = []
    gscopes: list = []
    unplaced = np.ones(s, dtype=bool)
    nodes = [0]

    def bound(cur):
        free = np.flatnonzero(unplaced)
        if len(free) == 0:
            return cur
        b = cur + diag[free].sum()
        b += pos_pair[np.ix_(free, free)].sum()
        for c in free:
            gain = 0.0
            for g, cols in enumerate(groups):
                if scope[c] not in gscopes[g]:
                    gain = max(gain, 2.0 * pos_pair[c, cols].sum())
            b += gain
        return b

    def dfs(depth, cur):
        nodes[0] += 1
        if nodes[0] % 512 == 0 and time.perf_counter() - start > time_budget:
            raise _Budget
        if depth == s:
            if cur > best[0] + 1e-12 * max(1.0, abs(best[0])):
                best[0] = cur
                best[1] = [list(g) for g in groups]
            return
        if bound(cur) <= best[0] + 1e-12 * max(1.0, abs(best[0])):
            return
        c = order[depth]
        options = []
        for g, cols in enumerate(groups):
            if scope[c] not in gscopes[g]:
                options.append((diag[c] + 2.0 * vals[c, cols].sum(), g))
        options.append((diag[c], -1))
        options.sort(key=lambda t: (-t[0], t[1] if t[1] >= 0 else len(groups)))
        unplaced[c] = False
        for gain, g in options:
            if g < 0:
                groups.append([c])
                gscopes.append({scope[c]})
                dfs(depth + 1, cur + gain)
                groups.pop()
                gscopes.pop()
            else:
                groups[g].append(c)
                gscopes[g].add(scope[c])
                dfs(depth + 1, cur + gain)
                groups[g].pop()
                gscopes[g].discard(scope[c])
        unplaced[c] = True

    try:
        dfs(0, 0.0)
    except _Budget:
        return MergeGrouping([], float("nan"), solved=False,
                             status=f"not solved: time budget {time_budget}s exceeded",
                             elapsed=time.perf_counter() - start)
    groups_out = _canonical_groups(best[1])
    return MergeGrouping(groups_out, grouping_objective(vals, groups_out),
                         status=f"optimal ({nodes[0]} nodes)",
                         elapsed=time.perf_counter() - start)


# --- finalization -------------------------------------------------------------------


@dataclass(eq=False)
class FinalLabeling:
    labels: np.ndarray
    types: np.ndarray
    normals: np.ndarray
    group_types: np.ndarray
    primitives: list
    flagged: np.ndarray
    fit_fallback: list

    @property
    def n_groups(self) -> int:
        return len(self.group_types)


def group_scores(stacked: StackedSegmentation, grouping: MergeGrouping) -> sp.csr_matrix:
    """W |C^T| with every group column l1-normalized: mean membership per group."""
    s = stacked.n_columns
    rows, cols, vals = [], [], []
    for g, members in enumerate(grouping.groups):
        rows.extend(members)
        cols.extend([g] * len(members))
        vals.extend([1.0 / len(members)] * len(members))
    c = sp.csr_matrix((vals, (rows, cols)), shape=(s, len(grouping.groups)))
    return (stacked.matrix @ c).tocsr()


def _combine_normals(segs, n):
    first = np.zeros((n, 3))
    acc = np.zeros((n, 3))
    count = np.zeros(n)
    for seg in segs:
        idx = seg.indices
        nrm = seg.normals
        fresh = count[idx] == 0
        first[idx[fresh]] = nrm[fresh]
        old = ~fresh
        io = idx[old]
        no = nrm[old]
        flip = np.einsum("ij,ij->i", no, first[io]) < 0
        no = np.where(flip[:, None], -no, no)
        np.add.at(acc, io, no - first[io])
        np.add.at(count, idx, 1)
    has = count > 0
    out = first.copy()
    # differences are exactly zero when all estimates agree, keeping them bit-identical
    out[has] += acc[has] / count[has, None]
    norm = np.linalg.norm(out, axis=1)
    fix = has & (np.abs(norm - 1.0) > 1e-12)
    out[fix] /= norm[fix, None]
    return out, has


def finalize(stacked: StackedSegmentation, grouping: MergeGrouping, points,
             fallback_normals=None) -> FinalLabeling:
    """Per-point labels, types and normals, then one fitted primitive per group."""
    pts = np.asarray(points, dtype=float)
    n = stacked.n_points
    kg = grouping.n_groups
    scores = group_scores(stacked, grouping)
    labels = np.zeros(n, dtype=np.int64)
    best = np.zeros(n)
    chunk = 32768
    for a in range(0, n, chunk):
        block = scores[a:a + chunk].toarray()
        if kg:
            labels[a:a + chunk] = np.argmax(block, axis=1)
            best[a:a + chunk] = block.max(axis=1)
    flagged = best <= 0

    tsum = np.zeros((n, N_TYPES))
    for seg in stacked.segmentations:
        np.add.at(tsum, seg.indices, seg.type_probs)
    has_type = tsum.sum(axis=1) > 0
    types = np.where(has_type, np.argmax(tsum, axis=1), NO_TYPE).astype(np.uint8)

    normals, has_normal = _combine_normals(stacked.segmentations, n)
    if fallback_normals is not None:
        normals[~has_normal] = np.asarray(fallback_normals)[~has_normal]
        has_normal[:] = True

    group_types = np.zeros(kg, dtype=np.uint8)
    prims, fallback = [], []
    for g in range(kg):
        mine = np.flatnonzero((labels == g) & ~flagged)
        tt = types[mine]
        tt = tt[tt != NO_TYPE]
        group_types[g] = np.argmax(np.bincount(tt, minlength=N_TYPES)) if len(tt) else 0
        w = np.asarray(scores[mine, g].todense()).ravel() if len(mine) else np.zeros(0)
        if len(mine) < 3 or w.sum() <= 0:
            prims.append(None)
            fallback.append(False)
            continue
        sup = fitprim.WeightedSupport(pts[mine], normals[mine], w)
        try:
            prim, used_fallback = fitprim.fit_best(sup, int(group_types[g]))
        except fitprim.FitError:
            prim, used_fallback = None, False
        prims.append(prim)
        fallback.append(used_fallback)

    if flagged.any():
        fitted = [g for g, p in enumerate(prims) if p is not None]
        if fitted:
            d = np.stack([prims[g].distance(pts[flagged]) for g in fitted], axis=1)
            labels[flagged] = np.asarray(fitted)[np.argmin(d, axis=1)]
        else:
            labels[flagged] = -1
    missing_t = types == NO_TYPE
    lab_ok = missing_t & (labels >= 0)
    types[lab_ok] = group_types[labels[lab_ok]]
    if not has_normal.all():
        for g, p in enumerate(prims):
            sel = ~has_normal & (labels == g)
            if p is not None and sel.any():
                normals[sel] = p.surface_normals(pts[sel])
    return FinalLabeling(labels, types, normals, group_types, prims, flagged, fallback)


# --- grouping file ------------------------------------------------------------------


def save_grouping(grouping: MergeGrouping, stacked: StackedSegmentation, path,
                  group_types=None) -> None:
    rec = {
        "format": "cpfgroups 1",
        "objective": grouping.objective,
        "solved": grouping.solved,
        "status": grouping.status,
        "groups": [[{"column": int(c), "scope": scope_name(int(stacked.column_scope[c])),
                     "source_column": stacked.column_source[c][1]} for c in g]
                   for g in grouping.groups],
        "dropped_columns": stacked.dropped,
    }
    if group_types is not None:
        rec["group_types"] = [int(t) for t in group_types]
    Path(path).write_text(json.dumps(rec, indent=1))


def load_grouping(path) -> MergeGrouping:
    rec = json.loads(Path(path).read_text())
    groups = [[c["column"] for c in g] for g in rec["groups"]]
    return MergeGrouping(groups, rec["objective"], rec["solved"], rec["status"],
                         group_types=rec.get("group_types"))


# --- benchmark instances ------------------------------------------------------------


def random_instance(n_columns: int, rng: np.random.Generator, n_points: int = 200,
                    max_per_scope: int = 4, max_temperature: float = 0.5,
                    ) -> IntersectionMatrix:
    """Overlapping soft segmentations of a 1-D toy object, reduced to W^T W.

    A few latent segments tile the points; each scope sees a random interval,
    maps latent segments to its own columns (sometimes merging or splitting
    them) and softens its memberships by a random temperature.
    """
    n_latent = int(rng.integers(2, 7))
    cuts = np.sort(rng.choice(np.arange(1, n_points), size=n_latent - 1, replace=False))
    latent = np.searchsorted(cuts, np.arange(n_points), side="right")
    sizes = []
    left = n_columns
    while left > 0:
        k = int(min(left, rng.integers(1, max_per_scope + 1)))
        sizes.append(k)
        left -= k
    blocks, scopes = [], []
    for s, k in enumerate(sizes):
        length = int(rng.integers(max(2, int(0.3 * n_points)), n_points + 1))
        a = int(rng.integers(0, n_points - length + 1))
        pts = np.arange(a, a + length)
        present = np.unique(latent[pts])
        col_of = rng.permutation(np.resize(np.arange(k), max(k, len(present))))[:len(present)]
        lab = col_of[np.searchsorted(present, latent[pts])]
        if k > len(present):
            # unused columns take a random slice of the scope (over-segmentation)
            for c in np.setdiff1d(np.arange(k), col_of):
                lo = int(rng.integers(0, length))
                lab[lo:lo + int(rng.integers(1, max(2, length // 4)))] = c
        tau = rng.uniform(0.0, max_temperature)
        w = np.zeros((n_points, k))
        w[pts] = tau * rng.dirichlet(np.ones(k), size=length)
        w[pts, lab] += 1.0 - tau
        blocks.append(w)
        scopes.extend([s] * k)
    w = np.concatenate(blocks, axis=1)
    return IntersectionMatrix(w.T @ w, np.asarray(scopes, dtype=np.int64))
