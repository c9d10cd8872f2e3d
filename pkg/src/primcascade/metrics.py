"""Segmentation and fitting evaluation against ground truth.

Predicted segments are matched one-to-one to ground-truth primitives by
maximizing total IoU. Averages are taken over ground-truth primitives within a
cloud, then over clouds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .primitives import SPHERE

EPSILONS = (0.01, 0.02)
BUCKET_EDGES = (0.0, 0.01, 0.02, 0.04, 0.12, math.inf)
BUCKET_NAMES = ("~1%", "1%~2%", "2%~4%", "4%~12%", "12%~")

# report keys follow the column headings of the usual results table
KEY_MIOU = "Seg. (Mean IoU) (%)"
KEY_TYPE = "Primitive Type (%)"
KEY_NORMAL = "Point Normal (deg)"
KEY_AXIS = "Primitive Axis (deg)"
KEY_RES_MEAN = "Sk Residual Mean"
KEY_RES_STD = "Sk Residual Std."


def _eps_key(prefix: str, eps: float) -> str:
    return f"{prefix} Coverage (%) eps={eps:g}"


@dataclass(eq=False)
class Matching:
    """One-to-one assignment of ground-truth to predicted segments.

    ``gt_to_pred[i]`` is the predicted label matched to ``gt_ids[i]`` or -1.
    Pairs with zero IoU count as unmatched.
    """

    gt_ids: np.ndarray
    pred_ids: np.ndarray
    iou: np.ndarray
    gt_to_pred: np.ndarray
    matched_iou: np.ndarray
    gt_sizes: np.ndarray
    n_points: int

    @property
    def n_unmatched_pred(self) -> int:
        return int(len(self.pred_ids) - (self.gt_to_pred >= 0).sum())


def iou_matrix(pred_labels, gt_labels):
    """IoU between every ground-truth and predicted segment (negative labels ignored)."""
    pred = np.asarray(pred_labels).ravel()
    gt = np.asarray(gt_labels).ravel()
    if pred.shape != gt.shape:
        raise ValueError("label arrays must cover the same points")
    gt_ids = np.unique(gt[gt >= 0])
    pred_ids = np.unique(pred[pred >= 0])
    gi = np.searchsorted(gt_ids, gt)
    pi = np.searchsorted(pred_ids, pred)
    both = (gt >= 0) & (pred >= 0)
    inter = np.zeros((len(gt_ids), len(pred_ids)))
    np.add.at(inter, (gi[both], pi[both]), 1.0)
    gsz = np.bincount(gi[gt >= 0], minlength=len(gt_ids)).astype(float)
    psz = np.bincount(pi[pred >= 0], minlength=len(pred_ids)).astype(float)
    union = gsz[:, None] + psz[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return gt_ids, pred_ids, iou, gsz


def assign_max(weights) -> tuple:
    """Rows/cols of the maximum-weight one-to-one assignment of a rectangular matrix."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return linear_sum_assignment(w, maximize=True)


def match_primitives(pred_labels, gt_labels) -> Matching:
    gt_ids, pred_ids, iou, gsz = iou_matrix(pred_labels, gt_labels)
    rows, cols = assign_max(iou)
    g2p = np.full(len(gt_ids), -1, dtype=np.int64)
    miou = np.zeros(len(gt_ids))
    for r, c in zip(rows, cols):
        if iou[r, c] > 0:
            g2p[r] = pred_ids[c]
            miou[r] = iou[r, c]
    return Matching(gt_ids, pred_ids, iou, g2p, miou, gsz, int(np.size(gt_labels)))


def scale_bucket(fraction: float) -> str:
    """Left-closed buckets: exactly 2% lands in 2%~4%."""
    for name, lo, hi in zip(BUCKET_NAMES, BUCKET_EDGES[:-1], BUCKET_EDGES[1:]):
        if lo <= fraction < hi:
            return name
    raise ValueError(f"fraction {fraction} outside [0, inf)")


def seg_miou(matching: Matching) -> float:
    if len(matching.gt_ids) == 0:
        return float("nan")
    return 100.0 * float(matching.matched_iou.mean())


def angle_between(a, b, oriented: bool = False) -> np.ndarray:
    """Angle in degrees between unit vectors; exactly 0 for identical inputs.

    Unless ``oriented``, opposite vectors count as parallel.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.linalg.norm(a - b, axis=-1)
    if not oriented:
        d = np.minimum(d, np.linalg.norm(a + b, axis=-1))
    return np.degrees(2.0 * np.arcsin(np.clip(d / 2.0, 0.0, 1.0)))


def p_coverage(points, primitives, eps: float) -> float:
    prims = [p for p in primitives if p is not None]
    pts = np.asarray(points, dtype=float)
    if not prims:
        return 0.0
    d = np.min(np.stack([p.distance(pts) for p in prims], axis=1), axis=1)
    return 100.0 * float(np.mean(d < eps))


@dataclass(eq=False)
class EvalReport:
    """Metrics of one cloud (or an aggregate). Missing ground truth yields None."""

    seg_miou: Optional[float]
    type_accuracy: Optional[float]
    normal_diff_deg: Optional[float]
    axis_diff_deg: Optional[float]
    sk_residual_mean: Optional[float]
    sk_residual_std: Optional[float]
    sk_coverage: dict
    p_coverage: dict
    per_scale_miou: dict
    n_gt: int = 0
    n_pred: int = 0
    n_unmatched_pred: int = 0
    n_clouds: int = 1
    cloud_id: str = ""
    primitive_rows: list = field(default_factory=list)

    def table(self) -> dict:
        out = {KEY_MIOU: self.seg_miou, KEY_TYPE: self.type_accuracy,
               KEY_NORMAL: self.normal_diff_deg, KEY_AXIS: self.axis_diff_deg,
               KEY_RES_MEAN: self.sk_residual_mean, KEY_RES_STD: self.sk_residual_std}
        for e, v in self.sk_coverage.items():
            out[_eps_key("Sk", e)] = v
        for e, v in self.p_coverage.items():
            out[_eps_key("P", e)] = v
        return out

    def to_dict(self) -> dict:
        return {"metrics": self.table(),
                "per_scale_miou": {k: self.per_scale_miou.get(k) for k in BUCKET_NAMES},
                "n_gt": self.n_gt, "n_pred": self.n_pred,
                "n_unmatched_pred": self.n_unmatched_pred, "n_clouds": self.n_clouds,
                "cloud_id": self.cloud_id}


def evaluate(pred_labels, gt_labels, *, pred_group_types=None, gt_types=None,
             pred_normals=None, gt_normals=None, points=None, pred_primitives=None,
             gt_primitives=None, surface_samples=None, epsilons=EPSILONS,
             cloud_id: str = "") -> EvalReport:
    """All metrics of one cloud.

    ``pred_group_types`` and ``pred_primitives`` are indexed by predicted
    label; ``gt_types``, ``gt_primitives`` and ``surface_samples`` by
    ground-truth label.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    m = match_primitives(pred_labels, gt_labels)
    n = len(gt_labels)
    ngt = len(m.gt_ids)
    g2p = m.gt_to_pred

    type_acc = None
    if pred_group_types is not None and gt_types is not None and ngt:
        gt_types = np.asarray(gt_types)
        ok = [g2p[i] >= 0 and int(pred_group_types[g2p[i]]) == int(gt_types[gid])
              for i, gid in enumerate(m.gt_ids)]
        type_acc = 100.0 * float(np.mean(ok))

    normal_diff = None
    if pred_normals is not None and gt_normals is not None:
        normal_diff = float(np.mean(angle_between(pred_normals, gt_normals)))

    def pred_prim(i):
        if pred_primitives is None or g2p[i] < 0 or g2p[i] >= len(pred_primitives):
            return None
        return pred_primitives[g2p[i]]

    axis_diff = None
    if pred_primitives is not None and gt_primitives is not None:
        angs = []
        for i, gid in enumerate(m.gt_ids):
            gp, pp = gt_primitives[gid], pred_prim(i)
            if pp is None or gp.kind == SPHERE or pp.kind == SPHERE:
                continue
            angs.append(float(angle_between(gp.direction, pp.direction)))
        axis_diff = float(np.mean(angs)) if angs else None

    res_mean = res_std = None
    skc = {e: None for e in epsilons}
    rows = []
    resid = {}
    cover = {i: {e: 0.0 for e in epsilons} for i in range(ngt)}
    if surface_samples is not None and pred_primitives is not None:
        for i, gid in enumerate(m.gt_ids):
            pp = pred_prim(i)
            if pp is None:
                continue
            d = pp.distance(np.asarray(surface_samples[gid]))
            resid[i] = float(d.mean())
            for e in epsilons:
                cover[i][e] = 100.0 * float(np.mean(d < e))
        if resid:
            vals = np.array(list(resid.values()))
            res_mean, res_std = float(vals.mean()), float(vals.std())
        if ngt:
            skc = {e: float(np.mean([cover[i][e] for i in range(ngt)])) for e in epsilons}

    pc = {e: None for e in epsilons}
    if points is not None and pred_primitives is not None:
        pc = {e: p_coverage(points, pred_primitives, e) for e in epsilons}

    for i, gid in enumerate(m.gt_ids):
        frac = m.gt_sizes[i] / n
        row = {"cloud_id": cloud_id, "gt_id": int(gid),
               "gt_type": None if gt_types is None else int(gt_types[gid]),
               "fraction": float(frac), "bucket": scale_bucket(frac),
               "matched_pred": int(g2p[i]), "iou": float(m.matched_iou[i]),
               "residual": resid.get(i)}
        if pred_group_types is not None and gt_types is not None:
            row["type_ok"] = bool(g2p[i] >= 0
                                  and int(pred_group_types[g2p[i]]) == int(gt_types[gid]))
        for e in epsilons:
            row[f"sk_coverage@{e:g}"] = cover[i][e] if surface_samples is not None else None
        rows.append(row)

    return EvalReport(seg_miou(m) if ngt else None, type_acc, normal_diff, axis_diff,
                      res_mean, res_std, skc, pc, bucket_miou(rows), ngt, len(m.pred_ids),
                      m.n_unmatched_pred, 1, cloud_id, rows)


def evaluate_labeling(final, scene, epsilons=EPSILONS, cloud_id: str = "") -> EvalReport:
    """Evaluate a finalized labeling against a synthesized scene."""
    cl = scene.cloud
    return evaluate(final.labels, cl.gt_label, pred_group_types=final.group_types,
                    gt_types=scene.types, pred_normals=final.normals, gt_normals=cl.normals,
                    points=cl.points, pred_primitives=final.primitives,
                    gt_primitives=scene.primitives, surface_samples=scene.surface_samples,
                    epsilons=epsilons, cloud_id=cloud_id)


def bucket_miou(rows) -> dict:
    """Mean matched IoU (percent) per scale bucket; empty buckets map to None."""
    out = {}
    for name in BUCKET_NAMES:
        v = [r["iou"] for r in rows if r["bucket"] == name]
        out[name] = 100.0 * float(np.mean(v)) if v else None
    return out


def _mean_present(values):
    v = [x for x in values if x is not None]
    return float(np.mean(v)) if v else None


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Per-cloud metrics averaged over clouds (in the given order); buckets pooled."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    eps = list(reports[0].sk_coverage)
    rows = [r for rep in reports for r in rep.primitive_rows]
    return EvalReport(
        _mean_present(r.seg_miou for r in reports),
        _mean_present(r.type_accuracy for r in reports),
        _mean_present(r.normal_diff_deg for r in reports),
        _mean_present(r.axis_diff_deg for r in reports),
        _mean_present(r.sk_residual_mean for r in reports),
        _mean_present(r.sk_residual_std for r in reports),
        {e: _mean_present(r.sk_coverage[e] for r in reports) for e in eps},
        {e: _mean_present(r.p_coverage[e] for r in reports) for e in eps},
        bucket_miou(rows),
        sum(r.n_gt for r in reports), sum(r.n_pred for r in reports),
        sum(r.n_unmatched_pred for r in reports), len(reports), "all", rows)


# --- report files -------------------------------------------------------------------


def write_report_json(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1))


def write_cloud_csv(reports: Sequence[EvalReport], path) -> None:
    """One row per metric per cloud."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cloud_id", "metric", "value"])
        for rep in reports:
            for k, v in rep.table().items():
                w.writerow([rep.cloud_id, k, "" if v is None else repr(float(v))])


def write_primitive_csv(reports: Sequence[EvalReport], path) -> None:
    rows = [r for rep in reports for r in rep.primitive_rows]
    keys = list(rows[0]) if rows else ["cloud_id", "gt_id"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r[k] for k in keys})


def read_primitive_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{**r, "iou": float(r["iou"]), "fraction": float(r["fraction"])}
                for r in csv.DictReader(fh)]
