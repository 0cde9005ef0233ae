"""Segmentation quality metrics and report aggregation.

Surface distance uses voxel surfaces (mask voxels with at least one
six-connected background neighbor; voxels beyond the array border count
as background) and averages the two directed mean nearest-surface
distances, scaled to millimeters by the voxel spacing.
"""

from __future__ import annotations

import json
from math import erf, sqrt

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, MetricUndefinedError

__all__ = [
    "dsc",
    "precision_recall",
    "surface_voxels",
    "surface_distance",
    "wilcoxon_signed_rank",
    "evaluate_volume",
    "aggregate_reports",
    "report_to_jsonl",
]


def _masks(pred, truth, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    p = pred.labels if hasattr(pred, "labels") else np.asarray(pred)
    t = truth.labels if hasattr(truth, "labels") else np.asarray(truth)
    if p.shape != t.shape:
        raise DimensionError(f"prediction dims {p.shape} != truth dims {t.shape}")
    return p == class_id, t == class_id


def dsc(pred, truth, class_id: int) -> float:
    """Sorensen-Dice overlap 2|P∩G|/(|P|+|G|); 1.0 when both are empty."""
    p, t = _masks(pred, truth, class_id)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def precision_recall(pred, truth, class_id: int) -> tuple[float, float]:
    """(TP/(TP+FP), TP/(TP+FN)); an undefined member is 0.0 unless both
    masks are empty, in which case both are 1.0."""
    p, t = _masks(pred, truth, class_id)
    tp = int((p & t).sum())
    np_, nt = int(p.sum()), int(t.sum())
    if np_ == 0 and nt == 0:
        return 1.0, 1.0
    precision = tp / np_ if np_ else 0.0
    recall = tp / nt if nt else 0.0
    return precision, recall


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one six-connected background neighbor;
    outside the array counts as background."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1)
    interior = np.ones_like(m)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~interior


def surface_distance(pred, truth, class_id: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in millimeters.

    Raises MetricUndefinedError when either mask is empty; callers
    should report the value as missing rather than zero.
    """
    p, t = _masks(pred, truth, class_id)
    if not p.any() or not t.any():
        raise MetricUndefinedError(
            f"surface distance undefined for class {class_id}: "
            f"prediction {'non' if p.any() else ''}empty, truth {'non' if t.any() else ''}empty"
        )
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface_voxels(p)) * sp
    ta = np.argwhere(surface_voxels(t)) * sp
    d_pt = cKDTree(ta).query(pa)[0]
    d_tp = cKDTree(pa).query(ta)[0]
    return 0.5 * (float(d_pt.mean()) + float(d_tp.mean()))


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are discarded; ties receive average ranks.  The
    null distribution is enumerated exactly up to n=20 pairs and
    normally approximated (with tie correction) beyond that.  Returns
    (W+, p).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError("paired test needs two equal-length 1-D sequences")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 0.0, 1.0
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = float(ranks.sum())

    if n <= 20:
        # exact: enumerate sign assignments; distribution is symmetric
        # around total/2, so sum both tails explicitly
        sums = np.zeros(1)
        for r in ranks:
            sums = np.concatenate([sums, sums + r])
        lo, hi = min(w_plus, total - w_plus), max(w_plus, total - w_plus)
        eps = 1e-9
        p = (np.sum(sums <= lo + eps) + np.sum(sums >= hi - eps)) / sums.size
        return w_plus, min(1.0, float(p))

    mean = total / 2.0
    var = float((ranks**2).sum()) / 4.0
    z = (w_plus - mean) / np.sqrt(var)
    from math import erf, sqrt

    p = 2.0 * (1.0 - 0.5 * (1.0 + erf(abs(z) / sqrt(2.0))))
    return w_plus, min(1.0, p)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def evaluate_volume(
    pred, truth, n_classes: int, spacing=(1.0, 1.0, 1.0), volume_name: str = ""
) -> list[dict]:
    """Per-class record list for one volume; background (class 0) is
    skipped.  surface_mm is None when the distance is undefined."""
    records = []
    for c in range(1, n_classes):
        precision, recall = precision_recall(pred, truth, c)
        try:
            s2s = surface_distance(pred, truth, c, spacing)
        except MetricUndefinedError:
            s2s = None
        records.append(
            {
                "volume": volume_name,
                "class": c,
                "dsc": dsc(pred, truth, c),
                "precision": precision,
                "recall": recall,
                "surface_mm": s2s,
            }
        )
    return records


def aggregate_reports(records: list[dict]) -> dict:
    """Mean and std per class per metric; surface distances average only
    the defined entries and report how many were missing."""
    classes = sorted({r["class"] for r in records})
    summary: dict = {"per_class": {}}
    for c in classes:
        rows = [r for r in records if r["class"] == c]
        entry = {}
        for key in ("dsc", "precision", "recall"):
            vals = np.array([r[key] for r in rows])
            entry[f"{key}_mean"] = float(vals.mean())
            entry[f"{key}_std"] = float(vals.std())
        surf = np.array([r["surface_mm"] for r in rows if r["surface_mm"] is not None])
        entry["surface_mm_mean"] = float(surf.mean()) if surf.size else None
        entry["surface_mm_std"] = float(surf.std()) if surf.size else None
        entry["surface_missing"] = sum(1 for r in rows if r["surface_mm"] is None)
        entry["n_volumes"] = len(rows)
        summary["per_class"][str(c)] = entry
    return summary


def report_to_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
