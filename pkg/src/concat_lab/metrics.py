"""Panoptic quality, mean IoU and their seen/unseen harmonic means."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _accel

MATCH_IOU = 0.5


@dataclass
class PanopticPrediction:
    """Per-pixel segment ids (0 = void) plus the category and confidence of each id."""

    segment_map: np.ndarray
    segments: dict[int, tuple[int, float]] = field(default_factory=dict)

    def category_map(self, void: int = -1) -> np.ndarray:
        out = np.full(self.segment_map.shape, void, dtype=np.int64)
        for sid, (cat, _) in self.segments.items():
            out[self.segment_map == sid] = cat
        return out


@dataclass
class PanopticTarget:
    segment_map: np.ndarray
    segments: dict[int, int]

    @classmethod
    def from_sample(cls, sample) -> "PanopticTarget":
        return cls(sample.segment_id_map(),
                   {int(s): int(c) for s, c in zip(sample.segment_ids, sample.gt_categories)})

    def category_map(self, void: int = -1) -> np.ndarray:
        out = np.full(self.segment_map.shape, void, dtype=np.int64)
        for sid, cat in self.segments.items():
            out[self.segment_map == sid] = cat
        return out


# ----------------------------------------------------------------------------
# overlap counting kernels

def _pair_counts_loops(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    out = np.zeros((na, nb), dtype=np.int64)
    flat_a = a.ravel()
    flat_b = b.ravel()
    for i in range(flat_a.size):
        out[flat_a[i], flat_b[i]] += 1
    return out


def _pair_counts_numpy(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    return np.bincount((a.ravel() * nb + b.ravel()), minlength=na * nb).reshape(na, nb)


_pair_counts_jit = _accel.njit(_pair_counts_loops)


def pair_counts(a: np.ndarray, b: np.ndarray, na: int, nb: int, backend: str | None = None) -> np.ndarray:
    """Joint histogram of two equal-shape label maps with values in [0, na) x [0, nb)."""
    backend = backend or _accel.backend_name()
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    if backend == "numba":
        return _pair_counts_jit(a, b, na, nb)
    if backend == "numpy":
        return _pair_counts_numpy(a, b, na, nb)
    if backend == "python":
        return _pair_counts_loops(a, b, na, nb)
    raise ValueError(f"unknown backend {backend!r}")


# ----------------------------------------------------------------------------

@dataclass
class CategoryCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denom if denom else 0.0

    @property
    def present(self) -> bool:
        return (self.tp + self.fp + self.fn) > 0


def _check_grids(pred, gt) -> None:
    if pred.segment_map.shape != gt.segment_map.shape:
        raise ValueError(f"prediction grid {pred.segment_map.shape} != ground truth grid {gt.segment_map.shape}")


def _image_pq(pred: PanopticPrediction, gt: PanopticTarget, backend=None) -> dict[int, CategoryCounts]:
    _check_grids(pred, gt)
    gt_ids = sorted(gt.segments)
    pr_ids = sorted(pred.segments)
    gt_index = np.zeros(gt.segment_map.max(initial=0) + 1, dtype=np.int64)
    gt_index[gt_ids] = np.arange(1, len(gt_ids) + 1)
    pr_index = np.zeros(pred.segment_map.max(initial=0) + 1, dtype=np.int64)
    pr_index[pr_ids] = np.arange(1, len(pr_ids) + 1)
    counts = pair_counts(gt_index[gt.segment_map], pr_index[pred.segment_map],
                         len(gt_ids) + 1, len(pr_ids) + 1, backend)
    gt_area = counts.sum(axis=1)
    pr_area = counts.sum(axis=0)

    out: dict[int, CategoryCounts] = {}
    matched_gt, matched_pr = set(), set()
    for gi, gid in enumerate(gt_ids, start=1):
        cat = gt.segments[gid]
        for pi, pid in enumerate(pr_ids, start=1):
            if pred.segments[pid][0] != cat:
                continue
            inter = counts[gi, pi]
            union = gt_area[gi] + pr_area[pi] - inter
            iou = inter / union if union else 0.0
            if iou > MATCH_IOU:
                assert gi not in matched_gt and pi not in matched_pr, "IoU > 0.5 matches must be unique"
                matched_gt.add(gi)
                matched_pr.add(pi)
                c = out.setdefault(cat, CategoryCounts())
                c.tp += 1
                c.iou_sum += iou
    for gi, gid in enumerate(gt_ids, start=1):
        if gi not in matched_gt:
            out.setdefault(gt.segments[gid], CategoryCounts()).fn += 1
    for pi, pid in enumerate(pr_ids, start=1):
        if pi not in matched_pr:
            out.setdefault(pred.segments[pid][0], CategoryCounts()).fp += 1
    return out


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("CONCAT_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _map_images(fn, preds, gts):
    threads = _n_threads()
    if threads == 1 or len(preds) < 2:
        return [fn(p, g) for p, g in zip(preds, gts)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, preds, gts))


def _as_targets(gts) -> list[PanopticTarget]:
    return [g if isinstance(g, PanopticTarget) else PanopticTarget.from_sample(g) for g in gts]


def panoptic_quality(preds, gts, categories=None, backend=None) -> dict[int, CategoryCounts]:
    """Per-category TP/FP/FN/IoU-sum accumulated over the split.

    Only categories that occur in ground truth or predictions appear; pass
    ``categories`` to restrict the result to a subset.
    """
    gts = _as_targets(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    per_image = _map_images(lambda p, g: _image_pq(p, g, backend), preds, gts)
    total: dict[int, CategoryCounts] = {}
    for counts in per_image:  # image order keeps float sums reproducible
        for cat, c in counts.items():
            t = total.setdefault(cat, CategoryCounts())
            t.tp += c.tp
            t.fp += c.fp
            t.fn += c.fn
            t.iou_sum += c.iou_sum
    if categories is not None:
        keep = {int(c) for c in categories}
        total = {c: v for c, v in total.items() if c in keep}
    return dict(sorted(total.items()))


def confusion(preds, gts, n_categories: int, backend=None) -> np.ndarray:
    """Pixel confusion (gt rows, prediction columns); index ``n_categories`` is void."""
    gts = _as_targets(gts)
    void = n_categories

    def one(p, g):
        _check_grids(p, g)
        return pair_counts(g.category_map(void), p.category_map(void), n_categories + 1,
                           n_categories + 1, backend)

    mats = _map_images(one, preds, gts)
    out = np.zeros((n_categories + 1, n_categories + 1), dtype=np.int64)
    for m in mats:
        out += m
    return out


def mean_iou(preds, gts, categories, n_categories: int, backend=None) -> tuple[dict[int, float], float]:
    """Split-level IoU for each category present in ground truth, and their mean."""
    conf = confusion(preds, gts, n_categories, backend)
    ious = {}
    for c in sorted(int(c) for c in categories):
        gt_pixels = conf[c, :].sum()
        if gt_pixels == 0:
            continue
        inter = conf[c, c]
        union = gt_pixels + conf[:, c].sum() - inter
        ious[c] = inter / union
    mean = float(np.mean(list(ious.values()))) if ious else 0.0
    return ious, mean


def harmonic(seen: float, unseen: float) -> float:
    if seen <= 0 or unseen <= 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


@dataclass
class MetricsReport:
    sPQ: float
    uPQ: float
    hPQ: float
    sIoU: float
    uIoU: float
    hIoU: float
    per_category: dict[str, dict]

    def to_dict(self) -> dict:
        return {"sPQ": self.sPQ, "uPQ": self.uPQ, "hPQ": self.hPQ,
                "sIoU": self.sIoU, "uIoU": self.uIoU, "hIoU": self.hIoU,
                "per_category": self.per_category}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in ("sPQ", "uPQ", "hPQ", "sIoU", "uIoU", "hIoU", "per_category")})


def _mean_pq(counts: dict[int, CategoryCounts], subset) -> float:
    vals = [counts[c].pq for c in subset if c in counts and counts[c].present]
    return float(np.mean(vals)) if vals else 0.0


def evaluate_predictions(preds, gts, seen_ids, unseen_ids, backend=None) -> MetricsReport:
    seen_ids = [int(c) for c in seen_ids]
    unseen_ids = [int(c) for c in unseen_ids]
    n = len(seen_ids) + len(unseen_ids)
    gts = _as_targets(gts)
    counts = panoptic_quality(preds, gts, backend=backend)
    s_iou, s_miou = mean_iou(preds, gts, seen_ids, n, backend)
    u_iou, u_miou = mean_iou(preds, gts, unseen_ids, n, backend)
    s_pq = _mean_pq(counts, seen_ids)
    u_pq = _mean_pq(counts, unseen_ids)
    ious = {**s_iou, **u_iou}
    per_category = {}
    for c in sorted(seen_ids + unseen_ids):
        cc = counts.get(c, CategoryCounts())
        per_category[str(c)] = {
            "seen": c in seen_ids, "PQ": cc.pq, "IoU": float(ious[c]) if c in ious else None,
            "TP": cc.tp, "FP": cc.fp, "FN": cc.fn,
        }
    return MetricsReport(s_pq, u_pq, harmonic(s_pq, u_pq), s_miou, u_miou, harmonic(s_miou, u_miou),
                         per_category)
