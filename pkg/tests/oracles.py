"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import itertools

import numpy as np


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total over all injections of the O columns into the K rows."""
    k, o = cost.shape
    if o == 0:
        return 0.0
    return min(sum(cost[rows[j], j] for j in range(o)) for rows in itertools.permutations(range(k), o))


def brute_force_pq(pred_map, pred_segments, gt_map, gt_segments):
    """Per-category (tp, fp, fn, iou_sum) by explicit pixel loops and pairwise IoU."""
    h, w = gt_map.shape
    area_p, area_g, inter = {}, {}, {}
    for y in range(h):
        for x in range(w):
            p, g = int(pred_map[y, x]), int(gt_map[y, x])
            if p:
                area_p[p] = area_p.get(p, 0) + 1
            if g:
                area_g[g] = area_g.get(g, 0) + 1
            if p and g:
                inter[(g, p)] = inter.get((g, p), 0) + 1
    out = {}
    matched_p, matched_g = set(), set()
    for g, gc in gt_segments.items():
        for p, (pc, _) in pred_segments.items():
            if pc != gc:
                continue
            i = inter.get((g, p), 0)
            u = area_g.get(g, 0) + area_p.get(p, 0) - i
            if u and i / u > 0.5:
                t = out.setdefault(gc, [0, 0, 0, 0.0])
                t[0] += 1
                t[3] += i / u
                matched_g.add(g)
                matched_p.add(p)
    for g, gc in gt_segments.items():
        if g not in matched_g:
            out.setdefault(gc, [0, 0, 0, 0.0])[2] += 1
    for p, (pc, _) in pred_segments.items():
        if p not in matched_p:
            out.setdefault(pc, [0, 0, 0, 0.0])[1] += 1
    return out


def brute_force_iou(pred_cat_map, gt_cat_map, category: int) -> float | None:
    inter = union = 0
    present = False
    for a, b in zip(pred_cat_map.ravel(), gt_cat_map.ravel()):
        present |= b == category
        inter += (a == category) and (b == category)
        union += (a == category) or (b == category)
    if not present:
        return None
    return inter / union


def random_panoptic_grid(rng, size=8, max_segments=3, n_categories=4):
    """Non-overlapping random segments on a small grid, as (segment id map, {id: category})."""
    seg = np.zeros((size, size), dtype=np.int64)
    n = int(rng.integers(0, max_segments + 1))
    cats = {}
    for sid in range(1, n + 1):
        y0, x0 = rng.integers(0, size, 2)
        h, w = rng.integers(1, size // 2 + 2, 2)
        region = seg[y0:y0 + h, x0:x0 + w]
        region[region == 0] = sid
        if (seg == sid).any():
            cats[sid] = int(rng.integers(0, n_categories))
    return seg, cats


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g
