"""Query-to-segment bipartite matching and the focal / mask losses it is built from."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .diffcore import ops
from .diffcore.tensor import ShapeError, Tensor, as_tensor

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0


class InfeasibleMatchingError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha_focal: float = 0.25
    gamma_focal: float = 2.0
    cost_class: float = 1.0
    cost_mask: float = 1.0
    mask_bce: float = 1.0
    mask_dice: float = 1.0
    lambda_g: float = 1.0          # global alignment (CGA) weight; 0 removes CON's global term
    lambda_c: float = 1.0          # instance alignment (CIA)
    lambda_r: float = 0.1          # query contrast
    lambda_f: float = 0.01         # vision-semantic supervision
    lambda_seen: float = 1.0       # seen focal term during union finetuning
    gamma: float = 2.0             # matched-query multiplier in conditional weights
    tau: float = 0.07
    tau_r: float = 0.07
    bandwidths: list[float] = field(default_factory=lambda: [2.0, 5.0, 10.0, 20.0, 40.0, 60.0])
    bank_size: int = 32
    beta_kl: float = 1.0
    qc_other_positives: bool = True

    def __post_init__(self):
        for name, value in vars(self).items():
            if isinstance(value, bool):
                continue
            if isinstance(value, (int, float)) and value < 0:
                raise ValueError(f"losses.{name} must be nonnegative, got {value}")
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ValueError("losses.bandwidths must be a non-empty list of positive values")
        if self.tau <= 0 or self.tau_r <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class Assignment:
    query_to_segment: list[int | None]
    total_cost: float

    @property
    def n_matched(self) -> int:
        return sum(s is not None for s in self.query_to_segment)

    def matched_pairs(self) -> list[tuple[int, int]]:
        """(query, segment) pairs ordered by segment index."""
        pairs = [(q, s) for q, s in enumerate(self.query_to_segment) if s is not None]
        return sorted(pairs, key=lambda qs: qs[1])

    def matched_mask(self) -> np.ndarray:
        return np.array([s is not None for s in self.query_to_segment], dtype=bool)


# ----------------------------------------------------------------------------
# losses

def focal_loss(prob, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean sigmoid focal loss over all elements of ``prob``."""
    prob = as_tensor(prob)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if prob.shape != target.shape:
        raise ShapeError(f"focal_loss: prob {prob.shape} vs target {target.shape}")
    p = ops.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    q = 1.0 - p
    pos = alpha * target * (q ** gamma) * ops.log(p)
    neg = (1.0 - alpha) * (1.0 - target) * (p ** gamma) * ops.log(q)
    return -ops.mean(pos + neg)


def mask_loss(pred_logits, gt, bce_weight: float = 1.0, dice_weight: float = 1.0) -> Tensor:
    """Sigmoid BCE (mean) plus smoothed dice loss on one H x W mask."""
    pred_logits = as_tensor(pred_logits)
    gt = np.asarray(gt, dtype=np.float64)
    if pred_logits.shape != gt.shape:
        raise ShapeError(f"mask_loss: logits {pred_logits.shape} vs gt {gt.shape}")
    bce = ops.mean(ops.softplus(pred_logits) - pred_logits * gt)
    p = ops.sigmoid(pred_logits)
    dice = 1.0 - (2.0 * ops.sum(p * gt) + DICE_SMOOTH) / (ops.sum(p) + gt.sum() + DICE_SMOOTH)
    return bce_weight * bce + dice_weight * dice


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def mask_cost(pred_logits: np.ndarray, gt_masks: np.ndarray, bce_weight: float = 1.0,
              dice_weight: float = 1.0) -> np.ndarray:
    """``mask_loss`` for every (query, segment) pair at once: (K, H, W) x (O, H, W) -> (K, O)."""
    k = pred_logits.shape[0]
    x = pred_logits.reshape(k, -1)
    g = gt_masks.reshape(gt_masks.shape[0], -1).astype(np.float64)
    n_pix = x.shape[1]
    bce = _softplus(x).sum(axis=1, keepdims=True) / n_pix - (x @ g.T) / n_pix
    p = 1.0 / (1.0 + np.exp(-x))
    dice = 1.0 - (2.0 * (p @ g.T) + DICE_SMOOTH) / (
        p.sum(axis=1, keepdims=True) + g.sum(axis=1)[None, :] + DICE_SMOOTH)
    return bce_weight * bce + dice_weight * dice


def focal_class_cost(class_probs: np.ndarray, labels: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Focal loss of each query's probability row against each segment's one-hot label."""
    p = np.clip(class_probs, PROB_EPS, 1.0 - PROB_EPS)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
    labels = np.asarray(labels, dtype=np.int64)
    total_neg = neg.sum(axis=1, keepdims=True)
    return (total_neg - neg[:, labels] + pos[:, labels]) / p.shape[1]


def match_cost_matrix(class_probs: np.ndarray, pred_mask_logits: np.ndarray, gt_labels,
                      gt_masks: np.ndarray, weights: LossWeights | None = None,
                      mask_costs: np.ndarray | None = None) -> np.ndarray:
    """K x O matching cost: focal classification cost + mask loss.

    ``gt_labels`` are column indices into ``class_probs``. ``mask_costs`` may be
    passed in when it has been precomputed (it does not depend on training).
    """
    w = weights or LossWeights()
    class_probs = np.asarray(class_probs.data if isinstance(class_probs, Tensor) else class_probs)
    k = class_probs.shape[0]
    o = len(gt_labels)
    if o > k:
        raise InfeasibleMatchingError(f"{o} segments cannot be matched to {k} queries")
    if o == 0:
        return np.zeros((k, 0))
    if mask_costs is None:
        mask_costs = mask_cost(pred_mask_logits, gt_masks, w.mask_bce, w.mask_dice)
    cls = focal_class_cost(class_probs, gt_labels, w.alpha_focal, w.gamma_focal)
    return w.cost_class * cls + w.cost_mask * mask_costs


# ----------------------------------------------------------------------------
# Kuhn-Munkres with potentials; rows are segments, columns are queries, n <= m.

def _hungarian_loops(a: np.ndarray) -> np.ndarray:
    n, m = a.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return p


def _hungarian_numpy(a: np.ndarray) -> np.ndarray:
    """Same algorithm as ``_hungarian_loops`` with the column sweeps vectorized."""
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return p


_hungarian_jit = _accel.njit(_hungarian_loops)


def solve_assignment(a: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Column -> row map (0-based, -1 for free columns) for an n x m cost with n <= m."""
    backend = backend or _accel.backend_name()
    a = np.ascontiguousarray(a, dtype=np.float64)
    if backend == "numba":
        p = _hungarian_jit(a)
    elif backend == "numpy":
        p = _hungarian_numpy(a)
    elif backend == "python":
        p = _hungarian_loops(a)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return p[1:] - 1


def hungarian(cost, backend: str | None = None) -> Assignment:
    """Minimum-cost injective matching of the O segments (columns) into K queries (rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"hungarian expects a K x O matrix, got shape {cost.shape}")
    k, o = cost.shape
    if o > k:
        raise InfeasibleMatchingError(f"{o} segments cannot be matched to {k} queries")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian: cost matrix has non-finite entries")
    query_to_segment: list[int | None] = [None] * k
    if o == 0:
        return Assignment(query_to_segment, 0.0)
    seg_of_query = solve_assignment(cost.T, backend)
    total = 0.0
    for q, s in enumerate(seg_of_query):
        if s >= 0:
            query_to_segment[q] = int(s)
            total += cost[q, s]
    return Assignment(query_to_segment, float(total))
