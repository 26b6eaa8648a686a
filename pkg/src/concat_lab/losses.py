"""Alignment, generation and stage-composite objectives."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ops
from .diffcore.tensor import ShapeError, Tensor, as_tensor
from .matching import Assignment, LossWeights, focal_loss


class TokenBank:
    """FIFO of past CLS tokens used as extra contrastive negatives (never differentiated)."""

    def __init__(self, capacity: int = 32):
        if capacity < 0:
            raise ValueError("bank capacity must be >= 0")
        self.capacity = capacity
        self._items: deque[np.ndarray] = deque(maxlen=capacity or None)

    def __len__(self) -> int:
        return len(self._items) if self.capacity else 0

    def push(self, tokens) -> None:
        if not self.capacity:
            return
        tokens = np.atleast_2d(np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens))
        for row in tokens:
            self._items.append(np.array(row, dtype=np.float64))

    def tokens(self, dim: int | None = None) -> np.ndarray:
        if not len(self):
            return np.zeros((0, dim or 0))
        return np.stack(list(self._items))


def classification_logits(S, A_sub) -> Tensor:
    """sigmoid(S A^T): per-query response to each listed category."""
    S = as_tensor(S)
    A_sub = np.asarray(A_sub, dtype=np.float64)
    if S.ndim != 2 or A_sub.ndim != 2 or S.shape[1] != A_sub.shape[1]:
        raise ShapeError(f"classification_logits: queries {S.shape} vs embeddings {A_sub.shape}")
    return ops.sigmoid(ops.matmul(S, A_sub.T))


def conditional_weights(S, c, matched, gamma: float) -> Tensor:
    """Softmax over queries of cos(s_k, c) * (gamma * matched_k + 1); returns K x 1."""
    S = as_tensor(S)
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64).reshape(1, -1)
    matched = np.asarray(matched, dtype=np.float64).reshape(-1, 1)
    if S.shape[1] != c.shape[1] or matched.shape[0] != S.shape[0]:
        raise ShapeError(f"conditional_weights: queries {S.shape}, token {c.shape}, flags {matched.shape}")
    c_norm = np.linalg.norm(c)
    c_unit = c / c_norm if c_norm > 1e-12 else np.zeros_like(c)
    cos = ops.matmul(ops.l2_normalize(S), c_unit.T)
    return ops.softmax(cos * (gamma * matched + 1.0), axis=0)


def reconstruct_cls(W, S) -> Tensor:
    return ops.matmul(ops.transpose(W), S)


def _info_nce(queries: Tensor, keys, n_pos: int, tau: float) -> Tensor:
    """Mean over rows i of -log softmax(q_i . keys / tau)[i] on unit vectors.

    ``keys`` rows 0..n_pos-1 are the positives aligned with the query rows; any
    further rows are extra negatives.
    """
    q = ops.l2_normalize(queries)
    k = ops.l2_normalize(keys)
    logits = ops.matmul(q, ops.transpose(k)) * (1.0 / tau)
    eye = np.zeros(logits.shape)
    eye[np.arange(n_pos), np.arange(n_pos)] = 1.0
    pos = ops.sum(logits * eye, axis=1)
    return ops.mean(ops.logsumexp(logits, axis=1) - pos)


def cga_loss(recon, targets, bank: TokenBank | None, tau: float, update_bank: bool = True) -> Tensor:
    """InfoNCE of reconstructed CLS tokens against image CLS tokens.

    Negatives are the other in-batch targets plus everything in ``bank``; the
    bank is refreshed with ``targets`` after the loss is formed.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    recon = as_tensor(recon)
    targets = np.atleast_2d(np.asarray(targets.data if isinstance(targets, Tensor) else targets))
    if recon.shape != targets.shape:
        raise ShapeError(f"cga_loss: recon {recon.shape} vs targets {targets.shape}")
    keys = targets
    if bank is not None and len(bank):
        keys = np.concatenate([targets, bank.tokens()], axis=0)
    loss = _info_nce(recon, keys, targets.shape[0], tau)
    if bank is not None and update_bank:
        bank.push(targets)
    return loss


def select_matched(S, assignment: Assignment) -> tuple[Tensor, list[int]]:
    """Rows of S whose query is matched, in segment order, plus those segment indices."""
    S = as_tensor(S)
    pairs = assignment.matched_pairs()
    if not pairs:
        return Tensor(np.zeros((0, S.shape[1]))), []
    rows = np.array([q for q, _ in pairs])
    return ops.index(S, rows), [s for _, s in pairs]


def cia_loss(S_matched, segment_cls, tau: float) -> tuple[Tensor, bool]:
    """InfoNCE between matched semantic queries and their segment CLS tokens.

    Returns ``(loss, skipped)``; with no pairs the loss is a constant 0.
    """
    S_matched = as_tensor(S_matched)
    segment_cls = np.atleast_2d(np.asarray(segment_cls, dtype=np.float64))
    if S_matched.shape[0] == 0:
        return Tensor(0.0), True
    if S_matched.shape != segment_cls.shape:
        raise ShapeError(f"cia_loss: queries {S_matched.shape} vs tokens {segment_cls.shape}")
    return _info_nce(S_matched, segment_cls, segment_cls.shape[0], tau), False


def _sq_dists(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    xx = ops.sum(x * x, axis=1, keepdims=True)
    yy = ops.sum(y * y, axis=1, keepdims=True)
    return xx + ops.transpose(yy) - 2.0 * ops.matmul(x, ops.transpose(y))


def mmd_loss(real, generated, bandwidths) -> Tensor:
    """Biased squared MMD under Gaussian kernels, summed over bandwidths."""
    real = np.asarray(real.data if isinstance(real, Tensor) else real, dtype=np.float64)
    generated = as_tensor(generated)
    if real.shape[0] == 0 or generated.shape[0] == 0:
        raise ValueError("mmd_loss needs non-empty real and generated sets")
    if real.ndim != 2 or real.shape[1] != generated.shape[1]:
        raise ShapeError(f"mmd_loss: real {real.shape} vs generated {generated.shape}")
    # one stacked kernel over all bandwidths: mean over (L, n, m) times L sums the per-bandwidth means
    scales = (-1.0 / (2.0 * np.asarray(bandwidths, dtype=np.float64) ** 2)).reshape(-1, 1, 1)
    n_bw = scales.shape[0]
    d_rr = _sq_dists(real, real).data
    d_gg = _sq_dists(generated, generated)
    d_rg = _sq_dists(real, generated)
    k_rr = np.exp(scales * d_rr[None]).mean() * n_bw
    k_gg = ops.mean(ops.exp(ops.reshape(d_gg, (1,) + d_gg.shape) * scales)) * n_bw
    k_rg = ops.mean(ops.exp(ops.reshape(d_rg, (1,) + d_rg.shape) * scales)) * n_bw
    return k_gg + k_rr - 2.0 * k_rg


def query_contrast_loss(generated, real, unmatched, tau_r: float,
                        include_other_positives: bool = True) -> tuple[Tensor, bool]:
    """Pull each generated query to its real counterpart, push unmatched queries away.

    With ``include_other_positives`` the other real matched queries also act
    as negatives. Returns ``(loss, skipped)``.
    """
    generated = as_tensor(generated)
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    unmatched = np.asarray(unmatched, dtype=np.float64).reshape(-1, generated.shape[1])
    if generated.shape[0] == 0:
        return Tensor(0.0), True
    if generated.shape != real.shape:
        raise ShapeError(f"query_contrast_loss: generated {generated.shape} vs real {real.shape}")
    if include_other_positives:
        keys = np.concatenate([real, unmatched], axis=0)
        return _info_nce(generated, keys, real.shape[0], tau_r), False
    g = ops.l2_normalize(generated)
    r = real / np.maximum(np.linalg.norm(real, axis=1, keepdims=True), 1e-12)
    pos = ops.sum(g * r, axis=1, keepdims=True) * (1.0 / tau_r)
    if unmatched.shape[0]:
        u = unmatched / np.maximum(np.linalg.norm(unmatched, axis=1, keepdims=True), 1e-12)
        logits = ops.concat([pos, ops.matmul(g, u.T) * (1.0 / tau_r)], axis=1)
    else:
        logits = pos
    return ops.mean(ops.logsumexp(logits, axis=1) - ops.reshape(pos, (-1,))), False


def kl_loss(mu, logvar) -> Tensor:
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_loss: mu {mu.shape} vs logvar {logvar.shape}")
    per_row = 0.5 * ops.sum(ops.exp(logvar) + mu * mu - 1.0 - logvar, axis=1)
    return ops.mean(per_row)


def match_loss(probs, targets, mask_term: float = 0.0, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Focal over all queries (one-hot rows for matched, zero rows for no-object) plus mask loss.

    Mask logits are frozen inputs here, so the mask part enters as a constant.
    """
    return focal_loss(probs, targets, alpha, gamma) + mask_term


# ----------------------------------------------------------------------------

STAGE_TERMS = {
    1: ("cga", "cia", "match"),
    2: ("mmd", "kl", "qc", "sup"),
    3: ("seen_focal", "pseudo_focal"),
}


def stage_weights(stage: int, w: LossWeights) -> dict[str, float]:
    if stage == 1:
        return {"cga": w.lambda_g, "cia": w.lambda_c, "match": 1.0}
    if stage == 2:
        return {"mmd": 1.0, "kl": w.beta_kl, "qc": w.lambda_r, "sup": w.lambda_f}
    if stage == 3:
        return {"seen_focal": w.lambda_seen, "pseudo_focal": 1.0}
    raise ValueError(f"unknown stage {stage}")


@dataclass
class StageLossReport:
    stage: int
    components: dict[str, float]
    weights: dict[str, float]
    total: Tensor
    flags: dict[str, bool] = field(default_factory=dict)

    @property
    def total_value(self) -> float:
        return self.total.item()

    def record(self) -> dict:
        return {"stage": self.stage, "components": dict(self.components),
                "weights": dict(self.weights), "total": self.total_value,
                "flags": dict(self.flags)}


def compose_stage_loss(stage: int, components: dict, weights: LossWeights,
                       flags: dict[str, bool] | None = None) -> StageLossReport:
    """Weighted sum of a stage's loss terms; zero-weight terms are left out of the graph."""
    if stage not in STAGE_TERMS:
        raise ValueError(f"unknown stage {stage}")
    w = stage_weights(stage, weights)
    for name in STAGE_TERMS[stage]:
        if name not in components:
            raise KeyError(f"stage {stage} loss is missing component '{name}'")
    total = Tensor(0.0)
    values = {}
    for name in STAGE_TERMS[stage]:
        term = as_tensor(components[name])
        values[name] = term.item()
        if w[name] != 0.0:
            total = total + term * w[name]
    return StageLossReport(stage, values, w, total, dict(flags or {}))
