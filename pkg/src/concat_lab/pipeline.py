"""Three-stage training (projector, generator, union finetuning), inference and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .datagen import ImageSample, SemanticEmbeddingTable, SyntheticDataset
from .diffcore import Adam, backward, ops
from .diffcore.tensor import Tensor
from .losses import (
    TokenBank,
    cga_loss,
    cia_loss,
    classification_logits,
    compose_stage_loss,
    conditional_weights,
    kl_loss,
    mmd_loss,
    query_contrast_loss,
    reconstruct_cls,
    select_matched,
)
from .matching import Assignment, LossWeights, focal_loss, hungarian, mask_cost, match_cost_matrix
from .metrics import MetricsReport, PanopticPrediction, evaluate_predictions
from .models import (
    Generator,
    SemanticProjector,
    cvae_decode,
    cvae_encode,
    decode_condition,
    reparameterize,
    sample_pseudo_unseen,
)

log = logging.getLogger(__name__)

SEGMENT_THRESHOLD = 0.1
UNSEEN_LOGIT_BONUS = 1.0
MASK_ON = 0.5
FULL_TABLE_SEEN_TERM = True

# rng stream ids below the run seed
_STREAM_PROJECTOR, _STREAM_GENERATOR = 10, 20
_STREAM_STAGE = {1: 1, 2: 2, 3: 3}


@dataclass
class TrainLog:
    stage: int
    iterations: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    skipped_batches: int = 0


def build_projector(config: RunConfig) -> SemanticProjector:
    spec = config.dataset
    rng = np.random.default_rng([config.seed, _STREAM_PROJECTOR])
    return SemanticProjector(spec.d_vision, spec.c_semantic, rng, config.model.projector_hidden)


def build_generator(config: RunConfig) -> Generator:
    spec = config.dataset
    rng = np.random.default_rng([config.seed, _STREAM_GENERATOR])
    return Generator(spec.d_vision, spec.c_semantic, rng, config.model.cvae_hidden,
                     config.model.condition_gain)


# ----------------------------------------------------------------------------
# shared per-image helpers

class _Prepared:
    """Training-invariant per-image quantities (mask costs, seen label columns)."""

    def __init__(self, sample: ImageSample, seen_column: dict[int, int], w: LossWeights):
        self.sample = sample
        self.labels = np.array([seen_column[int(c)] for c in sample.gt_categories], dtype=np.int64)
        self.mask_costs = mask_cost(sample.pred_mask_logits, sample.gt_masks, w.mask_bce, w.mask_dice)


def _prepare(samples, table: SemanticEmbeddingTable, w: LossWeights) -> list[_Prepared]:
    seen_column = {int(c): i for i, c in enumerate(table.seen_ids)}
    out = []
    for i, s in enumerate(samples):
        if any(int(c) not in seen_column for c in s.gt_categories):
            raise ValueError(f"training image {i} contains a category outside the seen set")
        out.append(_Prepared(s, seen_column, w))
    return out


def _match(prep: _Prepared, probs: np.ndarray, w: LossWeights) -> Assignment:
    cost = match_cost_matrix(probs, None, prep.labels, None, w, mask_costs=prep.mask_costs)
    return hungarian(cost)


def _targets(assignment: Assignment, labels: np.ndarray, n_classes: int) -> np.ndarray:
    t = np.zeros((len(assignment.query_to_segment), n_classes))
    for q, s in assignment.matched_pairs():
        t[q, labels[s]] = 1.0
    return t


def query_focal(probs, targets, n_images: int, w: LossWeights):
    """Focal loss as a per-query mean over categories, summed over queries, averaged over images."""
    rows = probs.shape[0]
    if rows == 0:
        return Tensor(0.0)
    return focal_loss(probs, targets, w.alpha_focal, w.gamma_focal) * (rows / n_images)


def poly_lr(lr0: float, step: int, total: int, power: float) -> float:
    """Polynomial decay from ``lr0`` toward 0 over ``total`` steps (``step`` is 0-based)."""
    if power == 0 or total <= 0:
        return lr0
    return lr0 * max(0.0, 1.0 - step / total) ** power


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _epoch_means(records: list[dict]) -> dict:
    if not records:
        return {"total": None, "components": {}}
    keys = records[0]["components"].keys()
    return {"total": float(np.mean([r["total"] for r in records])),
            "components": {k: float(np.mean([r["components"][k] for r in records])) for k in keys}}


# ----------------------------------------------------------------------------
# stage 1

def stage1_step(batch: list[_Prepared], projector: SemanticProjector, seen_emb: np.ndarray,
                bank: TokenBank | None, w: LossWeights, update_bank: bool = True,
                assignments: list[Assignment] | None = None):
    """Build the stage-1 loss for one batch. Returns (report, assignments)."""
    k = batch[0].sample.vision_queries.shape[0]
    V = np.concatenate([p.sample.vision_queries for p in batch], axis=0)
    S = projector(V)
    P = classification_logits(S, seen_emb)
    if assignments is None:
        assignments = [_match(p, P.data[b * k:(b + 1) * k], w) for b, p in enumerate(batch)]

    targets = np.concatenate([_targets(a, p.labels, seen_emb.shape[0]) for a, p in zip(assignments, batch)])
    pair_costs = [p.mask_costs[q, s] for a, p in zip(assignments, batch) for q, s in a.matched_pairs()]
    mask_term = float(np.sum(pair_costs)) / len(batch)
    l_match = query_focal(P, targets, len(batch), w) + mask_term

    recon, cia_q, cia_t = [], [], []
    for b, (a, p) in enumerate(zip(assignments, batch)):
        S_b = S[b * k:(b + 1) * k]
        W = conditional_weights(S_b, p.sample.global_cls, a.matched_mask(), w.gamma)
        recon.append(reconstruct_cls(W, S_b))
        S_m, seg_order = select_matched(S_b, a)
        if seg_order:
            cia_q.append(S_m)
            cia_t.append(p.sample.segment_cls[seg_order])
    globals_ = np.stack([p.sample.global_cls for p in batch])
    l_cga = cga_loss(ops.concat(recon, axis=0), globals_, bank, w.tau, update_bank=update_bank)
    if cia_q:
        l_cia, skipped = cia_loss(ops.concat(cia_q, axis=0), np.concatenate(cia_t), w.tau)
    else:
        l_cia, skipped = cia_loss(np.zeros((0, S.shape[1])), np.zeros((0, S.shape[1])), w.tau)
    report = compose_stage_loss(1, {"cga": l_cga, "cia": l_cia, "match": l_match}, w,
                                flags={"cia_skipped": skipped})
    return report, assignments


def train_stage1(dataset: SyntheticDataset, config: RunConfig,
                 projector: SemanticProjector | None = None) -> tuple[SemanticProjector, TrainLog]:
    """Train the projector on seen-only images; unseen embeddings are never read."""
    if not dataset.train:
        raise ValueError("stage 1 needs a non-empty training split")
    w, tc = config.losses, config.training
    table = dataset.table
    seen_emb = table.seen()
    prepared = _prepare(dataset.train, table, w)
    projector = projector or build_projector(config)
    projector.train().requires_grad_(True)
    opt = Adam(projector.named_parameters(), lr=tc.base_lr)
    bank = TokenBank(w.bank_size)
    rng = np.random.default_rng([config.seed, _STREAM_STAGE[1]])
    tlog = TrainLog(stage=1)
    lr0 = opt.lr
    total = tc.stage1_epochs * -(-len(prepared) // tc.batch_size)
    it = 0
    for epoch in range(1, tc.stage1_epochs + 1):
        records = []
        for idx in _batches(len(prepared), tc.batch_size, rng):
            report, _ = stage1_step([prepared[i] for i in idx], projector, seen_emb, bank, w)
            grads = backward(report.total)
            opt.lr = poly_lr(lr0, it, total, tc.lr_power)
            opt.step(grads)
            it += 1
            rec = {"iteration": it, "epoch": epoch, "lr": opt.lr, **report.record()}
            records.append(rec)
            tlog.iterations.append(rec)
        tlog.epochs.append({"epoch": epoch, **_epoch_means(records)})
        log.info("stage1 epoch %d loss %.4f", epoch, tlog.epochs[-1]["total"])
    return projector, tlog


# ----------------------------------------------------------------------------
# stage 2

@dataclass
class _Matched:
    real: np.ndarray          # O_i x D, segment order
    labels: np.ndarray        # O_i seen columns
    unmatched: np.ndarray     # (K - O_i) x D


def _matched_sets(prepared: list[_Prepared], projector: SemanticProjector, seen_emb: np.ndarray,
                  w: LossWeights) -> list[_Matched]:
    out = []
    for p in prepared:
        V = p.sample.vision_queries
        probs = classification_logits(ops.stop_gradient(projector(V)), seen_emb).data
        a = _match(p, probs, w)
        pairs = a.matched_pairs()
        q_idx = np.array([q for q, _ in pairs], dtype=np.int64)
        mask = a.matched_mask()
        out.append(_Matched(V[q_idx], p.labels[[s for _, s in pairs]], V[~mask]))
    return out


def stage2_step(items: list[_Matched], generator: Generator, projector: SemanticProjector,
                seen_emb: np.ndarray, w: LossWeights, eps: np.ndarray):
    real = np.concatenate([m.real for m in items], axis=0)
    labels = np.concatenate([m.labels for m in items])
    unmatched = np.concatenate([m.unmatched for m in items], axis=0)
    cond = seen_emb[labels]
    mu, logvar = cvae_encode(real, generator)
    z = reparameterize(mu, logvar, eps)
    fake = cvae_decode(z, cond, generator)
    l_g = mmd_loss(real, fake, w.bandwidths)
    l_k = kl_loss(mu, logvar)
    l_qc, skipped = query_contrast_loss(fake, real, unmatched, w.tau_r, w.qc_other_positives)
    onehot = np.zeros((len(labels), seen_emb.shape[0]))
    onehot[np.arange(len(labels)), labels] = 1.0
    l_sup = query_focal(classification_logits(projector(fake), seen_emb), onehot, len(items), w)
    return compose_stage_loss(2, {"mmd": l_g, "kl": l_k, "qc": l_qc, "sup": l_sup}, w,
                              flags={"qc_skipped": skipped})


def generator_fidelity(generator: Generator, projector: SemanticProjector, table: SemanticEmbeddingTable,
                       categories, n_samples: int, rng: np.random.Generator,
                       candidates: np.ndarray | None = None) -> dict[int, float]:
    """Fraction of decoded samples whose projection is nearest (cosine) to the conditioning category.

    ``candidates`` defaults to the seen embeddings; ``categories`` are row
    indices into that candidate set.
    """
    cand = table.seen() if candidates is None else candidates
    cand_unit = cand / np.linalg.norm(cand, axis=1, keepdims=True)
    out = {}
    for c in categories:
        z = rng.standard_normal((n_samples, generator.c_semantic))
        fake = decode_condition(generator, np.repeat(cand[c][None], n_samples, axis=0), z)
        S = ops.stop_gradient(projector(fake)).data
        S_unit = S / np.maximum(np.linalg.norm(S, axis=1, keepdims=True), 1e-12)
        out[int(c)] = float(np.mean((S_unit @ cand_unit.T).argmax(axis=1) == c))
    return out


def per_category_mmd(generator: Generator, matched: list[_Matched], seen_emb: np.ndarray,
                     bandwidths, n_samples: int, rng: np.random.Generator) -> float:
    """Mean over seen categories of MMD(real matched queries, decoded samples)."""
    real = np.concatenate([m.real for m in matched], axis=0)
    labels = np.concatenate([m.labels for m in matched])
    vals = []
    for c in range(seen_emb.shape[0]):
        r = real[labels == c][:n_samples]
        if len(r) == 0:
            continue
        z = rng.standard_normal((n_samples, generator.c_semantic))
        fake = decode_condition(generator, np.repeat(seen_emb[c][None], n_samples, axis=0), z)
        vals.append(mmd_loss(r, Tensor(fake), bandwidths).item())
    return float(np.mean(vals)) if vals else 0.0


def train_stage2(dataset: SyntheticDataset, projector: SemanticProjector, config: RunConfig,
                 generator: Generator | None = None) -> tuple[Generator, TrainLog]:
    """Train the CVAE on matched seen queries with the projector frozen."""
    w, tc = config.losses, config.training
    table = dataset.table
    seen_emb = table.seen()
    projector.eval().requires_grad_(False)
    prepared = _prepare(dataset.train, table, w)
    matched = _matched_sets(prepared, projector, seen_emb, w)
    generator = generator or build_generator(config)
    generator.train().requires_grad_(True)
    opt = Adam(generator.named_parameters(), lr=tc.base_lr * tc.stage2_lr_multiplier)
    rng = np.random.default_rng([config.seed, _STREAM_STAGE[2]])
    probe_seed = [config.seed, _STREAM_STAGE[2], 99]
    tlog = TrainLog(stage=2)
    lr0 = opt.lr
    total = tc.stage2_epochs * -(-len(matched) // tc.batch_size)
    it = 0
    step = 0
    for epoch in range(1, tc.stage2_epochs + 1):
        records = []
        for idx in _batches(len(matched), tc.batch_size, rng):
            items = [matched[i] for i in idx]
            n = sum(len(m.labels) for m in items)
            opt.lr = poly_lr(lr0, step, total, tc.lr_power)
            step += 1  # skipped batches still advance the schedule
            if n == 0:
                tlog.skipped_batches += 1
                continue
            eps = rng.standard_normal((n, generator.c_semantic))
            report = stage2_step(items, generator, projector, seen_emb, w, eps)
            opt.step(backward(report.total))
            it += 1
            rec = {"iteration": it, "epoch": epoch, "lr": opt.lr, **report.record()}
            records.append(rec)
            tlog.iterations.append(rec)
        probe = per_category_mmd(generator, matched, seen_emb, w.bandwidths, tc.fidelity_samples,
                                 np.random.default_rng(probe_seed))
        tlog.epochs.append({"epoch": epoch, "category_mmd": probe, **_epoch_means(records)})
        log.info("stage2 epoch %d loss %s mmd %.5f", epoch, tlog.epochs[-1]["total"], probe)
    generator.eval()
    return generator, tlog


# ----------------------------------------------------------------------------
# stage 3

def stage3_step(batch: list[_Prepared], projector: SemanticProjector, seen_emb: np.ndarray,
                full_emb: np.ndarray, pseudo: tuple[np.ndarray, np.ndarray], w: LossWeights,
                assignments: list[Assignment] | None = None):
    k = batch[0].sample.vision_queries.shape[0]
    V = np.concatenate([p.sample.vision_queries for p in batch], axis=0)
    S = projector(V)
    n_seen = seen_emb.shape[0]
    cols = full_emb if FULL_TABLE_SEEN_TERM else seen_emb
    P = classification_logits(S, cols)
    if assignments is None:
        assignments = [_match(p, P.data[b * k:(b + 1) * k, :n_seen], w) for b, p in enumerate(batch)]
    targets = np.concatenate([_targets(a, p.labels, cols.shape[0]) for a, p in zip(assignments, batch)])
    seen_term = query_focal(P, targets, len(batch), w)
    fake, labels = pseudo
    # pseudo queries join the batch's real queries under the same normalization
    onehot = np.zeros((len(labels), full_emb.shape[0]))
    onehot[np.arange(len(labels)), labels] = 1.0
    if len(labels):
        pseudo_term = query_focal(classification_logits(projector(fake), full_emb), onehot, len(batch), w)
    else:
        pseudo_term = Tensor(0.0)
    return compose_stage_loss(3, {"seen_focal": seen_term, "pseudo_focal": pseudo_term}, w)


def union_finetune(dataset: SyntheticDataset, generator: Generator, projector: SemanticProjector,
                   config: RunConfig, eval_each_epoch: bool = True) -> tuple[SemanticProjector, TrainLog]:
    """Finetune the projector on real seen queries plus decoded pseudo-unseen queries."""
    w, tc = config.losses, config.training
    table = dataset.table
    if len(table.unseen_ids) == 0:
        raise ValueError("union finetuning needs unseen embeddings (transductive setting)")
    seen_emb = table.seen()
    full_emb = table.full()
    prepared = _prepare(dataset.train, table, w)
    generator.eval().requires_grad_(False)
    projector.train().requires_grad_(True)
    opt = Adam(projector.named_parameters(), lr=tc.base_lr * tc.stage3_lr_multiplier)
    rng = np.random.default_rng([config.seed, _STREAM_STAGE[3]])
    tlog = TrainLog(stage=3)
    lr0 = opt.lr
    total = tc.stage3_epochs * -(-len(prepared) // tc.batch_size)
    it = 0
    for epoch in range(1, tc.stage3_epochs + 1):
        records = []
        for idx in _batches(len(prepared), tc.batch_size, rng):
            pseudo = sample_pseudo_unseen(table, tc.pseudo_per_step, generator, rng)
            report = stage3_step([prepared[i] for i in idx], projector, seen_emb, full_emb, pseudo, w)
            opt.lr = poly_lr(lr0, it, total, tc.lr_power)
            opt.step(backward(report.total))
            it += 1
            rec = {"iteration": it, "epoch": epoch, "lr": opt.lr, **report.record()}
            records.append(rec)
            tlog.iterations.append(rec)
        entry = {"epoch": epoch, **_epoch_means(records)}
        if eval_each_epoch and dataset.test:
            entry["metrics"] = evaluate(dataset, projector, "transductive").to_dict()
        tlog.epochs.append(entry)
        log.info("stage3 epoch %d loss %.4f", epoch, entry["total"])
    projector.eval()
    return projector, tlog


# ----------------------------------------------------------------------------
# inference

def infer_panoptic(sample: ImageSample, projector: SemanticProjector, table: SemanticEmbeddingTable,
                   mode: str, threshold: float = SEGMENT_THRESHOLD) -> PanopticPrediction:
    """Classify queries over all categories and merge their masks per pixel."""
    if mode not in ("inductive", "transductive"):
        raise ValueError(f"unknown mode {mode!r}")
    emb = table.full()
    S = ops.stop_gradient(projector(sample.vision_queries)).data
    logits = S @ emb.T
    if mode == "inductive":
        logits[:, table.unseen_ids] += UNSEEN_LOGIT_BONUS
    probs = 1.0 / (1.0 + np.exp(-logits))
    conf = probs.max(axis=1)
    cats = probs.argmax(axis=1)
    keep = np.flatnonzero(conf >= threshold)
    h, w = sample.pred_mask_logits.shape[1:]
    seg_map = np.zeros((h, w), dtype=np.int64)
    if keep.size == 0:
        return PanopticPrediction(seg_map, {})
    mask_prob = 1.0 / (1.0 + np.exp(-sample.pred_mask_logits[keep]))
    scores = conf[keep][:, None, None] * mask_prob
    winner = scores.argmax(axis=0)
    on = np.take_along_axis(mask_prob, winner[None], axis=0)[0] >= MASK_ON
    segments = {}
    next_id = 1
    for j, q in enumerate(keep):
        pix = (winner == j) & on
        if not pix.any():
            continue
        seg_map[pix] = next_id
        segments[next_id] = (int(cats[q]), float(conf[q]))
        next_id += 1
    return PanopticPrediction(seg_map, segments)


def evaluate(dataset: SyntheticDataset, projector: SemanticProjector, mode: str) -> MetricsReport:
    projector.eval()
    preds = [infer_panoptic(s, projector, dataset.table, mode) for s in dataset.test]
    return evaluate_predictions(preds, dataset.test, dataset.table.seen_ids, dataset.table.unseen_ids)


# ----------------------------------------------------------------------------

@dataclass
class PipelineResult:
    config: RunConfig
    projector_stage1: dict
    inductive: MetricsReport
    transductive: MetricsReport | None = None
    projector: SemanticProjector | None = None
    generator: Generator | None = None
    logs: dict[int, TrainLog] = field(default_factory=dict)
    fidelity: dict[int, float] | None = None

    @property
    def final(self) -> MetricsReport:
        return self.transductive if self.transductive is not None else self.inductive

    def best_stage3(self) -> tuple[int, MetricsReport] | None:
        """Stage-3 epoch with the highest transductive hPQ (first one on ties)."""
        log3 = self.logs.get(3)
        if log3 is None:
            return None
        scored = [(e["epoch"], e["metrics"]) for e in log3.epochs if "metrics" in e]
        if not scored:
            return None
        epoch, m = max(scored, key=lambda em: (em[1]["hPQ"], -em[0]))
        return epoch, MetricsReport.from_dict(m)


def run_pipeline(dataset: SyntheticDataset, config: RunConfig, stage1: SemanticProjector | None = None,
                 stage1_log: TrainLog | None = None) -> PipelineResult:
    """Stage 1 (+ inductive eval); in transductive mode also stages 2 and 3 and transductive eval.

    A trained stage-1 projector may be passed in to share it across runs that
    differ only in later-stage settings.
    """
    if stage1 is None:
        stage1, stage1_log = train_stage1(dataset, config)
    logs = {1: stage1_log} if stage1_log is not None else {}
    snapshot = {k: v.copy() for k, v in stage1.state_dict().items()}
    inductive = evaluate(dataset, stage1, "inductive")
    result = PipelineResult(config, snapshot, inductive, projector=stage1, logs=logs)
    if config.mode == "inductive":
        return result
    projector = build_projector(config)
    projector.load_state_dict(snapshot)
    generator, log2 = train_stage2(dataset, projector, config)
    result.fidelity = generator_fidelity(generator, projector, dataset.table,
                                         range(len(dataset.table.seen_ids)),
                                         config.training.fidelity_samples,
                                         np.random.default_rng([config.seed, 77]))
    projector, log3 = union_finetune(dataset, generator, projector, config)
    result.transductive = evaluate(dataset, projector, "transductive")
    result.projector, result.generator = projector, generator
    result.logs.update({2: log2, 3: log3})
    return result
