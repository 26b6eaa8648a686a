import numpy as np
import pytest

from concat_lab import pipeline as P
from concat_lab.config import RunConfig
from concat_lab.datagen import ImageSample, SemanticEmbeddingTable, generate_dataset
from concat_lab.diffcore import backward, ops
from concat_lab.matching import Assignment
from concat_lab.models import SemanticProjector

from .conftest import tiny_config


def test_poly_lr():
    assert P.poly_lr(0.1, 0, 100, 0.9) == 0.1
    assert P.poly_lr(0.1, 50, 100, 0.9) == pytest.approx(0.1 * 0.5 ** 0.9)
    assert P.poly_lr(0.1, 100, 100, 0.9) == 0.0
    assert P.poly_lr(0.1, 70, 100, 0.0) == 0.1
    assert P.poly_lr(0.1, 3, 0, 0.9) == 0.1


def test_tiny_pipeline_runs_and_logs(tiny_dataset):
    cfg = tiny_config()
    res = P.run_pipeline(tiny_dataset, cfg)
    assert set(res.logs) == {1, 2, 3}
    assert len(res.logs[1].epochs) == 2 and len(res.logs[3].epochs) == 1
    rec = res.logs[1].iterations[0]
    assert {"iteration", "epoch", "lr", "components", "total"} <= set(rec)
    assert set(rec["components"]) == {"cga", "cia", "match"}
    assert set(res.logs[2].iterations[0]["components"]) == {"mmd", "kl", "qc", "sup"}
    assert res.transductive is not None and res.fidelity is not None
    assert res.best_stage3()[0] == 1
    for k in ("sPQ", "uPQ", "hPQ", "sIoU", "uIoU", "hIoU"):
        assert 0 <= getattr(res.final, k) <= 1


def test_tiny_pipeline_is_deterministic(tiny_dataset):
    a = P.run_pipeline(tiny_dataset, tiny_config())
    b = P.run_pipeline(tiny_dataset, tiny_config())
    assert a.final.to_json() == b.final.to_json()
    assert a.inductive.to_json() == b.inductive.to_json()


def test_inductive_training_never_reads_unseen_embeddings():
    ds = generate_dataset(tiny_config().dataset)
    ds.table.access_log.clear()
    P.train_stage1(ds, tiny_config())
    assert ds.table.access_log == []
    cfg = tiny_config()
    cfg.mode = "inductive"
    res = P.run_pipeline(ds, cfg)
    assert res.transductive is None and set(res.logs) == {1}
    # only inference, one read per test image, touches the full table
    assert ds.table.access_log == ["full"] * len(ds.test)


def test_stage1_rejects_unseen_training_images(tiny_dataset):
    ds = generate_dataset(tiny_config().dataset)
    ds.train[0].gt_categories[0] = ds.table.unseen_ids[0]
    with pytest.raises(ValueError, match="outside the seen set"):
        P.train_stage1(ds, tiny_config())
    ds.train = []
    with pytest.raises(ValueError, match="non-empty"):
        P.train_stage1(ds, tiny_config())


def test_stage1_ablation_switches_remove_terms(tiny_dataset):
    cfg = tiny_config()
    w = cfg.losses.__class__(lambda_c=0.0, gamma=0.0, bank_size=0)
    prep = P._prepare(tiny_dataset.train[:2], tiny_dataset.table, w)
    proj = P.build_projector(cfg)
    report, _ = P.stage1_step(prep, proj, tiny_dataset.table.seen(), None, w)
    assert report.weights == {"cga": 1.0, "cia": 0.0, "match": 1.0}
    c = report.components
    assert report.total_value == pytest.approx(c["cga"] + c["match"])


def test_stage2_never_touches_projector(tiny_dataset):
    cfg = tiny_config()
    proj, _ = P.train_stage1(tiny_dataset, cfg)
    before = {k: v.copy() for k, v in proj.state_dict().items()}
    gen, log2 = P.train_stage2(tiny_dataset, proj, cfg)
    for k, v in proj.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    # and the stage-2 graph gives the projector no adjoints
    w = cfg.losses
    matched = P._matched_sets(P._prepare(tiny_dataset.train, tiny_dataset.table, w), proj,
                              tiny_dataset.table.seen(), w)
    items = [m for m in matched if len(m.labels)][:2]
    n = sum(len(m.labels) for m in items)
    report = P.stage2_step(items, gen.train(), proj, tiny_dataset.table.seen(), w,
                           np.zeros((n, gen.c_semantic)))
    grads = backward(report.total)
    proj_ids = {id(t) for t in proj.named_parameters().values()}
    assert not proj_ids & {id(t) for t in grads}
    assert grads


def test_stage2_skips_batches_without_matches(tiny_dataset):
    cfg = tiny_config()
    proj, _ = P.train_stage1(tiny_dataset, cfg)
    orig = P._matched_sets

    def none_matched(*a, **k):
        out = orig(*a, **k)
        for m in out[1:]:
            m.real, m.labels = m.real[:0], m.labels[:0]
        return out

    try:
        P._matched_sets = none_matched
        cfg2 = tiny_config(batch_size=1)
        _, log2 = P.train_stage2(tiny_dataset, proj, cfg2)
    finally:
        P._matched_sets = orig
    n = len(tiny_dataset.train)
    epochs = cfg2.training.stage2_epochs
    assert log2.skipped_batches == (n - 1) * epochs
    assert len(log2.iterations) == epochs
    assert all(np.isfinite(r["total"]) for r in log2.iterations)


def test_union_finetune_requires_unseen(tiny_dataset):
    cfg = tiny_config()
    ds = generate_dataset(cfg.dataset)
    t = ds.table
    ds.table = SemanticEmbeddingTable(t.embeddings, np.arange(t.n_categories), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError, match="unseen"):
        P.union_finetune(ds, P.build_generator(cfg), P.build_projector(cfg), cfg)


# ----------------------------------------------------------------------------
# inference

def _sample(logits, queries):
    k, h, w = logits.shape
    return ImageSample(queries, logits, np.zeros(0, dtype=np.int64), np.zeros((0, h, w), bool),
                       np.zeros(0, dtype=np.int64), np.zeros(2), np.zeros((0, 2)), np.full(k, -1))


class _Fixed(SemanticProjector):
    """Projector returning the queries unchanged (D == C)."""

    def __init__(self, d):
        super().__init__(d, d, np.random.default_rng(0))

    def __call__(self, V):
        return ops.as_tensor(V)


def _table():
    return SemanticEmbeddingTable(np.eye(3), np.array([0, 1]), np.array([2]))


def test_inference_all_below_threshold_is_void():
    logits = np.full((2, 4, 4), 10.0)
    queries = np.full((2, 3), -10.0)  # every class prob ~ 0
    pred = P.infer_panoptic(_sample(logits, queries), _Fixed(3), _table(), "transductive")
    assert pred.segments == {} and not pred.segment_map.any()


def test_inference_single_confident_query():
    mask = np.zeros((4, 4), bool)
    mask[1:3, 0:2] = True
    logits = np.where(mask, 20.0, -20.0)[None]
    queries = np.array([[8.0, -8.0, -8.0]])
    pred = P.infer_panoptic(_sample(logits, queries), _Fixed(3), _table(), "transductive")
    assert list(pred.segments.values())[0][0] == 0
    np.testing.assert_array_equal(pred.segment_map > 0, mask)


def test_inference_overlap_goes_to_higher_score():
    a = np.zeros((4, 4), bool)
    a[:, :3] = True
    b = np.zeros((4, 4), bool)
    b[:, 1:] = True
    logits = np.stack([np.where(a, 20.0, -20.0), np.where(b, 20.0, -20.0)])
    queries = np.array([[5.0, -9.0, -9.0], [-9.0, 1.0, -9.0]])  # query 0 is more confident
    pred = P.infer_panoptic(_sample(logits, queries), _Fixed(3), _table(), "transductive")
    cat = pred.category_map()
    assert np.all(cat[:, :3] == 0) and np.all(cat[:, 3] == 1)
    ids = set(np.unique(pred.segment_map)) - {0}
    assert ids == set(pred.segments)


def test_inductive_bonus_applies_to_unseen_logits():
    logits = np.full((1, 4, 4), 20.0)
    queries = np.array([[0.5, -5.0, 0.0]])  # seen logit 0.5 beats unseen 0 ...
    s = _sample(logits, queries)
    assert P.infer_panoptic(s, _Fixed(3), _table(), "transductive").segments[1][0] == 0
    # ... until the unseen logit is raised by 1
    pred = P.infer_panoptic(s, _Fixed(3), _table(), "inductive")
    assert pred.segments[1][0] == 2
    assert pred.segments[1][1] == pytest.approx(1 / (1 + np.exp(-1.0)))
    with pytest.raises(ValueError):
        P.infer_panoptic(s, _Fixed(3), _table(), "sideways")


def test_stage3_step_fixed_assignment_reuse(tiny_dataset):
    cfg = tiny_config()
    w = cfg.losses
    prep = P._prepare(tiny_dataset.train[:2], tiny_dataset.table, w)
    proj = P.build_projector(cfg)
    gen = P.build_generator(cfg)
    pseudo = P.sample_pseudo_unseen(tiny_dataset.table, 3, gen, np.random.default_rng(0))
    a = P.stage3_step(prep, proj, tiny_dataset.table.seen(), tiny_dataset.table.full(), pseudo, w)
    k = tiny_dataset.spec.k_queries
    assigns = [Assignment([None] * k, 0.0) for _ in prep]
    b = P.stage3_step(prep, proj, tiny_dataset.table.seen(), tiny_dataset.table.full(), pseudo, w,
                      assignments=assigns)
    assert b.components["seen_focal"] != a.components["seen_focal"]
    empty = (np.zeros((0, tiny_dataset.spec.d_vision)), np.zeros(0, dtype=np.int64))
    c = P.stage3_step(prep, proj, tiny_dataset.table.seen(), tiny_dataset.table.full(), empty, w)
    assert c.components["pseudo_focal"] == 0.0


# ----------------------------------------------------------------------------
# end-to-end behaviour at the default scale (seed 0, shared session runs)

@pytest.mark.slow
def test_stage1_trains_to_high_matched_accuracy(runs):
    res, _ = runs.run(0)
    ds = runs.dataset(0)
    cfg = RunConfig().with_seed(0)
    proj = P.build_projector(cfg)
    proj.load_state_dict(res.projector_stage1)
    matched = P._matched_sets(P._prepare(ds.train, ds.table, cfg.losses), proj, ds.table.seen(), cfg.losses)
    hits = []
    for m in matched:
        if len(m.labels):
            hits.extend((proj(m.real).data @ ds.table.seen().T).argmax(axis=1) == m.labels)
    assert np.mean(hits) >= 0.95
    epochs = res.logs[1].epochs
    assert epochs[-1]["total"] < epochs[0]["total"]


@pytest.mark.slow
def test_stage2_halves_category_mmd(runs):
    res, _ = runs.run(0)
    epochs = res.logs[2].epochs
    assert epochs[-1]["category_mmd"] <= 0.5 * epochs[0]["category_mmd"]


@pytest.mark.slow
def test_union_finetune_raises_unseen_pq(runs):
    res, _ = runs.run(0)
    assert res.transductive.uPQ > res.inductive.uPQ


@pytest.mark.slow
def test_without_seen_focal_term_seen_pq_collapses(runs):
    full, _ = runs.run(0)
    ablated, _ = runs.run(0, ("losses.lambda_seen=0",))
    assert ablated.transductive.sPQ < 0.7 * full.transductive.sPQ


@pytest.mark.slow
def test_no_pseudo_queries_gives_no_unseen_gain(runs):
    res, _ = runs.run(0, ("training.pseudo_per_step=0",))
    ds = runs.dataset(0)
    proj = P.build_projector(RunConfig().with_seed(0))
    proj.load_state_dict(res.projector_stage1)
    stage1_u = P.evaluate(ds, proj, "transductive").uPQ
    assert res.transductive.uPQ <= stage1_u
