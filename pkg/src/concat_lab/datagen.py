"""Deterministic synthetic stand-in for frozen queries, panoptic labels and CLS tokens.

Each category has a unit prototype in vision space. Semantic embeddings are a
fixed random linear image of the prototypes (plus noise), so the vision ->
semantics relation is learnable from seen categories and carries over to
unseen ones. Every image is generated from its own seed ``(seed, split, index)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore.checkpoint import load_checkpoint, save_checkpoint

NORM_EPS = 1e-12
_SPLIT_CODE = {"train": 1, "test": 2}
_TABLE_STREAM = 0


class GenerationError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    n_seen: int = 8
    n_unseen: int = 4
    d_vision: int = 32
    c_semantic: int = 16
    k_queries: int = 12
    grid: tuple[int, int] = (32, 32)
    n_train: int = 400
    n_test: int = 100
    segments_per_image: tuple[int, int] = (1, 4)
    sigma_vision: float = 0.1
    sigma_cls: float = 0.05
    sigma_semantic: float = 0.05
    mask_flip_rate: float = 0.02
    mask_logit: float = 6.0
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.segments_per_image = tuple(int(s) for s in self.segments_per_image)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.segments_per_image
        checks = [
            (self.n_seen >= 2, "n_seen must be >= 2"),
            (self.n_unseen >= 1, "n_unseen must be >= 1"),
            (1 <= lo <= hi, "segments_per_image must be an inclusive range with 1 <= lo <= hi"),
            (self.k_queries >= hi, "k_queries must be >= the maximum segments per image"),
            (min(self.grid) >= 4, "grid must be at least 4 x 4"),
            (self.d_vision >= 1 and self.c_semantic >= 1, "dimensions must be positive"),
            (self.n_train >= 0 and self.n_test >= 0, "image counts must be nonnegative"),
            (0.0 <= self.mask_flip_rate <= 1.0, "mask_flip_rate must lie in [0, 1]"),
            (min(self.sigma_vision, self.sigma_cls, self.sigma_semantic) >= 0, "noise scales must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"DatasetSpec: {msg}")

    @property
    def n_categories(self) -> int:
        return self.n_seen + self.n_unseen

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["segments_per_image"] = list(self.segments_per_image)
        return d


@dataclass
class SemanticEmbeddingTable:
    """Category embeddings with the seen/unseen partition.

    Reads of unseen rows go through ``unseen()`` / ``full()`` and are
    recorded in ``access_log`` so inductive runs can prove they never touched them.
    """

    embeddings: np.ndarray
    seen_ids: np.ndarray
    unseen_ids: np.ndarray
    access_log: list[str] = field(default_factory=list, compare=False, repr=False)

    @property
    def n_categories(self) -> int:
        return self.embeddings.shape[0]

    def seen(self) -> np.ndarray:
        return self.embeddings[self.seen_ids]

    def unseen(self) -> np.ndarray:
        self.access_log.append("unseen")
        return self.embeddings[self.unseen_ids]

    def full(self) -> np.ndarray:
        self.access_log.append("full")
        return self.embeddings

    def is_seen(self, category: int) -> bool:
        return bool(np.isin(category, self.seen_ids))


@dataclass
class ImageSample:
    vision_queries: np.ndarray      # K x D
    pred_mask_logits: np.ndarray    # K x H x W
    gt_categories: np.ndarray       # O
    gt_masks: np.ndarray            # O x H x W, bool
    segment_ids: np.ndarray         # O
    global_cls: np.ndarray          # C
    segment_cls: np.ndarray         # O x C
    query_segment: np.ndarray       # K, generating segment index per query or -1 for distractors

    @property
    def n_segments(self) -> int:
        return len(self.gt_categories)

    def segment_id_map(self) -> np.ndarray:
        out = np.zeros(self.gt_masks.shape[1:], dtype=np.int64)
        for sid, mask in zip(self.segment_ids, self.gt_masks):
            out[mask] = sid
        return out


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    table: SemanticEmbeddingTable
    train: list[ImageSample]
    test: list[ImageSample]
    category_prototypes: np.ndarray

    def digest(self) -> str:
        return dataset_digest(self)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def surrogate_cls(category_ids, table: SemanticEmbeddingTable | np.ndarray, sigma_cls: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """CLS-token surrogate: normalized mean embedding plus noise, renormalized.

    Returns ``(token, degenerate)``; ``degenerate`` is set when the mean has
    (near) zero norm, in which case the mean is not normalized.
    """
    ids = np.asarray(list(category_ids), dtype=np.int64)
    emb = table.embeddings if isinstance(table, SemanticEmbeddingTable) else np.asarray(table)
    if ids.size == 0:
        raise ValueError("surrogate_cls needs at least one category id")
    if ids.min() < 0 or ids.max() >= emb.shape[0]:
        raise ValueError(f"category ids {ids.tolist()} out of range for {emb.shape[0]} categories")
    token = emb[ids].mean(axis=0)
    norm = np.linalg.norm(token)
    degenerate = norm <= NORM_EPS
    if not degenerate:
        token = token / norm
    if sigma_cls > 0:
        token = token + rng.normal(0.0, sigma_cls, size=token.shape)
        norm = np.linalg.norm(token)
        if norm > NORM_EPS:
            token = token / norm
    return token, bool(degenerate)


def _make_table(spec: DatasetSpec) -> tuple[SemanticEmbeddingTable, np.ndarray]:
    rng = np.random.default_rng([spec.seed, _TABLE_STREAM])
    n = spec.n_categories
    prototypes = _normalize_rows(rng.normal(size=(n, spec.d_vision)))
    lift = rng.normal(size=(spec.d_vision, spec.c_semantic)) / np.sqrt(spec.d_vision)
    sem = _normalize_rows(prototypes @ lift)
    sem = _normalize_rows(sem + rng.normal(0.0, spec.sigma_semantic, size=sem.shape))
    seen_ids = np.arange(spec.n_seen)
    unseen_ids = np.arange(spec.n_seen, n)
    return SemanticEmbeddingTable(sem, seen_ids, unseen_ids), prototypes


def _place_rectangles(count: int, h: int, w: int, rng: np.random.Generator,
                      where: str, layouts: int = 20, tries: int = 50) -> list[tuple[int, int, int, int]]:
    for _ in range(layouts):
        occupied = np.zeros((h, w), dtype=bool)
        rects = []
        for _ in range(count):
            for _ in range(tries):
                rh = int(rng.integers(max(1, h // 8), h // 2 + 1))
                rw = int(rng.integers(max(1, w // 8), w // 2 + 1))
                top = int(rng.integers(0, h - rh + 1))
                left = int(rng.integers(0, w - rw + 1))
                if not occupied[top:top + rh, left:left + rw].any():
                    occupied[top:top + rh, left:left + rw] = True
                    rects.append((top, left, rh, rw))
                    break
            else:
                break
        if len(rects) == count:
            return rects
    raise GenerationError(f"could not pack {count} segments on a {h}x{w} grid for {where}")


def _mask_logits(mask: np.ndarray, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    logits = np.where(mask, spec.mask_logit, -spec.mask_logit)
    flips = rng.random(mask.shape) < spec.mask_flip_rate
    return np.where(flips, -logits, logits)


def _make_image(spec: DatasetSpec, table: SemanticEmbeddingTable, prototypes: np.ndarray,
                split: str, index: int) -> ImageSample:
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[split], index])
    h, w = spec.grid
    k = spec.k_queries
    lo, hi = spec.segments_per_image
    allowed = table.seen_ids if split == "train" else np.arange(table.n_categories)
    n_seg = int(rng.integers(lo, hi + 1))
    cats = rng.choice(allowed, size=n_seg)
    if split == "test" and index == 0:
        cats[0] = rng.choice(table.unseen_ids)
    rects = _place_rectangles(n_seg, h, w, rng, f"{split} image {index}")
    masks = np.zeros((n_seg, h, w), dtype=bool)
    for o, (top, left, rh, rw) in enumerate(rects):
        masks[o, top:top + rh, left:left + rw] = True

    slots = rng.permutation(k)
    queries = np.empty((k, spec.d_vision))
    logits = np.empty((k, h, w))
    query_segment = np.full(k, -1, dtype=np.int64)
    for o in range(n_seg):
        q = slots[o]
        queries[q] = prototypes[cats[o]] + rng.normal(0.0, spec.sigma_vision, size=spec.d_vision)
        logits[q] = _mask_logits(masks[o], spec, rng)
        query_segment[q] = o
    for q in slots[n_seg:]:
        a, b = rng.choice(allowed, size=2, replace=False)
        t = rng.uniform(0.3, 0.7)
        queries[q] = (t * prototypes[a] + (1 - t) * prototypes[b]
                      + rng.normal(0.0, spec.sigma_vision, size=spec.d_vision))
        bh = int(rng.integers(2, max(3, h // 4) + 1))
        bw = int(rng.integers(2, max(3, w // 4) + 1))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        blob = np.zeros((h, w), dtype=bool)
        blob[top:top + bh, left:left + bw] = True
        logits[q] = _mask_logits(blob, spec, rng)

    global_cls, _ = surrogate_cls(cats, table, spec.sigma_cls, rng)
    segment_cls = np.stack([surrogate_cls([c], table, spec.sigma_cls, rng)[0] for c in cats])
    return ImageSample(
        vision_queries=queries,
        pred_mask_logits=logits,
        gt_categories=cats.astype(np.int64),
        gt_masks=masks,
        segment_ids=np.arange(1, n_seg + 1, dtype=np.int64),
        global_cls=global_cls,
        segment_cls=segment_cls,
        query_segment=query_segment,
    )


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    spec.validate()
    table, prototypes = _make_table(spec)
    train = [_make_image(spec, table, prototypes, "train", i) for i in range(spec.n_train)]
    test = [_make_image(spec, table, prototypes, "test", i) for i in range(spec.n_test)]
    return SyntheticDataset(spec, table, train, test, prototypes)


# ----------------------------------------------------------------------------
# digests and persistence

_SAMPLE_FIELDS = ("vision_queries", "pred_mask_logits", "gt_categories", "gt_masks",
                  "segment_ids", "global_cls", "segment_cls", "query_segment")


def _arrays(ds: SyntheticDataset) -> dict[str, np.ndarray]:
    out = {
        "table.embeddings": ds.table.embeddings,
        "table.seen_ids": ds.table.seen_ids,
        "table.unseen_ids": ds.table.unseen_ids,
        "category_prototypes": ds.category_prototypes,
    }
    for split in ("train", "test"):
        for i, sample in enumerate(getattr(ds, split)):
            for name in _SAMPLE_FIELDS:
                out[f"{split}.{i}.{name}"] = getattr(sample, name)
    return out


def dataset_digest(ds: SyntheticDataset) -> str:
    h = hashlib.sha256()
    for name, arr in _arrays(ds).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_dataset(ds: SyntheticDataset, path: str | Path) -> Path:
    meta = {"kind": "dataset", "spec": ds.spec.to_dict(), "digest": ds.digest(),
            "n_train": len(ds.train), "n_test": len(ds.test)}
    return save_checkpoint(path, _arrays(ds), meta)


def load_dataset(path: str | Path) -> SyntheticDataset:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "dataset":
        raise ValueError(f"{path} does not hold a dataset")
    spec = DatasetSpec(**meta["spec"])
    table = SemanticEmbeddingTable(arrays["table.embeddings"],
                                   arrays["table.seen_ids"].astype(np.int64),
                                   arrays["table.unseen_ids"].astype(np.int64))
    splits = {}
    for split in ("train", "test"):
        samples = []
        for i in range(meta[f"n_{split}"]):
            fields = {name: arrays[f"{split}.{i}.{name}"] for name in _SAMPLE_FIELDS}
            for name in ("gt_categories", "segment_ids", "query_segment"):
                fields[name] = fields[name].astype(np.int64)
            fields["gt_masks"] = fields["gt_masks"].astype(bool)
            samples.append(ImageSample(**fields))
        splits[split] = samples
    ds = SyntheticDataset(spec, table, splits["train"], splits["test"], arrays["category_prototypes"])
    if ds.digest() != meta["digest"]:
        raise ValueError(f"{path}: content digest mismatch")
    return ds
