"""Semantic projector and conditional VAE query generator."""
from __future__ import annotations

import numpy as np

from .datagen import SemanticEmbeddingTable
from .diffcore import Block, Linear, Module, ops
from .diffcore.tensor import ShapeError, Tensor, as_tensor


class SemanticProjector(Module):
    """Two affine layers with a leaky rectifier between them: R^D -> R^C."""

    def __init__(self, d_vision: int, c_semantic: int, rng: np.random.Generator,
                 hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_vision
        self.d_vision, self.c_semantic = d_vision, c_semantic
        self.fc1 = Linear(d_vision, hidden, rng)
        self.fc2 = Linear(hidden, c_semantic, rng)

    def __call__(self, V) -> Tensor:
        V = as_tensor(V)
        if V.ndim != 2 or V.shape[1] != self.d_vision:
            raise ShapeError(f"projector expects (n, {self.d_vision}) queries, got {V.shape}")
        return self.fc2(ops.leaky_relu(self.fc1(V)))


class Encoder(Module):
    def __init__(self, d_in: int, latent: int, hidden: int, rng: np.random.Generator, depth: int = 4):
        super().__init__()
        dims = [d_in] + [hidden] * depth
        self.blocks = [Block(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.mu = Linear(hidden, latent, rng)
        self.logvar = Linear(hidden, latent, rng)

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        h = as_tensor(x)
        for block in self.blocks:
            h = block(h)
        return self.mu(h), self.logvar(h)


class Decoder(Module):
    def __init__(self, latent: int, d_out: int, hidden: int, rng: np.random.Generator, depth: int = 4):
        super().__init__()
        dims = [latent] + [hidden] * depth
        self.blocks = [Block(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(hidden, d_out, rng)

    def __call__(self, z) -> Tensor:
        h = as_tensor(z)
        for block in self.blocks:
            h = block(h)
        return self.out(h)


class Generator(Module):
    """CVAE whose latent has the semantic dimension; the condition is added to the latent.

    ``condition_gain`` scales the (unit-norm) condition before the addition.
    """

    def __init__(self, d_vision: int, c_semantic: int, rng: np.random.Generator,
                 hidden: int | None = None, condition_gain: float | None = None):
        super().__init__()
        hidden = hidden or max(d_vision, c_semantic)
        self.d_vision, self.c_semantic = d_vision, c_semantic
        self.condition_gain = float(np.sqrt(c_semantic) if condition_gain is None else condition_gain)
        self.encoder = Encoder(d_vision, c_semantic, hidden, rng)
        self.decoder = Decoder(c_semantic, d_vision, hidden, rng)


def project(V, projector: SemanticProjector) -> Tensor:
    return projector(V)


def cvae_encode(V_matched, generator: Generator) -> tuple[Tensor, Tensor]:
    V_matched = as_tensor(V_matched)
    if V_matched.ndim != 2 or V_matched.shape[1] != generator.d_vision:
        raise ShapeError(f"encoder expects (n, {generator.d_vision}) queries, got {V_matched.shape}")
    return generator.encoder(V_matched)


def reparameterize(mu, logvar, eps) -> Tensor:
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape}")
    return mu + ops.exp(logvar * 0.5) * eps


def cvae_decode(Z, conditions, generator: Generator) -> Tensor:
    Z = as_tensor(Z)
    conditions = np.asarray(conditions, dtype=np.float64)
    if Z.ndim != 2 or Z.shape != conditions.shape or Z.shape[1] != generator.c_semantic:
        raise ShapeError(f"cvae_decode: latent {Z.shape} vs conditions {conditions.shape}")
    return generator.decoder(Z + generator.condition_gain * conditions)


def sample_pseudo_unseen(table: SemanticEmbeddingTable, count: int, generator: Generator,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Decode ``count`` pseudo vision queries for randomly drawn unseen categories.

    Labels index the full embedding table. The generator is run in eval mode
    and nothing here is differentiated.
    """
    unseen_ids = np.asarray(table.unseen_ids)
    if unseen_ids.size == 0:
        raise ValueError("sample_pseudo_unseen needs a non-empty unseen set")
    if count == 0:
        return np.zeros((0, generator.d_vision)), np.zeros(0, dtype=np.int64)
    emb = table.unseen()
    pick = rng.integers(0, unseen_ids.size, size=count)
    z = rng.standard_normal((count, generator.c_semantic))
    was_training = generator.training
    generator.eval()
    try:
        out = cvae_decode(Tensor(z), emb[pick], generator).data.copy()
    finally:
        generator.train(was_training)
    return out, unseen_ids[pick].astype(np.int64)


def decode_condition(generator: Generator, embeddings: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Eval-mode decode of explicit latents/conditions (no graph)."""
    was_training = generator.training
    generator.eval()
    try:
        return cvae_decode(Tensor(z), embeddings, generator).data.copy()
    finally:
        generator.train(was_training)
