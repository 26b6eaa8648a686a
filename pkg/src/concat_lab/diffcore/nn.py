"""Parameter containers: affine layers, batch normalization, module trees."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Module:
    """Named tree of parameters (trainable) and buffers (running statistics)."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own(self, kind: type) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, kind) and not isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + name: t for name, t in self._own(Tensor)}
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: b for name, b in self._own(np.ndarray)}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.named_parameters(prefix).items()}
        state.update(self.named_buffers(prefix))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters(prefix)
        buffers = self.named_buffers(prefix)
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks entries: {sorted(missing)}")
        for key, t in params.items():
            if state[key].shape != t.shape:
                raise ValueError(f"{key}: checkpoint shape {state[key].shape} != {t.shape}")
            t.data = np.array(state[key], dtype=np.float64)
        for key, buf in buffers.items():
            buf[...] = state[key]

    def requires_grad_(self, flag: bool) -> "Module":
        for t in self.named_parameters().values():
            t.requires_grad = flag
        return self

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ops.affine(x, self.weight, self.bias)


class BatchNorm1d(Module):
    """Batch statistics in training mode; batches smaller than 2 fall back to running stats."""

    def __init__(self, n_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.gamma = Tensor(np.ones(n_features), requires_grad=True)
        self.beta = Tensor(np.zeros(n_features), requires_grad=True)
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x) -> Tensor:
        x = ops.as_tensor(x)
        if not self.training or x.shape[0] < 2:
            return ops.batch_norm(x, self.gamma, self.beta, self.eps,
                                  mean=self.running_mean, var=self.running_var)
        out = ops.batch_norm(x, self.gamma, self.beta, self.eps)
        n = x.shape[0]
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * x.data.mean(axis=0)
        self.running_var[...] = (1 - m) * self.running_var + m * x.data.var(axis=0) * n / (n - 1)
        return out


class Block(Module):
    """affine -> batch norm -> leaky rectifier"""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(n_in, n_out, rng)
        self.norm = BatchNorm1d(n_out)

    def __call__(self, x) -> Tensor:
        return ops.leaky_relu(self.norm(self.linear(x)))
