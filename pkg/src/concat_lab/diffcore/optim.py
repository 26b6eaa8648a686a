from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class Adam:
    """Adam with bias correction. ``step`` mutates the parameter tensors in place."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self, grads: dict) -> dict[str, Tensor]:
        """Apply one update.

        ``grads`` may be keyed by parameter name or by the parameter tensor
        itself (as returned by ``backward``). Parameters with no entry are
        treated as having a zero gradient.
        """
        by_name = {}
        lookup = {id(t): name for name, t in self.params.items()}
        for key, g in grads.items():
            name = lookup.get(id(key)) if isinstance(key, Tensor) else key
            if name is None or name not in self.params:
                continue
            if np.shape(g) != self.params[name].shape:
                raise ShapeError(
                    f"gradient for {name} has shape {np.shape(g)}, parameter is {self.params[name].shape}"
                )
            by_name[name] = np.asarray(g, dtype=np.float64)

        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = by_name.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - update
        return self.params


def optimizer_step(state: Adam, grads: dict) -> dict[str, Tensor]:
    return state.step(grads)
