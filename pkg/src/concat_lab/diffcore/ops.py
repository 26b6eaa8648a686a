"""Differentiable primitives.

Every op takes tensors or array-likes and returns a new ``Tensor``. Backward
closures return one adjoint per parent (``None`` where not needed).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node

LEAKY_SLOPE = 0.01


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or not a.shape or not b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make_node(out, (a,), bw, "power")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for x (n, in), weight (in, out), bias (out,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not fit weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} does not fit weight {weight.shape}")

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_node(x.data @ weight.data + bias.data, (x, weight, bias), bw, "affine")


def batch_norm(x, gamma, beta, eps: float = 1e-5, mean=None, var=None) -> Tensor:
    """Normalize the columns of x (n, f).

    With ``mean``/``var`` given (running statistics) the op is a fixed affine
    map of x; otherwise batch statistics are used and differentiated through.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    if mean is not None:
        inv = 1.0 / np.sqrt(np.maximum(var, 0.0) + eps)
        xhat = (x.data - mean) * inv

        def bw_fixed(g):
            gx = g * gamma.data * inv if x.requires_grad else None
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return make_node(xhat * gamma.data + beta.data, (x, gamma, beta), bw_fixed, "batch_norm")

    n = x.shape[0]
    mu = x.data.mean(axis=0)
    centered = x.data - mu
    batch_var = (centered ** 2).mean(axis=0)
    inv = 1.0 / np.sqrt(batch_var + eps)
    xhat = centered * inv

    def bw(g):
        gxhat = g * gamma.data
        gx = None
        if x.requires_grad:
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_node(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "batch_norm")


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)

    def bw(g):
        return (g * scale,)

    return make_node(x.data * scale, (x,), bw, "leaky_relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), bw, "sigmoid")


def softplus(x) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    x = as_tensor(x)
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * z)),)

    return make_node(out, (x,), bw, "softplus")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    weights = e / s

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * weights,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return make_node(out, (x,), bw, "logsumexp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        from .tensor import NumericError
        raise NumericError("log of a non-positive value")

    def bw(g):
        return (g / x.data,)

    return make_node(np.log(x.data), (x,), bw, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return make_node(out, (x,), bw, "exp")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return make_node(np.clip(x.data, lo, hi), (x,), bw, "clip")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit norm; rows with norm <= eps pass through unchanged."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    safe = norm > eps
    denom = np.where(safe, norm, 1.0)
    out = x.data / denom

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        gx = np.where(safe, (g - out * proj) / denom, g)
        return (gx,)

    return make_node(out, (x,), bw, "l2_normalize")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), bw, "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def bw(g):
        return (g.T,)

    return make_node(x.data.T.copy(), (x,), bw, "transpose")


def index(x, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate adjoints."""
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_node(np.array(out, dtype=np.float64), (x,), bw, "index")


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)
