"""Differentiable primitives.

Each primitive computes its forward value with numpy, checks that the
result is finite, and hands a vector-Jacobian closure to the tape.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, ParameterError
from .tensor import Tensor, as_tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), vjp, "mul")


def matmul(a, b) -> Tensor:
    """``A[..., m, k] @ B[k, n]`` or batched ``A[..., m, k] @ B[..., k, n]``.

    A 2-D right operand is shared across all leading axes of ``A`` (a
    weight matrix); otherwise leading axes must agree exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result(ad @ bd, (a, b), vjp, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape [in, out]; fused for speed."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear expects last extent {w.shape[0]}, got {x.shape}")
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        inputs = (x, w, b)
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, inputs, vjp, "linear")


def softmax_last(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax_last needs a non-empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), vjp, "softmax_last")


def log_softmax_last(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def vjp(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make_result(y, (x,), vjp, "log_softmax_last")


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then
    optionally scale by ``gamma`` and shift by ``beta`` (both [d])."""
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x = as_tensor(x)
    d = x.shape[-1]
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    inputs: list[Tensor] = [x]
    out = xhat
    gd = None
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (d,):
            raise DimensionError(f"gamma must have shape ({d},), got {gamma.shape}")
        gd = gamma.data
        out = out * gd
        inputs.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (d,):
            raise DimensionError(f"beta must have shape ({d},), got {beta.shape}")
        out = out + beta.data
        inputs.append(beta)

    def vjp(g):
        gh = g * gd if gd is not None else g
        gx = None
        if x.requires_grad:
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            res.append(g.reshape(-1, d).sum(axis=0))
        return res

    return make_result(out, inputs, vjp, "layer_norm")


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    # in-place chains: temporaries dominate the cost on large activations
    th = xd * xd
    th *= _GELU_K
    th += 1.0
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    y = th + 1.0
    y *= xd
    y *= 0.5

    def vjp(g):
        d = th * th
        np.subtract(1.0, d, out=d)
        poly = xd * xd
        poly *= 3.0 * _GELU_K
        poly += 1.0
        poly *= _GELU_C
        d *= poly
        d *= xd
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return make_result(y, (x,), vjp, "gelu")


def transpose_time_space(z) -> Tensor:
    """Swap the frame and patch axes: [..., F, P, D] -> [..., P, F, D]."""
    z = as_tensor(z)
    if z.ndim < 3:
        raise DimensionError(f"transpose_time_space needs rank >= 3, got shape {z.shape}")

    def vjp(g):
        return (np.swapaxes(g, -3, -2),)

    return make_result(np.swapaxes(z.data, -3, -2), (z,), vjp, "transpose_time_space")


def permute(x, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return make_result(np.transpose(x.data, axes), (x,), vjp, "permute")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def vjp(g):
        return (g.reshape(src),)

    return make_result(x.data.reshape(shape), (x,), vjp, "reshape")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def vjp(g):
        return (np.broadcast_to(g, src),)

    return make_result(np.asarray(x.data.sum()), (x,), vjp, "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    src, n = x.shape, x.size

    def vjp(g):
        return (np.broadcast_to(g / n, src),)

    return make_result(np.asarray(x.data.mean()), (x,), vjp, "mean")


def mse(pred, target) -> Tensor:
    """Mean over all elements of ``(pred - target)**2``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse operands differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return make_result(np.asarray((diff * diff).mean()), (pred, target), vjp, "mse")


def take_rows(table, idx) -> Tensor:
    """Gather rows ``table[idx]``; gradient scatters back with accumulation."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ParameterError(f"row index out of range for table of {table.shape[0]} rows")
    src = table.shape

    def vjp(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return make_result(table.data[idx], (table,), vjp, "take_rows")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return make_result(np.asarray(loss), (logits,), vjp, "cross_entropy")


def modulate(x, shift, scale) -> Tensor:
    """Adaptive affine ``x * (1 + scale) + shift`` with broadcast modulation."""
    x, shift, scale = as_tensor(x), as_tensor(shift), as_tensor(scale)
    xd, sd = x.data, scale.data
    factor = 1.0 + sd

    def vjp(g):
        gx = g * factor if x.requires_grad else None
        gs = _unbroadcast(g * xd, sd.shape) if scale.requires_grad else None
        gsh = _unbroadcast(g, shift.shape) if shift.requires_grad else None
        return gx, gsh, gs

    return make_result(xd * factor + shift.data, (x, shift, scale), vjp, "modulate")


def gated_residual(x, gate, branch) -> Tensor:
    """``x + gate * branch`` with ``gate`` broadcast over ``branch``."""
    x, gate, branch = as_tensor(x), as_tensor(gate), as_tensor(branch)
    gd, bd = gate.data, branch.data

    def vjp(g):
        gg = _unbroadcast(g * bd, gd.shape) if gate.requires_grad else None
        gb = _unbroadcast(g * gd, bd.shape) if branch.requires_grad else None
        return g, gg, gb

    return make_result(x.data + gd * bd, (x, gate, branch), vjp, "gated_residual")
