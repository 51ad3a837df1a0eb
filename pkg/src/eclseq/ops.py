"""Differentiable ops over :class:`~eclseq.tensor.Tensor`.

Shape rules:

* ``add``/``sub``/``mul``/``div`` accept equal shapes or numpy broadcasting of
  either operand; gradients are summed back to each operand's shape.
* ``matmul`` contracts the last axis of ``a`` with the second-to-last of ``b``.
  Leading (batch) axes must match exactly, or ``b`` may be a plain 2-D matrix
  shared across the batch.
* Reductions and normalizations act on the last axis unless an ``axis`` is given.

Any violation raises :class:`~eclseq.tensor.ShapeError` naming the op.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node

NEG_INF = -1e9  # additive attention mask; exp() of it underflows to exactly 0


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_node(ad @ bd, (a, b), backward, "matmul")


def transpose(x, axis1=-1, axis2=-2):
    def backward(g):
        return (np.ascontiguousarray(np.swapaxes(g, axis1, axis2)),)

    return make_node(np.ascontiguousarray(np.swapaxes(x.data, axis1, axis2)), (x,), backward, "transpose")


def reshape(x, shape):
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None

    def backward(g):
        return (g.reshape(src),)

    return make_node(out, (x,), backward, "reshape")


def embedding(weight, index, padding_idx=None):
    """Row gather ``weight[index]``; rows equal to ``padding_idx`` get no gradient."""
    index = np.asarray(index, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, index.shape, detail="weight must be 2-D")
    if index.size and (index.min() < 0 or index.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, index.shape, detail="index out of range")
    n_rows = weight.shape[0]

    def backward(g):
        gw = np.zeros((n_rows, g.shape[-1]))
        np.add.at(gw, index.reshape(-1), g.reshape(-1, g.shape[-1]))
        if padding_idx is not None:
            gw[padding_idx] = 0.0
        return (gw,)

    return make_node(weight.data[index], (weight,), backward, "embedding")


def take(x, index):
    """Numpy-style basic/advanced indexing ``x[index]`` with scatter-add backward."""
    src = x.shape
    try:
        out = x.data[index]
    except IndexError:
        raise ShapeError("take", src, detail=f"bad index {index!r}") from None
    out = np.array(out, dtype=np.float64)  # copy; keeps 0-d results 0-d

    def backward(g):
        gx = np.zeros(src)
        np.add.at(gx, index, g)
        return (gx,)

    return make_node(out, (x,), backward, "take")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def sum(x, axis=None, keepdims=False):  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    src = x.shape
    n = x.data.size if axis is None else np.prod([src[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return make_node(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward, "mean")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_node(out, (x,), backward, "exp")


def log(x):
    xd = x.data

    def backward(g):
        return (g / xd,)

    return make_node(np.log(xd), (x,), backward, "log")


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), backward, "sigmoid")


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return make_node(out, (x,), backward, "tanh")


def relu(x):
    keep = x.data > 0

    def backward(g):
        return (g * keep,)

    return make_node(x.data * keep, (x,), backward, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_node(out, (x,), backward, "gelu")


def clip(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return make_node(np.clip(x.data, lo, hi), (x,), backward, "clip")


def where(cond, x, fill):
    """``x`` where ``cond`` holds, constant ``fill`` elsewhere. ``cond`` carries no gradient."""
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), x.shape)

    def backward(g):
        return (g * cond,)

    return make_node(np.where(cond, x.data, fill), (x,), backward, "where")


def softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")


def layer_norm(x, gamma=None, beta=None, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then apply the affine pair."""
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm", x.shape, p.shape, detail="affine params must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx_hat = g * gd if gd is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=lead))
        if beta is not None:
            res.append(g.sum(axis=lead))
        return tuple(res)

    return make_node(out, parents, backward, "layer_norm")


def dropout(x, mask):
    """Multiply by a precomputed inverted-dropout mask (entries 0 or 1/keep)."""
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ShapeError("dropout", x.shape, mask.shape)

    def backward(g):
        return (g * mask,)

    return make_node(x.data * mask, (x,), backward, "dropout")


def dropout_mask(rng, shape, rate):
    """Inverted-dropout mask: zero with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


_NORM_EPS = 1e-12


def normalize(x):
    """Scale each last-axis vector to unit L2 norm."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = np.maximum(n, _NORM_EPS)
    y = x.data / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return make_node(y, (x,), backward, "normalize")


def cosine_similarity(a, b):
    """Row-wise cosine along the last axis; output drops that axis."""
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    ad, bd = a.data, b.data
    na = np.maximum(np.sqrt((ad * ad).sum(axis=-1)), _NORM_EPS)
    nb = np.maximum(np.sqrt((bd * bd).sum(axis=-1)), _NORM_EPS)
    dot = (ad * bd).sum(axis=-1)
    out = dot / (na * nb)

    def backward(g):
        gg = g[..., None]
        c = out[..., None]
        ga = gg * (bd / (na * nb)[..., None] - c * ad / (na * na)[..., None])
        gb = gg * (ad / (na * nb)[..., None] - c * bd / (nb * nb)[..., None])
        return ga, gb

    return make_node(out, (a, b), backward, "cosine_similarity")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out
