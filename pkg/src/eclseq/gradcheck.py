"""Central finite-difference checks against the reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, no_grad


def _scalarize(out, weights):
    if out.size == 1:
        return ops.sum(out)
    return ops.sum(ops.mul(out, Tensor(weights)))


def numeric_grads(fn, arrays, weights=None, eps=1e-5, wrt=None):
    """Central differences of ``sum(fn(*arrays) * weights)`` for each array in ``wrt``."""
    wrt = range(len(arrays)) if wrt is None else wrt
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = {}

    def value():
        with no_grad():
            return float(_scalarize(fn(*[Tensor(a) for a in arrays]), weights).data)

    for i in wrt:
        g = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = value()
            flat[j] = orig - eps
            down = value()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * eps)
        grads[i] = g
    return grads


def analytic_grads(fn, arrays, weights=None, wrt=None):
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    _scalarize(fn(*tensors), weights).backward()
    return {i: (tensors[i].grad if tensors[i].grad is not None else np.zeros_like(tensors[i].data))
            for i in wrt}


def relative_error(a, b, floor=1e-6):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check(fn, arrays, rng=None, eps=1e-5, wrt=None):
    """Worst relative error between analytic and numeric gradients over ``wrt``.

    Non-scalar outputs are contracted with a fixed random weight tensor first.
    """
    rng = rng or np.random.default_rng(0)
    with no_grad():
        probe = fn(*[Tensor(np.asarray(a, dtype=np.float64)) for a in arrays])
    weights = rng.normal(size=probe.shape)
    num = numeric_grads(fn, arrays, weights, eps, wrt)
    ana = analytic_grads(fn, arrays, weights, wrt)
    return max(relative_error(ana[i], num[i]) for i in num)
