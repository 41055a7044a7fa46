"""Shared test oracles.

The finite-difference checker here is intentionally independent of the
autodiff engine's backward pass: it only calls forward evaluations.
"""

from __future__ import annotations

import numpy as np

from bicon.tensor import Tensor, backward


def central_diff(f, arrays, h=1e-6):
    """Central finite-difference gradients of scalar f(*arrays).

    Returns one gradient array per input, same shapes.
    """
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def autodiff_grads(build, arrays):
    """Analytic gradients of a scalar-valued graph.

    ``build`` maps leaf Tensors to a scalar loss Tensor.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    backward(loss, leaves=leaves)
    return [leaf.grad for leaf in leaves]


def max_rel_err(a, b, floor=1e-10):
    """Elementwise |a-b| / max(|a|,|b|), treating near-zero pairs as equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    err = np.abs(a - b)
    rel = np.where(denom < floor, 0.0, err / np.maximum(denom, floor))
    return float(rel.max()) if rel.size else 0.0
