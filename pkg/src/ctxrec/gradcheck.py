"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def rel_err(a: np.ndarray, n: np.ndarray, atol_scale: float = 1e-4) -> float:
    """Worst-element relative error with an absolute floor in the denominator.

    Central differences carry ~1e-12 absolute noise at h=1e-5, so elements
    whose true gradient sits at that floor would dominate a bare relative
    metric; the floor keeps the check sensitive at meaningful magnitudes.
    """
    denom = np.abs(a) + np.abs(n) + atol_scale
    return float(np.max(np.abs(a - n) / denom))


def check_scalar_fn(fn: Callable[[], Tensor], leaves: Sequence[Tensor],
                    h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    `fn` must rebuild the graph from the leaves' current .data on every call;
    any randomness inside must be identical across calls.
    """
    ad.zero_grads(leaves)
    loss = fn()
    ad.backward(loss)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]

    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            num[i] = (up - down) / (2 * h)
        worst = max(worst, rel_err(ana.reshape(-1), num))
    return worst
