"""Shared finite-difference comparison used by several test modules."""

import numpy as np

from sgfuse import autodiff as ad
from sgfuse.oracle import finite_diff_grad


def max_rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_grads(loss_fn, params, h=1e-5):
    """Worst relative error between tape gradients and central differences, per parameter."""
    ad.backward(loss_fn(), params)
    analytic = [p.grad.copy() for p in params]
    numeric = finite_diff_grad(lambda: float(loss_fn().data), [p.data for p in params], h)
    return [max_rel_error(a, n) for a, n in zip(analytic, numeric)]
