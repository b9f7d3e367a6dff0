"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numerical_gradient(fn: Callable[[], float], params: Sequence[Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    """d fn / d p for every entry of every tensor, perturbing ``p.data`` in place."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = fn()
            flat[k] = orig - eps
            down = fn()
            flat[k] = orig
            g.reshape(-1)[k] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-12) over the concatenated gradients."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def gradient_error(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Relative error between tape and finite-difference gradients of a scalar loss.

    ``loss_fn`` must be deterministic (reseed any rng inside it).
    """
    with ad.Tape() as tape:
        loss = loss_fn()
    analytic = tape.gradient(loss, params)
    numeric = numerical_gradient(lambda: float(loss_fn().data), params, eps)
    return relative_error(analytic, numeric)
