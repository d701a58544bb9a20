"""Central finite-difference gradient checks (test oracle)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, no_record


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``t`` (mutated in place)."""
    g = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_record():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(fn().data)
            flat[i] = old - eps
            down = float(fn().data)
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
    return g


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def max_rel_error(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
                  floor: float = 1e-6) -> float:
    worst = 0.0
    for p, ga in zip(params, analytic_grads(fn, params)):
        gn = numeric_grad(fn, p, eps)
        worst = max(worst, float(rel_error(ga, gn, floor).max(initial=0.0)))
    return worst
