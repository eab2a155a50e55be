"""Central finite-difference gradient checker shared by the test modules."""

from __future__ import annotations

import numpy as np

from truncpose import tensor as T
from truncpose.tensor import Tensor

STEP = 1e-5
# Entries whose true derivative is ~0 are compared absolutely below this
# floor; central differences carry ~eps*|L|/STEP ~ 1e-10 of roundoff.
FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _coords(shape, rng, max_coords):
    n = int(np.prod(shape))
    if max_coords is None or n <= max_coords:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_coords, replace=False))


def gradcheck(fn, inputs, rng: np.random.Generator, params=(), max_coords: int | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps Tensors built from ``inputs`` to an output Tensor; the scalar
    under test is ``sum(out * R)`` for a fixed random ``R``, so every output
    entry contributes. ``params`` are extra leaf Tensors (e.g. module
    weights) that ``fn`` closes over; they are perturbed in place.
    ``max_coords`` limits the number of perturbed entries per tensor.
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    params = list(params)
    for p in params:
        p.grad = None
    out = fn(*leaves)
    weights = rng.standard_normal(out.shape)
    T.backward(T.sum(T.mul_const(out, weights)))

    def scalar():
        with T.no_grad():
            return float(np.sum(fn(*leaves).data * weights))

    worst = 0.0
    for t in leaves + params:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        idx = _coords(t.shape, rng, max_coords)
        flat = t.data.reshape(-1)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + STEP
            up = scalar()
            flat[i] = keep - STEP
            down = scalar()
            flat[i] = keep
            numeric[j] = (up - down) / (2 * STEP)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric))
    return worst


def uniform(rng: np.random.Generator, *shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)
