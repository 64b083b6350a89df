"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps coordinates whose true gradient is ~0 from dividing
    rounding noise by rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                   coords: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``t.data`` (in place perturbation).

    With ``coords`` only those entries are probed and a 1-D array returned.
    """
    flat_coords = list(np.ndindex(*t.shape)) if coords is None else list(coords)
    out = np.zeros(len(flat_coords), dtype=np.float64)
    with no_grad():
        for k, idx in enumerate(flat_coords):
            orig = t.data[idx].copy()
            t.data[idx] = orig + eps
            fp = float(fn().data.sum())
            t.data[idx] = orig - eps
            fm = float(fn().data.sum())
            t.data[idx] = orig
            out[k] = (fp - fm) / (2.0 * eps)
    return out.reshape(t.shape) if coords is None else out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                    floor: float = 1e-5, coords: int | None = None, seed: int = 0) -> float:
    """Return the worst relative error between backward() and finite differences.

    ``fn`` must rebuild the scalar output from ``inputs`` on every call.
    With ``coords`` set, only that many randomly chosen entries per input are probed.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        if coords is None or coords >= t.size:
            numeric = numerical_grad(fn, t, eps)
        else:
            picks = rng.choice(t.size, size=coords, replace=False)
            idx = [np.unravel_index(int(i), t.shape) for i in picks]
            numeric = numerical_grad(fn, t, eps, idx)
            analytic = np.array([analytic[i] for i in idx])
        worst = max(worst, float(relative_error(analytic, numeric, floor).max()))
    return worst


def random_projection(shape: tuple[int, ...], seed: int = 0, unit: bool = False) -> np.ndarray:
    """Fixed random weights that turn a tensor output into a generic scalar.

    ``unit`` rescales to unit Frobenius norm, which keeps the projected scalar
    O(1) for large outputs so difference roundoff stays small.
    """
    p = np.random.default_rng(seed).standard_normal(shape)
    return p / np.linalg.norm(p) if unit else p
