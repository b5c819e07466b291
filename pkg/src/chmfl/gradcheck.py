"""Central finite differences for checking backward rules."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-4,
                       indices: Optional[Iterable[tuple]] = None) -> np.ndarray:
    """(f(t+h) - f(t-h)) / 2h per element of ``t``; ``f`` must return a scalar.

    ``t.data`` is temporarily replaced and restored afterwards. If ``indices``
    is given only those elements are perturbed (others stay zero).
    """
    base = t.data
    grad = np.zeros(base.shape, dtype=np.float64)
    idx_iter = indices if indices is not None else np.ndindex(base.shape)
    try:
        for idx in idx_iter:
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sign * h
                t.data = pert
                with no_grad():
                    vals.append(f().item())
            grad[idx] = (vals[0] - vals[1]) / (2 * h)
    finally:
        t.data = base
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a|| + ||n||, floor).

    The floor keeps parameters whose true gradient is zero (e.g. a bias
    followed by batch normalization) from reporting finite-difference noise
    as a large relative error.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))
