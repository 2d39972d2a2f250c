"""Central finite differences, the oracle for every analytic gradient."""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value).reshape(()))


def finite_diff_grad(f: Callable[[Tensor], object], at: Tensor, h: float = 1e-5,
                     indices: Optional[Iterable[int]] = None, order: int = 2) -> np.ndarray:
    """Estimate ``d f(at) / d at`` with central differences.

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation error
    allows a larger ``h`` and therefore less rounding noise on entries
    where the gradient is tiny compared with the loss.

    ``at`` is perturbed in place and restored afterwards, so ``f`` may close
    over a model that owns ``at``. When ``indices`` (flat positions) is
    given, only those entries are estimated and the rest of the result is
    NaN.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    flat = at.data.reshape(-1)

    def probe(i, value):
        flat[i] = value
        return _scalar(f(at))

    grad = np.full(flat.shape, np.nan if indices is not None else 0.0, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        try:
            if order == 2:
                grad[i] = (probe(i, orig + h) - probe(i, orig - h)) / (2 * h)
            else:
                grad[i] = (8 * (probe(i, orig + h) - probe(i, orig - h))
                           - (probe(i, orig + 2 * h) - probe(i, orig - 2 * h))) / (12 * h)
        finally:
            flat[i] = orig
    return grad.reshape(at.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over entries where ``numeric`` is defined.

    The floor keeps entries whose true gradient is ~0 from turning
    floating-point noise into huge ratios.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
