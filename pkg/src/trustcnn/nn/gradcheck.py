"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .autodiff import AutodiffError, Tape, Tensor, backward


def analytic_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(point, copy=True), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    if out.data.size != 1:
        raise AutodiffError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if out not in tape:
        return np.zeros_like(x.data)
    (g,) = backward(tape, out, [x], accumulate=False)
    return g.data


def numeric_grad(
    fn: Callable[[Tensor], Tensor], point: np.ndarray, eps: float, dtype: Optional[np.dtype] = None
) -> np.ndarray:
    x = np.array(point, dtype=dtype or point.dtype, copy=True)
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn(Tensor(x)).data.reshape(-1)[0])
        flat[i] = orig - eps
        down = float(fn(Tensor(x)).data.reshape(-1)[0])
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-3,
    oracle_dtype: Optional[np.dtype] = None,
) -> float:
    """Max elementwise relative error between the tape gradient and central differences.

    `oracle_dtype` lets the finite-difference side run at a wider precision
    than the point itself; by default it uses the point's dtype.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.asarray(point.data if isinstance(point, Tensor) else point)
    if point.dtype not in (np.float32, np.float64):
        point = point.astype(np.float32)
    a = analytic_grad(fn, point)
    n = numeric_grad(fn, point, eps, oracle_dtype)
    return relative_error(a, n)
