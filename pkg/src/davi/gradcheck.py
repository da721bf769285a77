"""Central finite-difference gradient checks (float64 only)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-5
RTOL = 1e-4
ATOL = 1e-7


def close(analytic: float, numeric: float, rtol: float = RTOL, atol: float = ATOL) -> bool:
    """Relative error below ``rtol``, or absolute error below the ``atol`` floor."""
    err = abs(analytic - numeric)
    return err <= atol or err <= rtol * max(abs(analytic), abs(numeric))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, index, eps: float = EPS) -> float:
    old = x.data[index]
    x.data[index] = old + eps
    fp = f().item()
    x.data[index] = old - eps
    fm = f().item()
    x.data[index] = old
    return (fp - fm) / (2 * eps)


def directional_numeric(f: Callable[[], Tensor], x: Tensor, direction: np.ndarray, eps: float = EPS) -> float:
    old = x.data.copy()
    x.data = old + eps * direction
    fp = f().item()
    x.data = old - eps * direction
    fm = f().item()
    x.data = old
    return (fp - fm) / (2 * eps)


def analytic_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in inputs:
        x.grad = None
    T.backward(f())
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]


def check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator | None = None,
    max_coords: int | None = None,
    eps: float = EPS,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> list[str]:
    """Compare backward() against central differences; return failure messages.

    Every coordinate is probed unless ``max_coords`` limits it, in which case
    a random subset is taken plus one random-direction probe covering the
    whole tensor.
    """
    if T.get_default_dtype() is not np.float64:
        raise RuntimeError("gradient checks need float64 mode")
    rng = rng or np.random.default_rng(0)
    grads = analytic_grads(f, inputs)
    failures = []
    for k, (x, g) in enumerate(zip(inputs, grads)):
        label = x.name or f"input{k}"
        if max_coords is None or x.size <= max_coords:
            coords = list(np.ndindex(x.shape))
        else:
            flat = rng.choice(x.size, size=max_coords, replace=False)
            coords = [np.unravel_index(i, x.shape) for i in flat]
            d = rng.standard_normal(x.shape)
            num = directional_numeric(f, x, d, eps)
            ana = float((g * d).sum())
            if not close(ana, num, rtol, atol):
                failures.append(f"{label} direction: analytic {ana:.10g} vs numeric {num:.10g}")
        for idx in coords:
            num = numeric_grad(f, x, idx, eps)
            if not close(float(g[idx]), num, rtol, atol):
                failures.append(f"{label}{list(idx)}: analytic {g[idx]:.10g} vs numeric {num:.10g}")
    return failures
