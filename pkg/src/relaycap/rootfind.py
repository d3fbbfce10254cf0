"""Safeguarded Newton iteration for monotone non-increasing scalar functions."""

from __future__ import annotations

import math
from typing import Callable, Tuple


class RootNotBracketed(RuntimeError):
    pass


def expand_upper(f: Callable[[float], float], start: float, limit: float) -> float:
    """Double ``start`` until f drops to <= 0; raise past ``limit``."""
    x = max(start, 1e-12)
    while True:
        if f(x) <= 0:
            return x
        if x >= limit:
            raise RootNotBracketed(f"no sign change up to {limit:g}")
        x = min(2.0 * x, limit)


def newton_decreasing(
    fdf: Callable[[float], Tuple[float, float]],
    lo: float,
    hi: float,
    x0: float,
    tol: float,
    maxiter: int = 200,
) -> float:
    """Root of a non-increasing f inside [lo, hi] with f(lo) > 0 >= f(hi).

    Newton steps that leave the bracket, or any non-finite evaluation, fall back
    to bisection. Returns the first x with |f(x)| <= tol, or the best point seen
    once the bracket cannot shrink further.
    """
    x = x0 if lo <= x0 <= hi else 0.5 * (lo + hi)
    best_x, best_f = x, math.inf
    for _ in range(maxiter):
        f, df = fdf(x)
        if math.isfinite(f) and abs(f) < best_f:
            best_x, best_f = x, abs(f)
        if math.isfinite(f) and abs(f) <= tol:
            return x
        if not math.isfinite(f) or f > 0:
            lo = max(lo, x)
        else:
            hi = min(hi, x)
        if hi - lo <= 4 * math.ulp(max(hi, 1e-300)):
            break
        step_ok = math.isfinite(f) and math.isfinite(df) and df < 0
        if step_ok:
            xn = x - f / df
            step_ok = lo < xn < hi
        x = xn if step_ok else 0.5 * (lo + hi)
    return best_x
