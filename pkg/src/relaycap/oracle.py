"""Slow, independent verifiers for tests: grid search, finite differences, scalar loops.

Nothing in here is used by the solver itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from .prob import _as_array

CLIP_TOL = 1e-15
MAX_CELLS = 9
MAX_RECENTRES = 100


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class CouplingGrid:
    """Couplings with the marginals of ``joint``, parametrized by the top-left block.

    Free coordinate (i, j) for i < M-1, j < N-1; the last row and column are
    determined by the marginals.
    """

    joint: np.ndarray
    step: float

    def __post_init__(self):
        joint = np.asarray(self.joint, dtype=float)
        if joint.ndim != 2 or joint.size > MAX_CELLS:
            raise OracleError(f"grid oracle limited to M*N <= {MAX_CELLS}, got shape {joint.shape}")
        if np.any(joint.sum(axis=1) <= 0) or np.any(joint.sum(axis=0) <= 0):
            raise OracleError("marginals must have full support")
        if not self.step > 0:
            raise OracleError("step must be > 0")
        object.__setattr__(self, "joint", joint)

    @property
    def p(self):
        return self.joint.sum(axis=1)

    @property
    def r(self):
        return self.joint.sum(axis=0)

    @property
    def free_coords(self) -> List[Tuple[int, int]]:
        m, n = self.joint.shape
        return [(i, j) for i in range(m - 1) for j in range(n - 1)]

    def upper_bounds(self) -> np.ndarray:
        p, r = self.p, self.r
        return np.array([min(p[i], r[j]) for i, j in self.free_coords])

    def complete(self, free: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Full couplings (batch x M x N) from free values (batch x F), plus a validity mask."""
        m, n = self.joint.shape
        free = np.atleast_2d(free)
        batch = free.shape[0]
        out = np.zeros((batch, m, n))
        out[:, : m - 1, : n - 1] = free.reshape(batch, m - 1, n - 1)
        p, r = self.p, self.r
        out[:, : m - 1, n - 1] = p[: m - 1] - out[:, : m - 1, : n - 1].sum(axis=2)
        out[:, m - 1, :] = r - out[:, : m - 1, :].sum(axis=1)
        ok = np.all(out >= -CLIP_TOL, axis=(1, 2))
        return np.maximum(out, 0.0), ok


def _mutual_info_batch(couplings, p, r):
    prod = p[:, None] * r[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(couplings > 0, couplings * np.log(couplings / prod), 0.0)
    return terms.sum(axis=(1, 2))


def _search(grid: CouplingGrid, axes, costs, budget):
    """Best (value, free point) over the product of ``axes``; chunked on the first axis."""
    best_val, best_pt = math.inf, None
    p, r = grid.p, grid.r
    rest = np.meshgrid(*axes[1:], indexing="ij") if len(axes) > 1 else []
    rest = np.column_stack([a.ravel() for a in rest]) if rest else np.zeros((1, 0))
    for a0 in axes[0]:
        free = np.column_stack([np.full(len(rest), a0), rest])
        cpl, ok = grid.complete(free)
        ok &= np.einsum("bij,ij->b", cpl, costs) <= budget
        if not np.any(ok):
            continue
        vals = np.where(ok, _mutual_info_batch(cpl, p, r), math.inf)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best_pt = float(vals[k]), free[k]
    return best_val, best_pt


def lm_rate_bruteforce(p_xz, d, step: float = 1e-3, refine: int = 2) -> float:
    """Minimum of I(X;Z) over a grid of couplings with the marginals of ``p_xz``
    and expected metric at most that of ``p_xz``, in nats.

    After the coarse pass a local pattern search runs at the coarse step and
    at ``refine`` successively tenfold finer steps. The result upper-bounds
    the LM rate.
    """
    joint, costs = _as_array(p_xz), _as_array(d)
    if joint.shape != costs.shape:
        raise OracleError("joint and metric shapes differ")
    grid = CouplingGrid(joint, step)
    budget = float(np.sum(joint * costs)) * (1 + 1e-12) + 1e-15
    ub = grid.upper_bounds()
    p, r = grid.p, grid.r
    if ub.size == 0:
        # one row or one column: the coupling is pinned to the product
        return float(_mutual_info_batch(joint[None], p, r)[0])

    # the joint itself is always feasible, so the search is never empty
    own = joint[: joint.shape[0] - 1, : joint.shape[1] - 1].ravel()
    best_val = float(_mutual_info_batch(joint[None], p, r)[0])
    best_pt = own
    axes = [np.unique(np.minimum(np.arange(0.0, u + step, step), u)) for u in ub]
    val, pt = _search(grid, axes, costs, budget)
    if val < best_val:
        best_val, best_pt = val, pt
    # pattern search: re-centre a 21-point window until the incumbent stays put,
    # then shrink the step; the coarse optimum can sit several cells away from
    # the true one along a flat stretch of the constraint boundary
    h = step
    for level in range(refine + 1):
        for _ in range(MAX_RECENTRES):
            axes = [
                np.unique(np.clip(c + np.arange(-10, 11) * h, 0.0, u)) for c, u in zip(best_pt, ub)
            ]
            val, pt = _search(grid, axes, costs, budget)
            if not val < best_val:
                break
            best_val, best_pt = val, pt
        h /= 10.0
    return best_val


def finite_diff_check(f: Callable[[float], float], df: Callable[[float], float], x: float, h: float = 1e-5) -> float:
    """Relative mismatch between df(x) and the central difference of f."""
    numeric = (f(x + h) - f(x - h)) / (2.0 * h)
    analytic = df(x)
    return abs(numeric - analytic) / (1.0 + abs(analytic))


def scalar_reference_eval(state, theta, d, lam: float):
    """Loop-by-loop J, objective and unnormalized Omega* for small instances."""
    theta, costs = _as_array(theta), _as_array(d)
    p, omega, r = state.p, state.omega, state.r
    phi, psi = state.dual.phi, state.dual.psi_tilde
    zeta = state.dual.zeta
    m, k_dim = theta.shape
    n = costs.shape[1]

    lam_phi = []
    for j in range(n):
        total = 0.0
        for i in range(m):
            total += phi[i] * math.exp(-zeta * costs[i, j])
        lam_phi.append(total)

    kl = []
    for k in range(k_dim):
        total = 0.0
        for j in range(n):
            if omega[k, j] > 0:
                total += omega[k, j] * math.log(omega[k, j] / r[j])
        kl.append(total)

    J = np.zeros(m)
    for i in range(m):
        log_j = math.log(phi[i])
        for j in range(n):
            w = 0.0
            for k in range(k_dim):
                w += theta[i, k] * omega[k, j]
            log_j += w * (-lam_phi[j] * psi[j] + math.log(psi[j]))
            log_j -= zeta * w * costs[i, j]
        for k in range(k_dim):
            log_j -= lam * theta[i, k] * kl[k]
        J[i] = math.exp(log_j)

    objective = 1.0
    for i in range(m):
        if p[i] > 0:
            objective += -p[i] * math.log(p[i]) + p[i] * math.log(J[i])

    star = np.zeros((k_dim, n))
    for k in range(k_dim):
        q = 0.0
        for i in range(m):
            q += p[i] * theta[i, k]
        for j in range(n):
            avg = 0.0
            for i in range(m):
                avg += p[i] * theta[i, k] * costs[i, j]
            star[k, j] = (
                r[j]
                * psi[j] ** (1.0 / lam)
                * math.exp(-lam_phi[j] * psi[j] / lam)
                * math.exp(-(zeta / lam) * avg / q)
            )
    return J, objective, star
