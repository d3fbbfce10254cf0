"""Optimal-transport dual of the LM rate.

The dual potentials are kept in the log domain: with squared-distance metrics
on wide grids exp(-zeta * D) underflows for whole columns, which would make
psi_tilde = 1 / (Lambda^T phi) overflow in linear arithmetic.

Quantities used throughout:

* ``p``  -- X-marginal of the joint, length M
* ``r``  -- Z-marginal, length N
* ``costs`` -- metric matrix D (M x N)
* ``expected_cost`` -- E_{P_XZ}[d], the right-hand side of the metric constraint
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.optimize import brentq

from .prob import LOG_FLOOR, ProbabilityError, _as_array, entropy, logsumexp
from .rootfind import RootNotBracketed, expand_upper, newton_decreasing

ZETA_LIMIT = 1e6


class DualError(ArithmeticError):
    pass


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _exp(x):
    with np.errstate(over="ignore"):
        return np.exp(x)


@dataclass(frozen=True)
class DualState:
    """Dual potentials (log phi, log psi_tilde), metric multiplier zeta, cached kernel."""

    log_phi: np.ndarray
    log_psi_tilde: np.ndarray
    zeta: float
    kernel: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, log_phi, log_psi_tilde, zeta, costs) -> "DualState":
        costs = _as_array(costs)
        if zeta < 0 or not math.isfinite(zeta):
            raise DualError(f"zeta must be finite and >= 0, got {zeta!r}")
        log_phi = np.asarray(log_phi, dtype=float)
        log_psi_tilde = np.asarray(log_psi_tilde, dtype=float)
        if log_phi.shape != (costs.shape[0],) or log_psi_tilde.shape != (costs.shape[1],):
            raise ProbabilityError("dual potential lengths do not match metric shape")
        return cls(log_phi, log_psi_tilde, float(zeta), np.exp(-zeta * costs))

    @classmethod
    def initial(cls, costs, zeta: float = 1.0) -> "DualState":
        m, n = _as_array(costs).shape
        return cls.create(np.zeros(m), np.zeros(n), zeta, costs)

    @classmethod
    def from_linear(cls, phi, psi_tilde, zeta, costs) -> "DualState":
        phi, psi_tilde = np.asarray(phi, float), np.asarray(psi_tilde, float)
        if np.any(phi <= 0) or np.any(psi_tilde <= 0):
            raise DualError("dual potentials must be strictly positive")
        return cls.create(np.log(phi), np.log(psi_tilde), zeta, costs)

    @property
    def phi(self) -> np.ndarray:
        return _exp(self.log_phi)

    @property
    def psi_tilde(self) -> np.ndarray:
        return _exp(self.log_psi_tilde)

    def with_zeta(self, zeta: float, costs) -> "DualState":
        return DualState.create(self.log_phi, self.log_psi_tilde, zeta, costs)


def _log_weights(zeta, log_phi, log_psi_tilde, r, costs):
    """log of phi_i * exp(-zeta D_ij) * psi_tilde_j * r_j."""
    return log_phi[:, None] - zeta * costs + (log_psi_tilde + _log(r))[None, :]


def eval_g_lm(dual: DualState, joint, costs) -> float:
    """Dual objective g_LM for the joint P_XZ, in nats.

    psi is recovered from psi_tilde through the Z-marginal of ``joint``. Any
    dual point gives a lower bound on the LM rate of ``joint``.
    """
    joint, costs = _as_array(joint), _as_array(costs)
    p = joint.sum(axis=1)
    r = joint.sum(axis=0)
    log_psi = dual.log_psi_tilde + _log(r)
    if np.any(np.isnan(dual.log_phi)) or np.any(dual.log_phi[p > 0] == -np.inf):
        raise DualError("non-positive phi on a symbol with positive mass")
    cross = _exp(dual.log_phi[:, None] - dual.zeta * costs + log_psi[None, :])
    transport = float(cross.sum())
    e_log_kernel = -dual.zeta * float(np.sum(joint * costs))
    e_log_phi = float(np.sum(p[p > 0] * dual.log_phi[p > 0]))
    e_log_psi = float(np.sum(r[r > 0] * log_psi[r > 0]))
    return -transport + entropy(p) + entropy(r) + e_log_kernel + e_log_phi + e_log_psi + 1.0


def update_phi(dual: DualState, p, r, costs) -> DualState:
    """phi_i = p_i / sum_j exp(-zeta D_ij) psi_tilde_j r_j."""
    p, r, costs = _as_array(p), _as_array(r), _as_array(costs)
    log_den = logsumexp(-dual.zeta * costs + (dual.log_psi_tilde + _log(r))[None, :], axis=1)
    bad = np.flatnonzero(log_den == -np.inf)
    if bad.size:
        raise DualError(f"phi denominator vanishes on row {bad[0]}")
    # floored so a vanished symbol can regain mass in later sweeps
    return replace(dual, log_phi=np.log(np.maximum(p, LOG_FLOOR)) - log_den)


def update_psi_tilde(dual: DualState, costs) -> DualState:
    """psi_tilde_j = 1 / sum_i phi_i exp(-zeta D_ij)."""
    costs = _as_array(costs)
    log_den = logsumexp(dual.log_phi[:, None] - dual.zeta * costs, axis=0)
    bad = np.flatnonzero(~np.isfinite(log_den))
    if bad.size:
        raise DualError(f"psi_tilde denominator degenerate on column {bad[0]}")
    return replace(dual, log_psi_tilde=-log_den)


def _masked_sum(values, weights):
    """sum(values * weights) treating 0 * inf as 0."""
    with np.errstate(invalid="ignore", over="ignore"):
        prod = np.where(values != 0, values * weights, 0.0)
    return float(prod.sum())


def eval_G(zeta: float, dual: DualState, r, costs, expected_cost: float) -> float:
    """G(zeta) = phi^T (D . Lambda) [psi_tilde . r] - E_P[d]; non-increasing in zeta."""
    costs = _as_array(costs)
    w = _exp(_log_weights(zeta, dual.log_phi, dual.log_psi_tilde, _as_array(r), costs))
    return _masked_sum(costs, w) - expected_cost


def eval_G_derivative(zeta: float, dual: DualState, r, costs) -> float:
    costs = _as_array(costs)
    w = _exp(_log_weights(zeta, dual.log_phi, dual.log_psi_tilde, _as_array(r), costs))
    return -_masked_sum(costs * costs, w)


def zeta_tolerance(expected_cost: float) -> float:
    return 1e-12 * (1.0 + abs(expected_cost))


def solve_zeta(dual: DualState, r, costs, expected_cost: float, tol: Optional[float] = None) -> float:
    """Maximise over zeta >= 0: zero if G(0) <= 0, else the root of G.

    The current ``dual.zeta`` warm-starts the Newton iteration.
    """
    costs, r = _as_array(costs), _as_array(r)
    if tol is None:
        tol = zeta_tolerance(expected_cost)
    log_base = _log_weights(0.0, dual.log_phi, dual.log_psi_tilde, r, costs)
    sq = costs * costs

    def fdf(z):
        w = _exp(log_base - z * costs)
        return _masked_sum(costs, w) - expected_cost, -_masked_sum(sq, w)

    def f(z):
        return fdf(z)[0]

    g0 = f(0.0)
    if g0 <= 0:
        return 0.0
    start = dual.zeta if dual.zeta > 0 else 1.0
    try:
        hi = expand_upper(f, start, ZETA_LIMIT)
    except RootNotBracketed as exc:
        raise DualError(f"metric constraint unachievable: {exc}") from None
    # f(hi / 2) > 0 whenever hi was reached by doubling
    lo = hi / 2.0 if hi > start else 0.0
    return newton_decreasing(fdf, lo, hi, start, tol)


def residual_phi(dual: DualState, p, r, costs) -> float:
    """sum_i |phi_i sum_j Lambda_ij psi_tilde_j r_j - p_i|."""
    p, r, costs = _as_array(p), _as_array(r), _as_array(costs)
    log_row = logsumexp(
        _log_weights(dual.zeta, dual.log_phi, dual.log_psi_tilde, r, costs), axis=1
    )
    return float(np.abs(_exp(log_row) - p).sum())


def residual_psi(dual: DualState, r, costs) -> float:
    """sum_j |(psi_tilde_j sum_i phi_i Lambda_ij - 1) r_j|."""
    r, costs = _as_array(r), _as_array(costs)
    log_col = logsumexp(dual.log_phi[:, None] - dual.zeta * costs, axis=0) + dual.log_psi_tilde
    dev = np.abs(_exp(log_col) - 1.0)
    return _masked_sum(r, dev)


def residual_zeta(dual: DualState, r, costs, expected_cost: float) -> float:
    """|G(zeta)|; at zeta = 0 only a positive G(0) counts (slack constraint)."""
    g = eval_G(dual.zeta, dual, r, costs, expected_cost)
    if dual.zeta == 0.0:
        return max(g, 0.0)
    return abs(g)


@dataclass
class LMRateResult:
    value: float
    converged: bool
    iterations: int
    dual: Optional[DualState] = None
    trace: List[float] = field(default_factory=list)

    def __float__(self):
        return self.value


def _balance(log_phi, log_psi, zeta, log_p, log_r, costs, tol, max_sweeps, hook=None):
    """Alternate phi and psi_tilde updates at fixed zeta until r_phi < tol.

    Returns (log_phi, log_psi, sweeps used). After each psi_tilde update
    r_psi is zero, so r_phi alone measures the imbalance.
    """
    log_kernel = -zeta * costs
    for sweep in range(1, max_sweeps + 1):
        log_phi = log_p - logsumexp(log_kernel + (log_psi + log_r)[None, :], axis=1)
        if hook is not None:
            hook(log_phi, log_psi, zeta)
        log_psi = -logsumexp(log_phi[:, None] + log_kernel, axis=0)
        if hook is not None:
            hook(log_phi, log_psi, zeta)
        rows = logsumexp(log_phi[:, None] + log_kernel + (log_psi + log_r)[None, :], axis=1)
        if np.abs(np.exp(rows) - np.exp(log_p)).sum() < tol:
            return log_phi, log_psi, sweep
    return log_phi, log_psi, max_sweeps


def lm_rate_fixed_joint(
    joint,
    costs,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    record: bool = False,
) -> LMRateResult:
    """LM rate of a fixed joint by phi, psi_tilde and zeta updates.

    Rows and columns without mass are dropped first. For each trial zeta the
    phi / psi_tilde updates are run to balance; zeta is then moved to the root
    of G at balanced potentials (Brent's method). A plain one-update-each
    alternation can need millions of sweeps when the optimal zeta is large.
    ``max_iter`` caps the total number of phi / psi_tilde sweeps. With
    ``record`` the dual objective after every single update is kept in ``trace``.
    """
    joint, costs = _as_array(joint), _as_array(costs)
    if joint.shape != costs.shape:
        raise ProbabilityError(f"joint {joint.shape} and metric {costs.shape} differ in shape")
    if np.any(joint < 0) or abs(joint.sum() - 1.0) > 1e-10:
        raise ProbabilityError("joint must be non-negative and sum to 1")
    rows = joint.sum(axis=1) > 0
    cols = joint.sum(axis=0) > 0
    joint = joint[np.ix_(rows, cols)]
    costs = costs[np.ix_(rows, cols)]
    p = joint.sum(axis=1)
    r = joint.sum(axis=0)
    log_p, log_r = np.log(p), np.log(r)
    expected = float(np.sum(joint * costs))
    inner_tol = 0.1 * tol

    trace: List[float] = []

    def hook(lp, ls, z):
        trace.append(eval_g_lm(DualState.create(lp, ls, z, costs), joint, costs))

    work = {"phi": np.zeros(p.size), "psi": np.zeros(r.size), "sweeps": 0}

    def balanced_G(z):
        budget = max(max_iter - work["sweeps"], 1)
        lp, ls, used = _balance(
            work["phi"], work["psi"], z, log_p, log_r, costs, inner_tol, budget,
            hook if record else None,
        )
        work.update(phi=lp, psi=ls, sweeps=work["sweeps"] + used)
        w = _exp(lp[:, None] - z * costs + (ls + log_r)[None, :])
        return _masked_sum(costs, w) - expected

    zeta = 0.0
    if balanced_G(0.0) > 0:
        hi = 1.0
        while balanced_G(hi) > 0:
            if hi >= ZETA_LIMIT:
                raise DualError(f"metric constraint unachievable: no sign change up to {ZETA_LIMIT:g}")
            hi = min(2.0 * hi, ZETA_LIMIT)
        lo = hi / 2.0 if hi > 1.0 else 0.0
        zeta = brentq(balanced_G, lo, hi, xtol=1e-14 * (1.0 + hi), rtol=4 * np.finfo(float).eps)
        balanced_G(zeta)
    dual = DualState.create(work["phi"], work["psi"], zeta, costs)
    res = max(
        residual_phi(dual, p, r, costs),
        residual_psi(dual, r, costs),
        residual_zeta(dual, r, costs, expected),
    )
    return LMRateResult(eval_g_lm(dual, joint, costs), res < tol, work["sweeps"], dual, trace)
