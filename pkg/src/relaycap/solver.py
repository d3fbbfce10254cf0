"""Alternating maximization for the mismatch capacity with an oblivious relay.

Shapes: ``theta`` is M x K (Q_{Y|X}), ``omega`` is K x N (P_{Z|Y}), ``costs`` is
M x N. The objective maximized is the J-form

    F = -p^T log p + p^T log J + 1,

every block update below being its exact maximizer over one variable, so F
never decreases along the iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import xlogy

from . import lm_dual
from .lm_dual import DualState
from .prob import LOG_FLOOR, _as_array, compose_joint, entropy, logsumexp, mutual_information
from .rootfind import RootNotBracketed, expand_upper, newton_decreasing

log = logging.getLogger(__name__)

MU_LIMIT = 1e6
# relative lam resolution below which the budget search gives up on a rate jump
LAMBDA_RESOLUTION = 1e-9


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings. ``lam`` is the IB-Lagrangian multiplier; rates are in nats."""

    lam: float = 0.25
    max_iter: int = 5000
    residual_tol: float = 1e-8
    power_limit: Optional[float] = None
    compression_target: Optional[float] = None
    lambda_bracket: Tuple[float, float] = (1e-3, 1.0)
    seed: int = 0
    restarts: int = 1
    # when set, P_X is held at this distribution (uniform-input experiments)
    fixed_input: Optional[Tuple[float, ...]] = None
    budget_tol: float = 1e-6
    max_bisections: int = 200

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        lo, hi = self.lambda_bracket
        if not 0 < lo < hi:
            raise ValueError("lambda_bracket must be ordered and positive")
        if self.power_limit is not None and not self.power_limit > 0:
            raise ValueError("power_limit must be > 0")
        if self.compression_target is not None and self.compression_target < 0:
            raise ValueError("compression_target must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass(frozen=True)
class SolverState:
    p: np.ndarray
    omega: np.ndarray
    r: np.ndarray
    dual: DualState
    mu: float = 0.0


@dataclass
class SolverReport:
    capacity_lm: float
    rate_yz: float
    objective_trace: List[float]
    residual_traces: Tuple[List[float], List[float], List[float], List[float]]
    iterations: int
    converged: bool
    final_state: SolverState
    lam: float
    seed: int = 0
    flags: Tuple[str, ...] = ()
    power_trace: List[float] = field(default_factory=list)
    mu_trace: List[float] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _log_floored(x):
    return np.log(np.maximum(x, LOG_FLOOR))


def _weighted(weights, values):
    """Row sums of weights * values where weights > 0 (0 * inf taken as 0)."""
    with np.errstate(invalid="ignore", over="ignore"):
        return np.where(weights > 0, weights * values, 0.0).sum(axis=1)


def relay_kl(omega, r) -> np.ndarray:
    """Per-row KL(Omega_k || r), 0 log 0 = 0."""
    return xlogy(omega, omega).sum(axis=1) - omega @ _log_floored(r)


def _column_term(dual: DualState, costs):
    """-(Lambda^T phi) . psi_tilde + log psi_tilde, per Z symbol."""
    log_col = logsumexp(dual.log_phi[:, None] - dual.zeta * costs, axis=0)
    with np.errstate(over="ignore"):
        return dual.log_psi_tilde - np.exp(log_col + dual.log_psi_tilde)


def eval_log_J(state: SolverState, theta, costs, lam: float) -> np.ndarray:
    theta, costs = _as_array(theta), _as_array(costs)
    dual = state.dual
    w = theta @ state.omega
    lin = _weighted(w, _column_term(dual, costs)[None, :])
    metric = _weighted(w, costs)
    kl = _weighted(theta, relay_kl(state.omega, state.r)[None, :])
    with np.errstate(invalid="ignore"):
        out = dual.log_phi + lin - dual.zeta * metric - lam * kl
    return np.where(np.isnan(out), -np.inf, out)


def eval_J(state: SolverState, theta, costs, lam: float) -> np.ndarray:
    """Coefficient vector J of the linear-in-p terms of the objective."""
    return np.exp(eval_log_J(state, theta, costs, lam))


def _softmax(log_w):
    top = np.max(log_w)
    if top == -np.inf:
        raise SolverError("all J entries vanish; degenerate metric")
    w = np.exp(log_w - top)
    return w / w.sum()


def update_p(state: SolverState, theta, costs, lam: float, log_j=None) -> np.ndarray:
    """p_i = J_i / sum J; ``log_j`` may pass a precomputed log J for ``state``."""
    if log_j is None:
        log_j = eval_log_J(state, theta, costs, lam)
    return _softmax(log_j)


def power_tolerance(gamma: float) -> float:
    return 1e-12 * (1.0 + abs(gamma))


def eval_F(mu: float, log_j, sq_norms, gamma: float) -> float:
    """Average power of the mu-tilted input minus the limit; non-increasing in mu."""
    return float(_softmax(log_j - mu * sq_norms) @ sq_norms) - gamma


def _F_and_derivative(mu, log_j, sq_norms, gamma):
    q = _softmax(log_j - mu * sq_norms)
    mean = float(q @ sq_norms)
    var = float(q @ (sq_norms - mean) ** 2)
    return mean - gamma, -var


def solve_mu(log_j, sq_norms, gamma: float, mu_start: float = 1.0) -> float:
    """Power multiplier: 0 if the untilted input meets the limit, else the root of F."""
    sq_norms = np.asarray(sq_norms, dtype=float)
    tol = power_tolerance(gamma)
    if eval_F(0.0, log_j, sq_norms, gamma) <= tol:
        return 0.0
    if np.min(sq_norms) > gamma + tol:
        raise SolverError(
            f"power limit {gamma:g} below the smallest symbol power {np.min(sq_norms):g}"
        )

    def f(mu):
        return eval_F(mu, log_j, sq_norms, gamma) - tol

    start = mu_start if mu_start > 0 else 1.0
    try:
        hi = expand_upper(f, start, MU_LIMIT)
    except RootNotBracketed as exc:
        raise SolverError(f"power multiplier not bracketed: {exc}") from None
    lo = hi / 2.0 if hi > start else 0.0

    # aim just inside the feasible side so E_p[|x|^2] <= gamma survives rounding
    def fdf(mu):
        value, slope = _F_and_derivative(mu, log_j, sq_norms, gamma)
        return value + 0.5 * tol, slope

    return newton_decreasing(fdf, lo, hi, start, 0.5 * tol)


def update_p_power(state: SolverState, theta, costs, lam: float, gamma: float, points, log_j=None):
    """Power-constrained input update; returns (p, mu)."""
    sq = np.sum(np.asarray(points, dtype=float) ** 2, axis=1)
    if log_j is None:
        log_j = eval_log_J(state, theta, costs, lam)
    mu = solve_mu(log_j, sq, gamma, state.mu)
    return _softmax(log_j - mu * sq), mu


def log_omega_star(state: SolverState, theta, costs, lam: float) -> np.ndarray:
    """Unnormalized log Omega* (K x N); rows of unreachable relay inputs are 0."""
    theta, costs = _as_array(theta), _as_array(costs)
    dual = state.dual
    q = theta.T @ state.p
    reach = q > 0
    if not np.any(reach):
        raise SolverError("no relay input is reachable")
    out = np.zeros(state.omega.shape)
    # posterior-averaged metric E[d(X, z_j) | Y = y_k]
    avg_cost = (theta[:, reach].T * state.p[None, :]) @ costs / q[reach, None]
    out[reach] = (
        _log_floored(state.r)[None, :]
        + _column_term(dual, costs)[None, :] / lam
        - (dual.zeta / lam) * avg_cost
    )
    return out


def update_omega(state: SolverState, theta, costs, lam: float) -> np.ndarray:
    """Relay kernel P_{Z|Y} maximizing the objective with everything else fixed.

    Rows for unreachable relay inputs (zero probability) are set uniform.
    """
    log_star = log_omega_star(state, theta, costs, lam)
    norm = logsumexp(log_star, axis=1, keepdims=True)
    bad = np.flatnonzero(~np.isfinite(norm[:, 0]))
    if bad.size:
        raise SolverError(f"relay kernel row {bad[0]} vanishes")
    return np.exp(log_star - norm)


def update_r(state: SolverState, theta) -> np.ndarray:
    """r = Omega^T Theta^T p."""
    return state.omega.T @ (_as_array(theta).T @ state.p)


def joint_xz(state: SolverState, theta) -> np.ndarray:
    return compose_joint(state.p, theta, state.omega)


def rate_yz(state: SolverState, theta) -> float:
    """I(Y;Z) in nats; unreachable relay inputs carry zero weight."""
    q = _as_array(theta).T @ state.p
    return mutual_information(q[:, None] * state.omega)


def eval_objective(state: SolverState, theta, costs, lam: float, log_j=None) -> float:
    """J-form objective -p^T log p + p^T log J + 1."""
    if log_j is None:
        log_j = eval_log_J(state, theta, costs, lam)
    p = state.p
    mask = p > 0
    return float(entropy(p) + np.sum(p[mask] * log_j[mask]) + 1.0)


def eval_objective_dual_form(state: SolverState, theta, costs, lam: float) -> float:
    """The same objective as g_LM(P_XZ) - lam * I(Y;Z), computed independently."""
    joint = joint_xz(state, theta)
    return lm_dual.eval_g_lm(state.dual, joint, costs) - lam * rate_yz(state, theta)


def expected_cost(state: SolverState, theta, costs) -> float:
    joint = joint_xz(state, theta)
    costs = _as_array(costs)
    with np.errstate(invalid="ignore"):
        return float(np.where(joint > 0, joint * costs, 0.0).sum())


def residuals(
    state: SolverState, theta, costs, lam: float, power=None, log_j=None
) -> Tuple[float, float, float, float]:
    """(r_phi, r_psi, r_zeta, r_mu).

    ``power`` is ``(gamma, points)`` when the power constraint is active;
    otherwise r_mu is 0. For zero multipliers only a violated constraint counts.
    """
    costs = _as_array(costs)
    dual = state.dual
    r_phi = lm_dual.residual_phi(dual, state.p, state.r, costs)
    r_psi = lm_dual.residual_psi(dual, state.r, costs)
    r_zeta = lm_dual.residual_zeta(dual, state.r, costs, expected_cost(state, theta, costs))
    r_mu = 0.0
    if power is not None:
        gamma, points = power
        sq = np.sum(np.asarray(points, dtype=float) ** 2, axis=1)
        if log_j is None:
            log_j = eval_log_J(state, theta, costs, lam)
        f = eval_F(state.mu, log_j, sq, gamma)
        r_mu = abs(f) if state.mu > 0 else max(f, 0.0)
    return r_phi, r_psi, r_zeta, r_mu


def initial_state(theta, costs, seed: int, p0=None, power: bool = False) -> SolverState:
    """Uniform (or given) p, Dirichlet(1) relay rows, consistent r, unit potentials, zeta = 1."""
    theta, costs = _as_array(theta), _as_array(costs)
    m, k = theta.shape
    n = costs.shape[1]
    rng = np.random.default_rng(seed)
    omega = rng.dirichlet(np.ones(n), size=k)
    p = np.full(m, 1.0 / m) if p0 is None else np.asarray(p0, dtype=float)
    r = omega.T @ (theta.T @ p)
    dual = DualState.initial(costs, zeta=1.0)
    return SolverState(p, omega, r, dual, 1.0 if power else 0.0)


def dual_sweep(state: SolverState, theta, costs, on_update: Optional["UpdateHook"] = None) -> SolverState:
    """phi, psi_tilde and zeta updates at fixed p, Omega, r."""
    costs = _as_array(costs)
    dual = lm_dual.update_phi(state.dual, state.p, state.r, costs)
    state = replace(state, dual=dual)
    if on_update is not None:
        on_update("phi", state)
    dual = lm_dual.update_psi_tilde(dual, costs)
    state = replace(state, dual=dual)
    if on_update is not None:
        on_update("psi_tilde", state)
    zeta = lm_dual.solve_zeta(dual, state.r, costs, expected_cost(state, theta, costs))
    state = replace(state, dual=dual.with_zeta(zeta, costs))
    if on_update is not None:
        on_update("zeta", state)
    return state


UpdateHook = Callable[[str, SolverState], None]


def am_iteration(
    state: SolverState,
    theta,
    costs,
    config: SolverConfig,
    points=None,
    on_update: Optional[UpdateHook] = None,
    log_j=None,
) -> SolverState:
    """One sweep: [mu,] p, Omega, r, phi, psi_tilde, zeta.

    ``log_j`` is an optional precomputed log J for the incoming state.
    """
    theta, costs = _as_array(theta), _as_array(costs)
    lam = config.lam

    def hook(name, s):
        if on_update is not None:
            on_update(name, s)
        return s

    if config.fixed_input is None:
        if config.power_limit is not None:
            p, mu = update_p_power(state, theta, costs, lam, config.power_limit, points, log_j)
            state = hook("p", replace(state, p=p, mu=mu))
        else:
            state = hook("p", replace(state, p=update_p(state, theta, costs, lam, log_j)))
    state = hook("omega", replace(state, omega=update_omega(state, theta, costs, lam)))
    state = hook("r", replace(state, r=update_r(state, theta)))
    return dual_sweep(state, theta, costs, on_update)


def _check_inputs(theta, costs, config, points):
    if theta.ndim != 2 or costs.ndim != 2 or theta.shape[0] != costs.shape[0]:
        raise SolverError(f"theta {theta.shape} and metric {costs.shape} are inconsistent")
    if config.power_limit is not None:
        if points is None:
            raise SolverError("power constraint requires constellation points")
        if np.shape(points) != (theta.shape[0], 2):
            raise SolverError("one 2-D point per input symbol is required")
    if config.fixed_input is not None:
        p0 = np.asarray(config.fixed_input, dtype=float)
        if p0.shape != (theta.shape[0],) or abs(p0.sum() - 1) > 1e-12 or np.any(p0 < 0):
            raise SolverError("fixed_input must be a distribution over the input alphabet")


def _solve_once(theta, costs, config: SolverConfig, points, seed, on_update, on_iteration) -> SolverReport:
    power = (config.power_limit, points) if config.power_limit is not None else None
    state = initial_state(theta, costs, seed, config.fixed_input, power is not None)
    # the unit-scale initial zeta is meaningless for metrics far from unit scale
    # (e.g. the 1e9 sentinel); fit the dual to the initial point first
    state = dual_sweep(state, theta, costs, on_update)
    objective: List[float] = []
    traces: Tuple[List[float], ...] = ([], [], [], [])
    power_trace: List[float] = []
    mu_trace: List[float] = []
    sq = None if points is None else np.sum(np.asarray(points, float) ** 2, axis=1)
    converged = False
    it = 0
    prev = -math.inf
    log_j = None
    for it in range(1, config.max_iter + 1):
        state = am_iteration(state, theta, costs, config, points, on_update, log_j)
        log_j = eval_log_J(state, theta, costs, config.lam)
        value = eval_objective(state, theta, costs, config.lam, log_j)
        res = residuals(state, theta, costs, config.lam, power, log_j)
        objective.append(value)
        for trace, v in zip(traces, res):
            trace.append(v)
        if sq is not None:
            power_trace.append(float(state.p @ sq))
            mu_trace.append(state.mu)
        if on_iteration is not None:
            on_iteration(it, state)
        if max(max(res), abs(value - prev)) < config.residual_tol:
            converged = True
            break
        prev = value
    # g_LM lower-bounds the LM rate, which is itself >= 0; a slightly negative
    # dual value (unconverged potentials, roundoff) certifies nothing beyond 0
    capacity = max(lm_dual.eval_g_lm(state.dual, joint_xz(state, theta), costs), 0.0)
    return SolverReport(
        capacity_lm=capacity,
        rate_yz=rate_yz(state, theta),
        objective_trace=objective,
        residual_traces=traces,
        iterations=it,
        converged=converged,
        final_state=state,
        lam=config.lam,
        seed=seed,
        flags=() if converged else ("max_iter",),
        power_trace=power_trace,
        mu_trace=mu_trace,
    )


def solve(
    theta,
    costs,
    config: SolverConfig,
    points=None,
    on_update: Optional[UpdateHook] = None,
    on_iteration: Optional[Callable[[int, SolverState], None]] = None,
) -> SolverReport:
    """Run the alternating maximization at fixed lam.

    With ``config.power_limit`` set the input update carries the average power
    constraint (``points`` gives the constellation). Over ``config.restarts``
    random relay initializations the report with the largest objective wins.
    """
    theta, costs = _as_array(theta), _as_array(costs)
    _check_inputs(theta, costs, config, points)
    best = None
    for i in range(config.restarts):
        rep = _solve_once(theta, costs, config, points, config.seed + i, on_update, on_iteration)
        if best is None or rep.objective > best.objective:
            best = rep
    return best


def solve_for_budget(theta, costs, config: SolverConfig, points=None) -> SolverReport:
    """Bisect lam so that I(Y;Z) meets ``config.compression_target`` (nats).

    I(Y;Z) is taken to decrease in lam; the bracket grows by a factor 10 at
    either end, at most 4 times, until it straddles the target. Outcomes that
    do not meet the target are returned with explanatory flags. If the search
    fails inside the bracket (I(Y;Z) can jump across the target as the relay
    clusters merge) the probe with the largest rate within budget is returned.
    """
    target = config.compression_target
    if target is None:
        raise SolverError("compression_target is required")
    tol = config.budget_tol
    lo, hi = config.lambda_bracket

    def probe(lam):
        rep = solve(theta, costs, replace(config, lam=lam), points)
        log.debug("lam=%.12g  I(Y;Z)=%.12g  C=%.12g", lam, rep.rate_yz, rep.capacity_lm)
        return rep

    rep_lo, rep_hi = probe(lo), probe(hi)
    for _ in range(4):
        if rep_lo.rate_yz >= target - tol:
            break
        lo /= 10.0
        rep_lo = probe(lo)
    for _ in range(4):
        if rep_hi.rate_yz <= target + tol:
            break
        hi *= 10.0
        rep_hi = probe(hi)

    if rep_lo.rate_yz < rep_hi.rate_yz - tol:
        return _flag(rep_lo, "monotonicity_violation")
    if abs(rep_lo.rate_yz - target) <= tol:
        return rep_lo
    if rep_lo.rate_yz < target:
        return _flag(rep_lo, "budget_inactive")
    if abs(rep_hi.rate_yz - target) <= tol:
        return rep_hi
    if rep_hi.rate_yz > target:
        return _flag(rep_hi, "bracket_failure")

    # Illinois false position on log(lam); a bisection is forced after two
    # steps that fail to halve the bracket
    # rep_hi is within budget from here on
    best = rep_hi
    f_lo, f_hi = rep_lo.rate_yz - target, rep_hi.rate_yz - target
    last_side, stall = 0, 0
    for _ in range(config.max_bisections):
        a, b = math.log(lo), math.log(hi)
        if b - a < LAMBDA_RESOLUTION:
            break
        mid = math.exp((a * f_hi - b * f_lo) / (f_hi - f_lo))
        if stall >= 2 or not lo < mid < hi:
            mid, stall = math.sqrt(lo * hi), 0
        if not lo < mid < hi:
            break
        rep = probe(mid)
        err = rep.rate_yz - target
        if abs(err) <= tol:
            return rep
        if err < 0 and rep.rate_yz > best.rate_yz:
            best = rep
        if rep.rate_yz > rep_lo.rate_yz + tol or rep.rate_yz < rep_hi.rate_yz - tol:
            return _flag(best, "monotonicity_violation")
        if err > 0:
            lo, rep_lo, f_lo = mid, rep, err
            if last_side > 0:
                f_hi *= 0.5
            last_side = 1
        else:
            hi, rep_hi, f_hi = mid, rep, err
            if last_side < 0:
                f_lo *= 0.5
            last_side = -1
        stall = stall + 1 if math.log(hi) - math.log(lo) > 0.5 * (b - a) else 0
    return _flag(best, "bracket_failure")


def _flag(report: SolverReport, flag: str) -> SolverReport:
    return replace(report, flags=report.flags + (flag,))
