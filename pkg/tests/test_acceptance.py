"""Acceptance criteria. Each test prints one PASS/FAIL line, repeated in the
terminal summary."""

import math
import time

import numpy as np
import pytest

from relaycap import channels
from relaycap.lm_dual import lm_rate_fixed_joint
from relaycap.oracle import lm_rate_bruteforce
from relaycap.prob import NATS_PER_BIT, mutual_information
from relaycap.solver import (
    SolverConfig,
    eval_objective,
    eval_objective_dual_form,
    joint_xz,
    solve,
    solve_for_budget,
)

from conftest import acceptance_line, random_instance

UNIFORM4 = (0.25,) * 4
IQ = dict(eta=0.9, theta=math.pi / 18)


def quaternary(eps):
    theta = channels.quaternary_channel(eps).kernel
    return theta, channels.metric_from_decoding_rule(eps).costs


def awgn(scheme, snr_db, n, half_width=8.0):
    const = channels.constellation(scheme)
    grid = channels.GridSpec(n, half_width)
    params = channels.IqImbalanceParams(snr_db=snr_db, **IQ)
    theta = channels.awgn_iq_channel(const, params, grid).kernel
    return theta, channels.mismatch_metric_awgn(const, grid).costs, const.points


def budget_run(theta, costs, b_bits, points=None, **kw):
    power = 1.0 if points is not None else None
    cfg = SolverConfig(compression_target=b_bits * NATS_PER_BIT, power_limit=power, **kw)
    return solve_for_budget(theta, costs, cfg, points)


def bits(x):
    return x / NATS_PER_BIT


class FormGap:
    """on_iteration hook: largest gap between the two objective forms."""

    def __init__(self, theta, costs, lam):
        self.theta, self.costs, self.lam = theta, costs, lam
        self.worst = 0.0
        self.count = 0

    def __call__(self, it, state):
        a = eval_objective(state, self.theta, self.costs, self.lam)
        b = eval_objective_dual_form(state, self.theta, self.costs, self.lam)
        self.worst = max(self.worst, abs(a - b))
        self.count += 1


# ---------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="module")
def feasibility_runs():
    out = {}
    for eps in (0.3, 0.4):
        for b in (0.41, 0.81):
            theta, costs = quaternary(eps)
            t0 = time.perf_counter()
            rep = budget_run(theta, costs, b, fixed_input=UNIFORM4)
            out[(eps, b)] = (rep, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def eps_trend():
    return [budget_run(*quaternary(eps), 1.0) for eps in (0.1, 0.2, 0.3, 0.4)]


@pytest.fixture(scope="module")
def b_trend():
    theta, costs = quaternary(0.3)
    return [budget_run(theta, costs, b) for b in np.round(np.arange(0.2, 2.01, 0.2), 10)]


@pytest.fixture(scope="module")
def snr_trend():
    # desk-scale grid; at 5 dB the rate jumps across 1 bit, so that point is the
    # best probe within budget
    out = []
    for snr in (5.0, 10.0):
        theta, costs, points = awgn("QPSK", snr, 81, half_width=3.0)
        out.append(budget_run(theta, costs, 1.0, points, max_iter=2000, residual_tol=1e-6, budget_tol=1e-4))
    return out


@pytest.fixture(scope="module")
def noiseless():
    theta, costs = quaternary(0.0)
    return [budget_run(theta, costs, b) for b in (2.0, 2.5)]


@pytest.fixture(scope="module")
def qpsk_residual_run():
    theta, costs, points = awgn("QPSK", 10.0, 225)
    gap = FormGap(theta, costs, 0.25)
    cfg = SolverConfig(lam=0.25, max_iter=5000, power_limit=1.0, seed=0)
    rep = solve(theta, costs, cfg, points, on_iteration=gap)
    return theta, rep, gap


@pytest.fixture(scope="module")
def qam_power():
    theta, costs, points = awgn("16QAM", 10.0, 225)
    gap = FormGap(theta, costs, 0.25)
    cfg = SolverConfig(lam=0.25, max_iter=300, power_limit=1.0, seed=0)
    rep = solve(theta, costs, cfg, points, on_iteration=gap)
    return theta, rep, gap, points


def fixed_lambda_matrix():
    """(name, theta, costs, config, points) for the fixed-lambda part of the matrix."""
    cases = []
    for eps in (0.0, 0.1, 0.3, 0.5):
        theta, costs = quaternary(eps)
        for lam in (0.1, 0.5, 2.0):
            cases.append((f"quaternary eps={eps} lam={lam}", theta, costs, SolverConfig(lam=lam), None))
            cases.append((f"quaternary eps={eps} lam={lam} uniform", theta, costs,
                          SolverConfig(lam=lam, fixed_input=UNIFORM4), None))
    for scheme, snr in (("QPSK", 5.0), ("16QAM", 10.0)):
        theta, costs, points = awgn(scheme, snr, 49, half_width=2.0)
        cases.append((f"{scheme} N=49 snr={snr}", theta, costs,
                      SolverConfig(lam=0.25, max_iter=2000, power_limit=1.0), points))
    rng = np.random.default_rng(2024)
    for i in range(10):
        theta, costs = random_instance(rng, 6)
        cases.append((f"random {i}", theta, costs, SolverConfig(lam=float(rng.uniform(0.1, 2))), None))
    return cases


@pytest.fixture(scope="module")
def matrix_runs():
    runs = []
    for name, theta, costs, cfg, points in fixed_lambda_matrix():
        gap = FormGap(theta, costs, cfg.lam)
        rep = solve(theta, costs, cfg, points, on_iteration=gap)
        runs.append((name, theta, rep, gap))
    return runs


# ---------------------------------------------------------------------------
# criteria


def test_1_compression_feasibility(feasibility_runs):
    worst = max(abs(rep.rate_yz - b * NATS_PER_BIT) for (_, b), (rep, _) in feasibility_runs.items())
    slowest = max(t for _, t in feasibility_runs.values())
    ok = worst <= 1e-6 and slowest < 60.0
    acceptance_line(1, "compression feasibility", ok, f"max |I(Y;Z)-B| = {worst:.2e} nats, slowest {slowest:.1f} s")
    assert ok


def test_2_monotone_ascent():
    worst, bad = 0.0, []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        theta, costs = random_instance(rng, 8)
        lam = float(rng.uniform(0.05, 2.0))
        values = []
        solve(theta, costs, SolverConfig(lam=lam, max_iter=100, seed=seed),
              on_update=lambda name, s: values.append(eval_objective(s, theta, costs, lam)))
        drop = float(np.max(-np.diff(values)))
        worst = max(worst, drop)
        if drop > 1e-9:
            bad.append(seed)
    ok = not bad
    acceptance_line(2, "monotone ascent", ok, f"largest per-update decrease {worst:.2e}, failing seeds {bad}")
    assert ok


def test_3_oracle_equivalence():
    worst_gap, worst_viol = 0.0, -math.inf
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shape = (2, 2) if seed < 10 else (2, 3)
        joint = rng.dirichlet(np.ones(shape[0] * shape[1])).reshape(shape)
        costs = rng.uniform(0.0, 3.0, shape)
        primal = lm_rate_bruteforce(joint, costs)
        res = lm_rate_fixed_joint(joint, costs, record=True)
        worst_gap = max(worst_gap, abs(res.value - primal))
        worst_viol = max(worst_viol, max(res.trace) - primal)
    ok = worst_gap <= 1e-3 and worst_viol <= 1e-6
    acceptance_line(3, "oracle equivalence", ok,
                    f"max |dual-grid| = {worst_gap:.2e}, max dual iterate above grid = {worst_viol:.2e}")
    assert ok


def test_4_residual_convergence(qpsk_residual_run):
    _, rep, _ = qpsk_residual_run
    traces = np.array(rep.residual_traces)
    worst = traces.max(axis=0)
    hit = np.flatnonzero(worst < 1e-5)
    final = ", ".join(f"{v:.1e}" for v in traces[:, -1])
    ok = hit.size > 0
    detail = f"first iterate below 1e-5: {hit[0] + 1}" if ok else f"residuals after {rep.iterations} iterations: {final}"
    acceptance_line(4, "residual convergence QPSK N=225", ok, detail)
    assert ok


@pytest.mark.slow
def test_4_residual_convergence_n2500():
    theta, costs, points = awgn("QPSK", 10.0, 2500)
    rep = solve(theta, costs, SolverConfig(lam=0.25, max_iter=5000, power_limit=1.0), points)
    worst = np.array(rep.residual_traces).max(axis=0)
    ok = bool(np.any(worst < 1e-5))
    acceptance_line(4, "residual convergence QPSK N=2500 (slow)", ok, f"min over iterates {worst.min():.1e}")
    assert ok


def _non_increasing(values, slack=1e-6):
    return all(b <= a + slack for a, b in zip(values, values[1:]))


def test_5_trends(eps_trend, b_trend, snr_trend):
    cap_eps = [bits(r.capacity_lm) for r in eps_trend]
    cap_b = [bits(r.capacity_lm) for r in b_trend]
    cap_snr = [bits(r.capacity_lm) for r in snr_trend]
    ok_eps = _non_increasing(cap_eps)
    ok_b = _non_increasing([-c for c in cap_b])
    ok_snr = cap_snr[1] >= cap_snr[0] - 1e-6 and all(r.rate_yz <= NATS_PER_BIT + 1e-4 for r in snr_trend)
    ok = ok_eps and ok_b and ok_snr
    fmt = lambda xs: "[" + ", ".join(f"{x:.4f}" for x in xs) + "]"
    acceptance_line(5, "trend reproduction", ok,
                    f"eps {fmt(cap_eps)}, B {fmt(cap_b)}, snr {fmt(cap_snr)} bits")
    assert ok


def test_6_noiseless(noiseless):
    caps = [bits(r.capacity_lm) for r in noiseless]
    ok = all(abs(c - 2.0) <= 1e-3 for c in caps)
    acceptance_line(6, "noiseless sanity", ok, "capacities " + ", ".join(f"{c:.6f}" for c in caps) + " bits")
    assert ok


def _bounds_violation(theta, rep):
    s = rep.final_state
    i_xz = mutual_information(joint_xz(s, theta))
    i_xy = mutual_information(s.p[:, None] * theta)
    return max(-rep.capacity_lm, rep.capacity_lm - i_xz - 1e-9, i_xz - i_xy - 1e-9)


def test_7_bounds(matrix_runs, feasibility_runs, eps_trend, b_trend, snr_trend, noiseless, qpsk_residual_run, qam_power):
    quat = {eps: quaternary(eps)[0] for eps in (0.0, 0.1, 0.2, 0.3, 0.4)}
    runs = [(name, theta, rep) for name, theta, rep, _ in matrix_runs]
    runs += [(f"feasibility_runs {k}", quat[k[0]], rep) for k, (rep, _) in feasibility_runs.items()]
    runs += [(f"eps trend {i}", quat[e], r) for i, (e, r) in enumerate(zip((0.1, 0.2, 0.3, 0.4), eps_trend))]
    runs += [(f"B trend {i}", quat[0.3], r) for i, r in enumerate(b_trend)]
    runs += [(f"noiseless {i}", quat[0.0], r) for i, r in enumerate(noiseless)]
    for snr, r in zip((5.0, 10.0), snr_trend):
        runs.append((f"snr {snr}", awgn("QPSK", snr, 81, half_width=3.0)[0], r))
    runs.append(("qpsk residual run", qpsk_residual_run[0], qpsk_residual_run[1]))
    runs.append(("16qam power", qam_power[0], qam_power[1]))
    checked = [(name, _bounds_violation(theta, rep)) for name, theta, rep in runs if rep.converged]
    bad = [name for name, v in checked if v > 0]
    ok = not bad and len(checked) > 0
    acceptance_line(7, "bounds at convergence", ok, f"{len(checked)} converged runs checked, violations {bad}")
    assert ok


def test_8_power_constraint(qam_power, qpsk_residual_run):
    _, rep, _, points = qam_power
    sq = np.sum(points**2, axis=1)
    peak = max([float(np.mean(sq))] + rep.power_trace)
    mu_q = qpsk_residual_run[1].mu_trace
    ok = peak <= 1 + 1e-8 and len(mu_q) > 0 and all(m == 0.0 for m in mu_q)
    acceptance_line(8, "power constraint", ok,
                    f"16QAM peak E[|x|^2] = {peak:.12f}, QPSK mu nonzero at {sum(m != 0.0 for m in mu_q)} iterates")
    assert ok


def test_9_cross_form(matrix_runs, qpsk_residual_run, qam_power):
    gaps = [gap for *_, gap in matrix_runs] + [qpsk_residual_run[2], qam_power[2]]
    worst = max(g.worst for g in gaps)
    n = sum(g.count for g in gaps)
    ok = worst <= 1e-9
    acceptance_line(9, "cross-form consistency", ok, f"max gap {worst:.2e} over {n} iterates")
    assert ok
