"""Command-line interface: ``relaycap run | sweep | export-quantizer | lm-rate``.

Configuration is one JSON document; see README.md for the schema.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import channels
from .lm_dual import DualError, lm_rate_fixed_joint
from .prob import NATS_PER_BIT, ProbabilityError
from .solver import SolverConfig, SolverError, SolverReport, solve, solve_for_budget

log = logging.getLogger("relaycap")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
DEFAULT_PREFIX = "run"
SWEEP_AXES = ("epsilon", "B", "snr_db", "lambda")

CHANNEL_KEYS = {
    "quaternary": {"type", "epsilon", "transition", "metric_epsilon"},
    "awgn_iq": {"type", "scheme", "eta", "theta", "snr_db", "grid_n", "half_width"},
}
SOLVER_KEYS = {
    "lambda", "max_iter", "residual_tol", "power_limit", "lambda_bracket", "seed",
    "restarts", "uniform_input", "budget_tol", "max_bisections",
}
TOP_KEYS = {"channel", "solver", "mode", "output", "report_units", "sweep"}


class ConfigError(ValueError):
    pass


class CsvError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class RunConfig:
    channel: Dict[str, Any]
    solver: Dict[str, Any]
    mode: Dict[str, Any]
    output: str
    report_units: str
    sweep: Optional[Dict[str, Any]] = None


def _require_number(value, where, lo=None, hi=None, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config field '{where}': expected a number, got {value!r}")
    if integer and not float(value).is_integer():
        raise ConfigError(f"config field '{where}': expected an integer, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"config field '{where}': must be finite")
    if lo is not None and value < lo:
        raise ConfigError(f"config field '{where}': must be >= {lo}, got {value!r}")
    if hi is not None and value > hi:
        raise ConfigError(f"config field '{where}': must be <= {hi}, got {value!r}")
    return int(value) if integer else float(value)


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"config field '{where}': expected an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"config field '{where}.{unknown[0]}': unknown key")


def _validate_channel(ch):
    _check_keys(ch, set().union(*CHANNEL_KEYS.values()), "channel")
    kind = ch.get("type")
    if kind not in CHANNEL_KEYS:
        raise ConfigError(f"config field 'channel.type': expected one of {sorted(CHANNEL_KEYS)}, got {kind!r}")
    _check_keys(ch, CHANNEL_KEYS[kind], "channel")
    out = {"type": kind}
    if kind == "quaternary":
        out["epsilon"] = _require_number(ch.get("epsilon"), "channel.epsilon", 0.0, 0.75)
        if ch.get("transition") is not None:
            t = ch["transition"]
            if not (isinstance(t, list) and len(t) == 4 and all(isinstance(row, list) and len(row) == 4 for row in t)):
                raise ConfigError("config field 'channel.transition': expected a 4x4 list of lists")
            out["transition"] = [[_require_number(v, f"channel.transition[{i}][{j}]", 0.0) for j, v in enumerate(row)] for i, row in enumerate(t)]
        if ch.get("metric_epsilon") is not None:
            out["metric_epsilon"] = _require_number(ch["metric_epsilon"], "channel.metric_epsilon", 0.0)
            if out["metric_epsilon"] >= 1.0:
                raise ConfigError("config field 'channel.metric_epsilon': must be < 1")
    else:
        scheme = ch.get("scheme", "QPSK")
        if not isinstance(scheme, str) or scheme.upper().replace("-", "") not in ("QPSK", "16QAM"):
            raise ConfigError(f"config field 'channel.scheme': expected QPSK or 16QAM, got {scheme!r}")
        out["scheme"] = scheme
        out["eta"] = _require_number(ch.get("eta", 0.9), "channel.eta", 0.0, 1.0)
        if out["eta"] == 0.0:
            raise ConfigError("config field 'channel.eta': must be > 0")
        out["theta"] = _require_number(ch.get("theta", math.pi / 18), "channel.theta")
        out["snr_db"] = _require_number(ch.get("snr_db", 10.0), "channel.snr_db")
        out["grid_n"] = _require_number(ch.get("grid_n", 2500), "channel.grid_n", 4, integer=True)
        if math.isqrt(out["grid_n"]) ** 2 != out["grid_n"]:
            raise ConfigError(f"config field 'channel.grid_n': must be a perfect square, got {out['grid_n']}")
        out["half_width"] = _require_number(ch.get("half_width", 8.0), "channel.half_width", 0.0)
        if out["half_width"] == 0.0:
            raise ConfigError("config field 'channel.half_width': must be > 0")
    return out


def _validate_solver(sv, channel_type):
    _check_keys(sv, SOLVER_KEYS, "solver")
    out = {
        "lambda": _require_number(sv.get("lambda", 0.25), "solver.lambda", 0.0),
        "max_iter": _require_number(sv.get("max_iter", 5000), "solver.max_iter", 1, integer=True),
        "residual_tol": _require_number(sv.get("residual_tol", 1e-8), "solver.residual_tol", 0.0),
        "seed": _require_number(sv.get("seed", 0), "solver.seed", 0, integer=True),
        "restarts": _require_number(sv.get("restarts", 1), "solver.restarts", 1, integer=True),
        "budget_tol": _require_number(sv.get("budget_tol", 1e-6), "solver.budget_tol", 0.0),
        "max_bisections": _require_number(sv.get("max_bisections", 200), "solver.max_bisections", 1, integer=True),
    }
    for key in ("lambda", "residual_tol", "budget_tol"):
        if out[key] == 0.0:
            raise ConfigError(f"config field 'solver.{key}': must be > 0")
    # the AWGN experiments always carry the unit average-power constraint
    default_power = 1.0 if channel_type == "awgn_iq" else None
    power = sv.get("power_limit", default_power)
    out["power_limit"] = None if power is None else _require_number(power, "solver.power_limit", 0.0)
    if out["power_limit"] == 0.0:
        raise ConfigError("config field 'solver.power_limit': must be > 0")
    bracket = sv.get("lambda_bracket", [1e-3, 1.0])
    if not (isinstance(bracket, list) and len(bracket) == 2):
        raise ConfigError("config field 'solver.lambda_bracket': expected [low, high]")
    lo = _require_number(bracket[0], "solver.lambda_bracket[0]", 0.0)
    hi = _require_number(bracket[1], "solver.lambda_bracket[1]", 0.0)
    if not 0 < lo < hi:
        raise ConfigError("config field 'solver.lambda_bracket': need 0 < low < high")
    out["lambda_bracket"] = [lo, hi]
    uniform = sv.get("uniform_input", False)
    if not isinstance(uniform, bool):
        raise ConfigError("config field 'solver.uniform_input': expected true or false")
    out["uniform_input"] = uniform
    return out


def _validate_mode(mode):
    if mode is None:
        return {"type": "fixed_lambda"}
    _check_keys(mode, {"type", "B_bits"}, "mode")
    kind = mode.get("type")
    if kind == "fixed_lambda":
        if "B_bits" in mode:
            raise ConfigError("config field 'mode.B_bits': only allowed with type 'budget'")
        return {"type": kind}
    if kind == "budget":
        if "B_bits" not in mode:
            raise ConfigError("config field 'mode.B_bits': required for type 'budget'")
        return {"type": kind, "B_bits": _require_number(mode["B_bits"], "mode.B_bits", 0.0)}
    raise ConfigError(f"config field 'mode.type': expected 'fixed_lambda' or 'budget', got {kind!r}")


def _validate_sweep(sweep):
    if sweep is None:
        return None
    _check_keys(sweep, {"axis", "values"}, "sweep")
    axis = sweep.get("axis")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"config field 'sweep.axis': expected one of {list(SWEEP_AXES)}, got {axis!r}")
    values = sweep.get("values")
    if not isinstance(values, list) or not values:
        raise ConfigError("config field 'sweep.values': expected a non-empty list")
    return {"axis": axis, "values": [_require_number(v, f"sweep.values[{i}]") for i, v in enumerate(values)]}


def parse_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a decoded JSON config; raises ConfigError naming the offending field."""
    _check_keys(data, TOP_KEYS, "")
    if "channel" not in data:
        raise ConfigError("config field 'channel': required")
    channel = _validate_channel(data["channel"])
    solver = _validate_solver(data.get("solver", {}), channel["type"])
    mode = _validate_mode(data.get("mode"))
    output = data.get("output", DEFAULT_PREFIX)
    if not isinstance(output, str):
        raise ConfigError("config field 'output': expected a string")
    units = data.get("report_units", "bits")
    if units not in ("bits", "nats"):
        raise ConfigError(f"config field 'report_units': expected 'bits' or 'nats', got {units!r}")
    sweep = _validate_sweep(data.get("sweep"))
    return RunConfig(channel, solver, mode, output or DEFAULT_PREFIX, units, sweep)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    solver = dict(cfg.solver)
    if getattr(args, "seed", None) is not None:
        solver["seed"] = args.seed
    if getattr(args, "max_iter", None) is not None:
        if args.max_iter < 1:
            raise ConfigError("--max-iter must be >= 1")
        solver["max_iter"] = args.max_iter
    output = cfg.output
    if getattr(args, "out", None) is not None:
        output = args.out or DEFAULT_PREFIX
    units = getattr(args, "units", None) or cfg.report_units
    return RunConfig(cfg.channel, solver, cfg.mode, output, units, cfg.sweep)


# ---------------------------------------------------------------------------
# problem construction and solving

def build_problem(channel: Dict[str, Any]):
    """(theta, costs, points or None, grid or None) for a validated channel section."""
    if channel["type"] == "quaternary":
        eps = channel["epsilon"]
        theta = channels.quaternary_channel(eps, channel.get("transition")).kernel
        costs = channels.metric_from_decoding_rule(channel.get("metric_epsilon", eps)).costs
        return theta, costs, None, None
    const = channels.constellation(channel["scheme"])
    grid = channels.GridSpec(channel["grid_n"], channel["half_width"])
    params = channels.IqImbalanceParams(channel["eta"], channel["theta"], channel["snr_db"])
    theta = channels.awgn_iq_channel(const, params, grid).kernel
    costs = channels.mismatch_metric_awgn(const, grid).costs
    return theta, costs, const.points, grid


def solver_config(cfg: RunConfig) -> SolverConfig:
    sv = cfg.solver
    target = None
    if cfg.mode["type"] == "budget":
        target = cfg.mode["B_bits"] * NATS_PER_BIT
    fixed = None
    if sv["uniform_input"]:
        m = 4 if cfg.channel["type"] == "quaternary" else len(channels.constellation(cfg.channel["scheme"]).labels)
        fixed = tuple([1.0 / m] * m)
    return SolverConfig(
        lam=sv["lambda"],
        max_iter=sv["max_iter"],
        residual_tol=sv["residual_tol"],
        power_limit=sv["power_limit"],
        compression_target=target,
        lambda_bracket=tuple(sv["lambda_bracket"]),
        seed=sv["seed"],
        restarts=sv["restarts"],
        fixed_input=fixed,
        budget_tol=sv["budget_tol"],
        max_bisections=sv["max_bisections"],
    )


def execute(cfg: RunConfig) -> Tuple[SolverReport, Any]:
    theta, costs, points, grid = build_problem(cfg.channel)
    sc = solver_config(cfg)
    if cfg.mode["type"] == "budget":
        report = solve_for_budget(theta, costs, sc, points)
    else:
        report = solve(theta, costs, sc, points)
    return report, grid


def _in_units(nats: float, units: str) -> float:
    return nats / NATS_PER_BIT if units == "bits" else nats


def report_dict(report: SolverReport, units: str) -> Dict[str, Any]:
    return {
        "capacity": _in_units(report.capacity_lm, units),
        "capacity_bits": report.capacity_lm / NATS_PER_BIT,
        "capacity_nats": report.capacity_lm,
        "converged": report.converged,
        "flags": list(report.flags),
        "iterations": report.iterations,
        "lambda": report.lam,
        "rate_yz": _in_units(report.rate_yz, units),
        "rate_yz_bits": report.rate_yz / NATS_PER_BIT,
        "rate_yz_nats": report.rate_yz,
        "seed": report.seed,
        "units": units,
    }


# ---------------------------------------------------------------------------
# CSV writing and reading

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(path, header: Sequence[str], rows, comments: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    _write_text(path, buf.getvalue())


def _write_text(path, text: str) -> None:
    path = Path(path)
    if path.parent != Path("."):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _parse_cell(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise CsvError(f"{where}: cannot parse {text!r} as a number") from None


def read_table(path) -> Tuple[List[str], List[List[str]], List[str]]:
    """(header, data rows as strings, comment lines) of a CSV with one header row."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CsvError(f"cannot read {path}: {exc.strerror}") from None
    comments, body = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif line.strip():
            body.append((lineno, line))
    if not body:
        raise CsvError(f"{path}: no header row")
    header = next(csv.reader([body[0][1]]))
    rows = []
    for lineno, line in body[1:]:
        cells = next(csv.reader([line]))
        if len(cells) != len(header):
            raise CsvError(f"{path}: row {lineno}: expected {len(header)} columns, got {len(cells)}")
        rows.append(cells)
    return header, rows, comments


def read_matrix(path) -> Tuple[np.ndarray, List[str]]:
    """Numeric matrix from CSV. '#' lines are comments; a first row without any
    number is taken as a header. Returns (matrix, comments)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CsvError(f"cannot read {path}: {exc.strerror}") from None
    comments, rows, width = [], [], None
    first = True
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        if not line.strip():
            continue
        cells = [c.strip() for c in next(csv.reader([line]))]
        if first:
            first = False
            if not any(_is_number(c) for c in cells):
                continue
        values = [_parse_cell(c, f"{path}: row {lineno} column {col}") for col, c in enumerate(cells, start=1)]
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise CsvError(f"{path}: row {lineno}: expected {width} columns, got {len(values)}")
        rows.append(values)
    if not rows:
        raise CsvError(f"{path}: no numeric rows")
    return np.array(rows, dtype=float), comments


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------------------
# commands

def _write_report(prefix: str, report: SolverReport, units: str) -> Tuple[Path, Path]:
    report_path = Path(f"{prefix}_report.json")
    _write_text(report_path, json.dumps(report_dict(report, units), indent=2, sort_keys=True) + "\n")
    trace_path = Path(f"{prefix}_trace.csv")
    r_phi, r_psi, r_zeta, r_mu = report.residual_traces
    rows = zip(range(1, len(report.objective_trace) + 1), report.objective_trace, r_phi, r_psi, r_zeta, r_mu)
    write_csv(trace_path, ["iter", "objective", "r_phi", "r_psi", "r_zeta", "r_mu"], rows)
    return report_path, trace_path


def cmd_run(cfg: RunConfig) -> int:
    report, _ = execute(cfg)
    report_path, trace_path = _write_report(cfg.output, report, cfg.report_units)
    c = _in_units(report.capacity_lm, cfg.report_units)
    print(f"capacity {c:.10g} {cfg.report_units}  (report {report_path}, trace {trace_path})")
    if not report.converged:
        print(f"warning: not converged after {report.iterations} iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def sweep_point(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    """Config for one sweep point: ``value`` substituted on ``axis``."""
    channel, solver, mode = copy.deepcopy(cfg.channel), dict(cfg.solver), dict(cfg.mode)
    if axis == "epsilon":
        if channel["type"] != "quaternary":
            raise ConfigError("sweep axis 'epsilon' needs a quaternary channel")
        channel["epsilon"] = value
    elif axis == "snr_db":
        if channel["type"] != "awgn_iq":
            raise ConfigError("sweep axis 'snr_db' needs an awgn_iq channel")
        channel["snr_db"] = value
    elif axis == "B":
        mode = {"type": "budget", "B_bits": value}
    elif axis == "lambda":
        solver["lambda"] = value
        mode = {"type": "fixed_lambda"}
    data = {"channel": channel, "solver": solver, "mode": mode, "output": cfg.output,
            "report_units": cfg.report_units}
    return parse_config(data)


def _sweep_worker(job):
    cfg, axis, value = job
    try:
        report, _ = execute(sweep_point(cfg, axis, value))
    except (ConfigError, SolverError, DualError, ProbabilityError, ValueError, ArithmeticError) as exc:
        return (value, math.nan, math.nan, 0, False, math.nan, f"error: {exc}")
    units = cfg.report_units
    return (
        value,
        _in_units(report.capacity_lm, units),
        _in_units(report.rate_yz, units),
        report.iterations,
        report.converged,
        report.lam,
        ";".join(report.flags),
    )


def cmd_sweep(cfg: RunConfig, workers: Optional[int]) -> int:
    if cfg.sweep is None:
        raise ConfigError("config field 'sweep': required by the sweep command")
    axis = cfg.sweep["axis"]
    # fail fast on axis / channel mismatch before spawning anything
    sweep_point(cfg, axis, cfg.sweep["values"][0])
    jobs = [(cfg, axis, v) for v in cfg.sweep["values"]]
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(jobs) == 1:
        rows = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    u = cfg.report_units
    path = Path(f"{cfg.output}_sweep.csv")
    header = [axis, f"capacity_{u}", f"rate_yz_{u}", "iterations", "converged", "lambda", "flags"]
    write_csv(path, header, rows)
    print(f"{len(rows)} points written to {path}")
    return EXIT_OK if all(r[4] for r in rows) else EXIT_NOT_CONVERGED


def cmd_export_quantizer(cfg: RunConfig) -> int:
    if cfg.channel["type"] != "awgn_iq":
        raise ConfigError("config field 'channel.type': export-quantizer needs an awgn_iq channel")
    report, grid = execute(cfg)
    omega = report.final_state.omega
    comments = []
    if not report.converged:
        comments.append(f"not converged after {report.iterations} iterations")
    q_path = Path(f"{cfg.output}_quantizer.csv")
    write_csv(q_path, [f"z{j}" for j in range(omega.shape[1])], omega.tolist(), comments)
    pts = channels.make_grid(grid).points
    legend = [("y", i, x, y) for i, (x, y) in enumerate(pts)] + [("z", j, x, y) for j, (x, y) in enumerate(pts)]
    l_path = Path(f"{cfg.output}_legend.csv")
    write_csv(l_path, ["alphabet", "index", "coord1", "coord2"], legend)
    print(f"{omega.shape[0]}x{omega.shape[1]} relay kernel written to {q_path}, legend {l_path}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_lm_rate(joint_path, metric_path, units: str) -> int:
    joint, _ = read_matrix(joint_path)
    costs, _ = read_matrix(metric_path)
    if joint.shape != costs.shape:
        raise CsvError(f"joint {joint.shape} and metric {costs.shape} differ in shape")
    if np.any(costs == -np.inf) or np.any(np.isnan(costs)):
        raise CsvError(f"{metric_path}: metric entries must be finite or +inf")
    costs = np.where(np.isinf(costs), channels.COST_SENTINEL, costs)
    result = lm_rate_fixed_joint(joint, costs)
    if not result.converged:
        print("warning: LM rate iteration did not reach its tolerance", file=sys.stderr)
    print(f"{_in_units(result.value, units):.17g} {units}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="override solver.seed")
    common.add_argument("--max-iter", type=int, dest="max_iter", help="override solver.max_iter")
    common.add_argument("--out", help="output path prefix (default: config 'output' or 'run')")
    common.add_argument("--units", choices=("bits", "nats"), help="override report_units")
    common.add_argument("--workers", type=int, help="sweep worker processes (default: CPU count)")

    parser = argparse.ArgumentParser(
        prog="relaycap",
        description="Mismatch capacity of relay channels with an oblivious relay.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="single solve; writes report JSON and trace CSV")
    sub.add_parser("sweep", parents=[common], help="solve over the config's sweep axis; writes a CSV")
    sub.add_parser("export-quantizer", parents=[common], help="write the optimized relay kernel as CSV")
    lm = sub.add_parser("lm-rate", parents=[common], help="LM rate of a joint distribution under a metric")
    lm.add_argument("joint", help="CSV of the joint P_XZ")
    lm.add_argument("metric", help="CSV of the metric d(x, z)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.command == "lm-rate":
            return cmd_lm_rate(args.joint, args.metric, args.units or "bits")
        if not args.config:
            raise ConfigError("--config is required for this command")
        cfg = apply_overrides(load_config(args.config), args)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.workers)
        return cmd_export_quantizer(cfg)
    except (ConfigError, CsvError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (SolverError, DualError, ProbabilityError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
