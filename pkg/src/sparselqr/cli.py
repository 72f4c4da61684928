"""Command-line driver.

Subcommands: ``generate``, ``solve``, ``sweep``, ``polish``, ``bench`` and
``lqr``. Every run that gets past argument parsing writes ``report.json``
into ``--out``; solves also write ``trace.csv``, sweeps ``sweep.csv`` and
benchmarks ``bench.csv``.

Exit codes: 0 success, 1 solver failure (including non-convergence),
2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ista import IstaOptions, ista_solve
from .kernels import SynthesisError, lqr_synthesize
from .model import (
    ProblemFile,
    ProblemFormatError,
    mass_spring,
    random_network,
    read_problem,
    validate,
    write_problem,
)
from .newton_cd import (
    InitializationError,
    SolveReport,
    SolverOptions,
    TraceRow,
    count_nonzero,
    initialize,
    polish,
    solve,
)
from .objective import evaluate

__all__ = ["SweepSpec", "SweepRow", "run_sweep", "run_solver", "build_parser", "main"]

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SOLVERS = ("newton-cd", "ista")

SWEEP_FIELDS = ("lambda", "nnz_fraction", "perf_gap", "wall_time_s", "status",
                "J_l1", "J_polished", "F", "iterations")
BENCH_FIELDS = ("solver", "iter", "time_s", "objective_F", "f_star", "F_minus_f_star")


class UsageError(Exception):
    """Bad flags or unreadable inputs; maps to exit code 2."""


@dataclass
class SweepSpec:
    lambda_min: float
    lambda_max: float
    count: int
    polish_each: bool = True
    warm_start: bool = True

    def __post_init__(self):
        if not (self.lambda_min > 0 and self.lambda_max > 0):
            raise ValueError("lambda bounds must be positive")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.count > 1 and not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be below lambda_max")

    def lambdas(self) -> np.ndarray:
        """Grid in solve order: largest first."""
        if self.count == 1:
            return np.array([self.lambda_max])
        return np.logspace(math.log10(self.lambda_max), math.log10(self.lambda_min), self.count)


@dataclass
class SweepRow:
    lam: float
    nnz_fraction: float
    perf_gap: float
    wall_time_s: float
    status: str
    J_l1: float = math.nan
    J_polished: float = math.nan
    F: float = math.nan
    iterations: int = 0
    # kept for inspection; not written to the table
    K: Optional[np.ndarray] = field(default=None, repr=False)
    K_polished: Optional[np.ndarray] = field(default=None, repr=False)
    reports: list = field(default_factory=list, repr=False)

    def as_record(self) -> dict:
        return {
            "lambda": self.lam, "nnz_fraction": self.nnz_fraction, "perf_gap": self.perf_gap,
            "wall_time_s": self.wall_time_s, "status": self.status, "J_l1": self.J_l1,
            "J_polished": self.J_polished, "F": self.F, "iterations": self.iterations,
        }


# --- solver plumbing ---------------------------------------------------------

def run_solver(name: str, plant, cost, K0, *, tol=1e-6, max_iter=None, theta_tol=1e-8,
               time_budget=None, callback=None) -> SolveReport:
    """Dispatch to Newton-CD or ISTA with the shared option flags."""
    if name == "newton-cd":
        opts = SolverOptions(tol=tol, theta_tol=theta_tol, time_budget=time_budget,
                             **({} if max_iter is None else {"max_iter": max_iter}))
        return solve(plant, cost, K0, opts, callback)
    if name == "ista":
        if K0 is None:
            K0 = initialize(plant, cost)
        opts = IstaOptions(tol=tol, time_budget=time_budget,
                           **({} if max_iter is None else {"max_iter": max_iter}))
        return ista_solve(plant, cost, K0, opts, callback)
    raise ValueError(f"unknown solver {name!r}")


def _uniform(cost, lam: float):
    # entries pinned to infinity by a pattern keep their pin
    return cost.with_lambda(np.where(np.isinf(cost.Lambda), np.inf, lam))


def _tagged(callback, lam, stage):
    if callback is None:
        return None
    return lambda t, K, ev: callback((lam, stage), t, K, ev)


def run_sweep(plant, cost, grid: SweepSpec, *, solver: str = "newton-cd", tol: float = 1e-6,
              max_iter=None, theta_tol: float = 1e-8, time_budget=None,
              J_lqr: Optional[float] = None, callback=None) -> list[SweepRow]:
    """Solve along ``grid.lambdas()``, largest first, optionally polishing each row.

    A failed row records its error in ``status`` and the sweep continues;
    the next warm start then falls back to the default initialization.
    ``callback(label, t, K, ev)`` observes every accepted iterate, with
    ``label`` naming the row and stage (``"l1"`` or ``"polish"``).
    """
    if J_lqr is None:
        K_lqr, _ = lqr_synthesize(plant, cost)
        J_lqr = evaluate(plant, cost, K_lqr.K).J
    size = plant.m * plant.n
    rows = []
    K_prev = None
    for lam in grid.lambdas():
        c = _uniform(cost, float(lam))
        t0 = time.perf_counter()
        K0 = K_prev if grid.warm_start else None
        try:
            rep = run_solver(solver, plant, c, K0, tol=tol, max_iter=max_iter,
                             theta_tol=theta_tol, time_budget=time_budget,
                             callback=_tagged(callback, float(lam), "l1"))
        except (InitializationError, SynthesisError, ArithmeticError, ValueError) as exc:
            rows.append(SweepRow(float(lam), math.nan, math.nan, time.perf_counter() - t0,
                                 f"failed: {exc}"))
            K_prev = None
            continue
        K = rep.K.copy()
        row = SweepRow(float(lam), count_nonzero(K) / size, math.nan, 0.0, rep.status,
                       J_l1=rep.J, F=rep.F, iterations=rep.iterations, K=K, reports=[rep])
        J_final = rep.J
        if grid.polish_each:
            try:
                pol = polish(plant, cost, K != 0, K,
                             SolverOptions(tol=tol, theta_tol=theta_tol),
                             _tagged(callback, float(lam), "polish"))
            except (InitializationError, ArithmeticError, ValueError) as exc:
                row.status = f"{rep.status}; polish failed: {exc}"
            else:
                row.reports.append(pol)
                row.K_polished = pol.K.copy()
                row.J_polished = pol.J
                J_final = pol.J
        row.perf_gap = J_final / J_lqr - 1.0
        row.wall_time_s = time.perf_counter() - t0
        rows.append(row)
        K_prev = K
    return rows


# --- output helpers ----------------------------------------------------------

def _clean(x):
    """JSON-safe copy: arrays to lists, non-finite floats to null."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


REPORT_KEYS = ("command", "status", "exit_code", "message", "solver", "lambda", "K", "F", "J",
               "g", "nnz", "nnz_fraction", "iterations", "wall_time_s", "optimality",
               "lyapunov_solves", "theta_ranks", "max_real_eig", "files")


def _report(command: str, **values) -> dict:
    doc = dict.fromkeys(REPORT_KEYS)
    doc["command"] = command
    doc["files"] = []
    doc.update(values)
    return doc


def _solve_fields(rep: SolveReport) -> dict:
    K = rep.K
    return {
        "status": rep.status, "solver": rep.solver, "K": K, "F": rep.F, "J": rep.J,
        "g": rep.g, "nnz": count_nonzero(K), "nnz_fraction": count_nonzero(K) / K.size,
        "iterations": rep.iterations, "optimality": rep.optimality,
        "lyapunov_solves": rep.lyapunov_solves, "theta_ranks": rep.theta_ranks,
        "max_real_eig": -rep.gain.stability_margin,
    }


def write_trace(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TraceRow.FIELDS)
        for row in trace:
            w.writerow([repr(v) if isinstance(v, float) else v
                        for v in dataclasses.astuple(row)])


def _write_table(records, fields, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for rec in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})


# --- input helpers -----------------------------------------------------------

def _load_problem(args) -> ProblemFile:
    if args.problem is None:
        raise UsageError("--problem is required")
    try:
        prob = read_problem(args.problem)
    except FileNotFoundError:
        raise UsageError(f"problem file not found: {args.problem}") from None
    except ProblemFormatError as exc:
        raise UsageError(f"invalid problem file: {exc}") from None
    issues = validate(prob.plant, prob.cost)
    if issues:
        raise UsageError("invalid problem: " + "; ".join(issues))
    return prob


def _load_matrix(path, shape, name) -> np.ndarray:
    try:
        M = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"{name}: cannot read {path} ({exc})") from None
    if M.shape != shape:
        raise UsageError(f"{name}: shape {M.shape}, expected {shape}")
    return M


def _cost_for(args, prob: ProblemFile):
    cost = prob.cost
    shape = (prob.plant.m, prob.plant.n)
    if getattr(args, "lambda_matrix", None):
        Lam = _load_matrix(args.lambda_matrix, shape, "--lambda-matrix")
        if np.any(Lam < 0) or np.any(np.isnan(Lam)):
            raise UsageError("--lambda-matrix entries must be non-negative")
        return cost.with_lambda(Lam), None
    if getattr(args, "lam", None) is not None:
        if not args.lam >= 0:
            raise UsageError("--lambda must be non-negative")
        return _uniform(cost, args.lam), args.lam
    return cost, prob.lam


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, doc: dict, start: float) -> int:
    doc["wall_time_s"] = time.perf_counter() - start
    (out / "report.json").write_text(json.dumps(_clean(doc), indent=1))
    if doc["message"]:
        print(doc["message"], file=sys.stderr)
    return doc["exit_code"]


# --- subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    out = _out_dir(args)
    if args.kind == "mass-spring":
        if args.size < 1:
            raise UsageError("mass-spring needs --size >= 1")
        if not args.r_scale > 0:
            raise UsageError("--r-scale must be positive")
        plant, cost = mass_spring(args.size, args.r_scale)
        extra = {"generator": {"kind": "mass-spring", "N": args.size, "R_scale": args.r_scale}}
    else:
        if args.size < 2:
            raise UsageError("random-network needs --size >= 2")
        if not 0 < args.density <= 1:
            raise UsageError("--density must lie in (0, 1]")
        plant, cost = random_network(args.size, args.density, args.seed)
        extra = {"generator": {"kind": "random-network", "nodes": args.size,
                               "density": args.density, "seed": args.seed}}
    path = out / (args.name or f"{args.kind}-{args.size}.json")
    write_problem(ProblemFile(plant, cost, extra=extra), path)
    print(path)
    return EXIT_OK


def _common_solver_kwargs(args) -> dict:
    return {"tol": args.tol, "max_iter": args.max_iter, "theta_tol": args.theta_tol,
            "time_budget": args.time_budget}


def cmd_solve(args) -> int:
    start = time.perf_counter()
    prob = _load_problem(args)
    cost, lam = _cost_for(args, prob)
    out = _out_dir(args)
    doc = _report("solve", solver=args.solver, **{"lambda": lam})
    try:
        rep = run_solver(args.solver, prob.plant, cost, prob.K0, **_common_solver_kwargs(args))
    except (InitializationError, SynthesisError, ArithmeticError, ValueError) as exc:
        doc.update(status="failed", exit_code=EXIT_FAILURE, message=f"solver failed: {exc}")
        return _finish(out, doc, start)
    doc.update(_solve_fields(rep))
    write_trace(rep.trace, out / "trace.csv")
    doc["files"] = ["trace.csv"]
    doc["exit_code"] = EXIT_OK if rep.converged else EXIT_FAILURE
    if not rep.converged:
        doc["message"] = f"solver stopped without converging ({rep.status})"
    return _finish(out, doc, start)


def _load_gain(path, shape) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".json":
        try:
            K = np.asarray(json.loads(path.read_text())["K"], dtype=float)
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"--gain: cannot read K from {path} ({exc})") from None
        if K.shape != shape:
            raise UsageError(f"--gain: shape {K.shape}, expected {shape}")
        return K
    return _load_matrix(path, shape, "--gain")


def cmd_polish(args) -> int:
    start = time.perf_counter()
    prob = _load_problem(args)
    cost, lam = _cost_for(args, prob)
    out = _out_dir(args)
    doc = _report("polish", solver="newton-cd", **{"lambda": lam})
    shape = (prob.plant.m, prob.plant.n)
    try:
        if args.gain is not None:
            K = _load_gain(args.gain, shape)
        elif prob.K0 is not None and lam is None:
            K = prob.K0
        else:
            first = run_solver(args.solver, prob.plant, cost, prob.K0, **_common_solver_kwargs(args))
            K = first.K
        rep = polish(prob.plant, prob.cost, K != 0, K,
                     SolverOptions(tol=args.tol, theta_tol=args.theta_tol,
                                   time_budget=args.time_budget,
                                   **({} if args.max_iter is None else {"max_iter": args.max_iter})))
    except (InitializationError, SynthesisError, ArithmeticError, ValueError) as exc:
        doc.update(status="failed", exit_code=EXIT_FAILURE, message=f"polish failed: {exc}")
        return _finish(out, doc, start)
    doc.update(_solve_fields(rep))
    doc["g"] = 0.0
    doc["F"] = rep.J
    write_trace(rep.trace, out / "trace.csv")
    doc["files"] = ["trace.csv"]
    doc["exit_code"] = EXIT_OK if rep.converged else EXIT_FAILURE
    if not rep.converged:
        doc["message"] = f"polish stopped without converging ({rep.status})"
    return _finish(out, doc, start)


def cmd_sweep(args) -> int:
    start = time.perf_counter()
    prob = _load_problem(args)
    try:
        grid = SweepSpec(args.lambda_min, args.lambda_max, args.count,
                         polish_each=not args.no_polish, warm_start=not args.no_warm_start)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    doc = _report("sweep", solver=args.solver)
    try:
        rows = run_sweep(prob.plant, prob.cost, grid, solver=args.solver,
                         **_common_solver_kwargs(args))
    except (SynthesisError, ArithmeticError, ValueError) as exc:
        doc.update(status="failed", exit_code=EXIT_FAILURE, message=f"sweep failed: {exc}")
        return _finish(out, doc, start)
    _write_table([r.as_record() for r in rows], SWEEP_FIELDS, out / "sweep.csv")
    failed = [r for r in rows if r.status.startswith("failed") or "polish failed" in r.status]
    doc.update(status="completed" if not failed else "completed_with_failures",
               files=["sweep.csv"], exit_code=EXIT_OK if not failed else EXIT_FAILURE,
               iterations=sum(r.iterations for r in rows))
    if failed:
        doc["message"] = f"{len(failed)} of {len(rows)} sweep rows failed"
    return _finish(out, doc, start)


def cmd_bench(args) -> int:
    start = time.perf_counter()
    if args.lam is None and args.lambda_matrix is None:
        raise UsageError("bench needs --lambda or --lambda-matrix")
    prob = _load_problem(args)
    cost, lam = _cost_for(args, prob)
    out = _out_dir(args)
    solvers =[s.strip() for s in args.solvers.split(",") if s.strip()]
    bad = [s for s in solvers if s not in SOLVERS]
    if bad or not solvers:
        raise UsageError(f"unknown solver(s): {', '.join(bad) or '(none)'}")
    doc = _report("bench", solver=",".join(solvers), **{"lambda": lam})
    try:
        K0 = prob.K0 if prob.K0 is not None else initialize(prob.plant, cost).K
    except (InitializationError, SynthesisError, ArithmeticError) as exc:
        doc.update(status="failed", exit_code=EXIT_FAILURE, message=f"initialization failed: {exc}")
        return _finish(out, doc, start)
    results = {}
    for name in solvers:
        try:
            results[name] = run_solver(name, prob.plant, cost, K0, **_common_solver_kwargs(args))
        except (InitializationError, ArithmeticError, ValueError) as exc:
            log.warning("%s failed: %s", name, exc)
            results[name] = None
    finished = {k: v for k, v in results.items() if v is not None}
    if not finished:
        doc.update(status="failed", exit_code=EXIT_FAILURE, message="every solver failed")
        return _finish(out, doc, start)
    f_star = min(min(r.objective_F for r in rep.trace) for rep in finished.values())
    records = []
    for name, rep in finished.items():
        for r in rep.trace:
            records.append({"solver": name, "iter": r.iter, "time_s": r.time_s,
                            "objective_F": r.objective_F, "f_star": f_star,
                            "F_minus_f_star": r.objective_F - f_star})
    _write_table(records, BENCH_FIELDS, out / "bench.csv")
    best = min(finished.values(), key=lambda r: r.F)
    doc.update(_solve_fields(best))
    doc.update(status="completed", solver=",".join(solvers), files=["bench.csv"],
               exit_code=EXIT_OK if len(finished) == len(solvers) else EXIT_FAILURE,
               solver_status={k: (v.status if v is not None else "failed")
                              for k, v in results.items()},
               f_star=f_star)
    return _finish(out, doc, start)


def cmd_lqr(args) -> int:
    start = time.perf_counter()
    prob = _load_problem(args)
    out = _out_dir(args)
    doc = _report("lqr", solver="care")
    try:
        gain, _ = lqr_synthesize(prob.plant, prob.cost)
    except SynthesisError as exc:
        doc.update(status="failed", exit_code=EXIT_FAILURE, message=f"synthesis failed: {exc}")
        return _finish(out, doc, start)
    ev = evaluate(prob.plant, prob.cost, gain.K)
    nnz = count_nonzero(gain.K)
    doc.update(status="converged", exit_code=EXIT_OK, K=gain.K, J=ev.J, F=ev.J, g=0.0,
               nnz=nnz, nnz_fraction=nnz / gain.K.size, iterations=0,
               max_real_eig=-gain.stability_margin)
    return _finish(out, doc, start)


# --- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="sparselqr-out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    prob = argparse.ArgumentParser(add_help=False)
    prob.add_argument("--problem", help="problem file (JSON)")

    lam = argparse.ArgumentParser(add_help=False)
    grp = lam.add_mutually_exclusive_group()
    grp.add_argument("--lambda", dest="lam", type=float, help="uniform l1 weight")
    grp.add_argument("--lambda-matrix", help="CSV file with the (m, n) weight matrix")

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--solver", choices=SOLVERS, default="newton-cd")
    solver.add_argument("--tol", type=float, default=1e-6)
    solver.add_argument("--max-iter", type=int, default=None)
    solver.add_argument("--theta-tol", type=float, default=1e-8)
    solver.add_argument("--time-budget", type=float, default=None, metavar="SECONDS")

    parser = _Parser(prog="sparselqr", description="Sparse LQR feedback design.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a benchmark problem file")
    g.add_argument("kind", choices=("mass-spring", "random-network"))
    g.add_argument("--size", "-N", type=int, required=True,
                   help="masses (mass-spring) or nodes (random-network)")
    g.add_argument("--r-scale", type=float, default=10.0)
    g.add_argument("--density", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", help="file name inside --out")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", parents=[common, prob, lam, solver], help="solve one problem")
    s.set_defaults(func=cmd_solve)

    p = sub.add_parser("polish", parents=[common, prob, lam, solver],
                       help="re-optimize J on a fixed sparsity pattern")
    p.add_argument("--gain", help="gain to polish (CSV, or a report.json)")
    p.set_defaults(func=cmd_polish)

    w = sub.add_parser("sweep", parents=[common, prob, solver], help="regularization path")
    w.add_argument("--lambda-min", type=float, default=1e-2)
    w.add_argument("--lambda-max", type=float, default=1e2)
    w.add_argument("--count", type=int, default=20)
    w.add_argument("--no-warm-start", action="store_true")
    w.add_argument("--no-polish", action="store_true")
    w.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", parents=[common, prob, lam, solver],
                       help="compare solvers from a shared start")
    b.add_argument("--solvers", default="newton-cd,ista", help="comma-separated list")
    b.set_defaults(func=cmd_bench)

    q = sub.add_parser("lqr", parents=[common, prob], help="unregularized LQR gain")
    q.set_defaults(func=cmd_lqr)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sparselqr {args.command}: error: {exc}", file=sys.stderr)
        doc = _report(args.command, status="usage_error", exit_code=EXIT_USAGE, message=str(exc))
        try:
            out = _out_dir(args)
            (out / "report.json").write_text(json.dumps(_clean(doc), indent=1))
        except OSError:
            pass
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
