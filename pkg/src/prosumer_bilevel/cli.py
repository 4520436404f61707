"""Command-line harness.

Subcommands: ``gen``, ``validate``, ``reduce``, ``solve``, ``oracle``,
``compare``, ``bench``, ``simulate``.  Exit codes: 0 success, 1 usage,
I/O, parse or solver failure (and a FAIL verdict from ``compare``),
2 hypothesis violation, 3 infeasible instance, 4 unbounded instance.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import DEFAULT, Tolerances
from .cvx_solver import certify_bilevel, solve_cvx
from .errors import (
    BilevelError,
    HypothesisViolated,
    Infeasible,
    InfeasibleBlock,
    Unbounded,
)
from .generator import GeneratorConfig, generate_profiles
from .market_model import (
    BOUND_MODES,
    HYPOTHESES,
    assemble,
    load_profiles,
    profiles_to_json,
    reconstruct_demand,
    validate,
)
from .oracle import grid_steps_for, oracle_grid, oracle_multistart
from .reduction import reduce_instance, write_matrix_text
from .sweep import ORACLE_BUDGET
from .simulate import bench_to_csv, loglog_slope, read_price_series, run_bench, run_simulate

EXIT_OK, EXIT_FAIL, EXIT_HYPOTHESIS, EXIT_INFEASIBLE, EXIT_UNBOUNDED = 0, 1, 2, 3, 4


def _tolerances(tol: float | None) -> Tolerances:
    """``--tol`` overrides the solver stopping tolerances (QP and KKT)."""
    if tol is None:
        return DEFAULT
    return dataclasses.replace(DEFAULT, kkt=tol, cvx_primal=tol, cvx_dual=tol)


def _load(path, tol: Tolerances):
    profiles, prices = load_profiles(path)
    return profiles, prices, assemble(profiles, prices, tol)


# --------------------------------------------------------------------------
# library entry points (also used by the tests)


def run_solve(path, bound_mode: str = "both", force: bool = False, tol: Tolerances = DEFAULT) -> dict:
    _, _, inst = _load(path, tol)
    red = reduce_instance(inst, tol)
    sol = solve_cvx(red, inst, bound_mode, force=force, tol=tol)
    cert = certify_bilevel(inst, red, sol, bound_mode, tol)
    sol = dataclasses.replace(sol, certified=cert.passed)
    out = sol.to_dict()
    out["certificate"] = cert.to_dict()
    out["demand"] = reconstruct_demand(inst, sol.y).tolist()
    return out


def run_oracle(path, bound_mode: str = "both", method: str = "grid", steps: int | None = None,
               rounds: int = 5, starts: int = 32, seed: int = 0, tol: Tolerances = DEFAULT) -> dict:
    _, _, inst = _load(path, tol)
    inst = inst.with_bound_mode(bound_mode)
    if method == "grid":
        res = oracle_grid(inst, coarse_steps=steps or grid_steps_for(inst.m, ORACLE_BUDGET),
                          refine_rounds=rounds, tol=tol)
    else:
        res = oracle_multistart(inst, starts=starts, seed=seed, rounds=rounds, tol=tol)
    return res.to_dict()


def run_compare(path, bound_mode: str = "both", force: bool = False, steps: int | None = None,
                rounds: int = 5, tol: Tolerances = DEFAULT) -> dict:
    """Convex solve against the grid oracle on one instance.

    PASS iff ``|phi_cvx - phi_oracle| <= 1e-3 (1 + |phi_oracle|)`` and the
    convex solution certifies against the lower level.  The distance between
    the two argmins is reported only: optima need not be unique.
    """
    _, _, inst = _load(path, tol)
    red = reduce_instance(inst, tol)
    sol = solve_cvx(red, inst, bound_mode, force=force, tol=tol)
    cert = certify_bilevel(inst, red, sol, bound_mode, tol)
    orc = oracle_grid(inst.with_bound_mode(bound_mode),
                      coarse_steps=steps or grid_steps_for(inst.m, ORACLE_BUDGET),
                      refine_rounds=rounds, tol=tol)
    gap = abs(sol.phi - orc.best_phi)
    allowed = 1e-3 * (1.0 + abs(orc.best_phi))
    passed = gap <= allowed and cert.passed
    return {
        "verdict": "PASS" if passed else "FAIL",
        "bound_mode": bound_mode,
        "phi_cvx": sol.phi,
        "phi_oracle": orc.best_phi,
        "phi_gap": gap,
        "phi_gap_allowed": allowed,
        "argmin_distance": float(np.max(np.abs(sol.x - orc.best_x))),
        "cvx": {**sol.to_dict(), "certified": cert.passed, "certificate": cert.to_dict(),
                "demand": reconstruct_demand(inst, sol.y).tolist()},
        "oracle": orc.to_dict(),
    }


# --------------------------------------------------------------------------
# argument handling


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", "-i", help="instance JSON (or price CSV where noted)")
    p.add_argument("--output", "-o", help="write the result here instead of stdout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=None, help="solver stopping tolerance")
    p.add_argument("--force", action="store_true", help="downgrade hypothesis violations to warnings")
    p.add_argument("--threads", type=int, default=1)


def _bound_mode(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bound-mode", choices=BOUND_MODES, default="both")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prosumer-bilevel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a random instance")
    _common(p)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--no-hypothesis-mode", dest="hypothesis_mode", action="store_false")
    p.add_argument("--allow-net-consumers", dest="net_producer", action="store_false",
                   help="let total demand exceed generation (the pricing problem is then unbounded)")

    p = sub.add_parser("validate", help="check profile invariants and solver hypotheses")
    _common(p)
    _bound_mode(p)

    p = sub.add_parser("reduce", help="compute (M, r) and its certificates")
    _common(p)
    p.add_argument("--matrix", help="dump dense M as text to this path")

    p = sub.add_parser("solve", help="solve the convex surrogate")
    _common(p)
    _bound_mode(p)

    p = sub.add_parser("oracle", help="brute-force global search")
    _common(p)
    _bound_mode(p)
    p.add_argument("--method", choices=("grid", "multistart"), default="grid")
    p.add_argument("--steps", type=int, default=None, help="grid points per axis")
    p.add_argument("--rounds", type=int, default=5, help="refinement rounds")
    p.add_argument("--starts", type=int, default=32)

    p = sub.add_parser("compare", help="convex solve against the grid oracle")
    _common(p)
    _bound_mode(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--rounds", type=int, default=5)

    p = sub.add_parser("bench", help="time the convex solver, CSV out")
    _common(p)
    p.add_argument("--sizes", type=_int_list, default=[20, 200, 2000, 19200])
    p.add_argument("--seeds", type=_int_list, default=[0])

    p = sub.add_parser("simulate", help="receding-horizon settlement")
    _common(p)
    p.add_argument("--intervals", "-T", type=int, required=True)
    p.add_argument("--prices", help="CSV interval,k,price; defaults to the instance grid prices")
    return parser


def _emit(args, text: str) -> None:
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _need_input(args) -> str:
    if not args.input:
        raise ValueError(f"{args.command}: --input is required")
    return args.input


def _dispatch(args) -> int:
    tol = _tolerances(args.tol)
    cmd = args.command

    if cmd == "gen":
        cfg = GeneratorConfig(n=args.n, K=args.K, seed=args.seed,
                              hypothesis_mode=args.hypothesis_mode, net_producer=args.net_producer)
        profiles, prices = generate_profiles(cfg)
        _emit(args, profiles_to_json(profiles, prices))
        return EXIT_OK

    if cmd == "validate":
        _, _, inst = _load(_need_input(args), tol)
        inst = inst.with_bound_mode(args.bound_mode)
        report = validate(inst, reduce_instance(inst, tol), tol)
        failed = report.failed(HYPOTHESES[args.bound_mode])
        _emit(args, _dump({"bound_mode": args.bound_mode, "hypotheses_failed": failed, **report.to_dict()}))
        return EXIT_HYPOTHESIS if failed else EXIT_OK

    if cmd == "reduce":
        _, _, inst = _load(_need_input(args), tol)
        red = reduce_instance(inst, tol)
        if args.matrix:
            write_matrix_text(args.matrix, red.M)
        _emit(args, _dump({
            "r": red.r.tolist(),
            "block_size": red.block_size,
            "cert_psd": dataclasses.asdict(red.cert_psd),
            "cert_mmatrix": dataclasses.asdict(red.cert_mmatrix),
            "cert_structured": red.cert_structured,
        }))
        return EXIT_OK

    if cmd == "solve":
        _emit(args, _dump(run_solve(_need_input(args), args.bound_mode, args.force, tol)))
        return EXIT_OK

    if cmd == "oracle":
        _emit(args, _dump(run_oracle(_need_input(args), args.bound_mode, args.method, args.steps,
                                     args.rounds, args.starts, args.seed, tol)))
        return EXIT_OK

    if cmd == "compare":
        report = run_compare(_need_input(args), args.bound_mode, args.force, args.steps, args.rounds, tol)
        _emit(args, _dump(report))
        print(f"{report['verdict']} phi_cvx={report['phi_cvx']:.10g} phi_oracle={report['phi_oracle']:.10g} "
              f"gap={report['phi_gap']:.3g} argmin_distance={report['argmin_distance']:.3g}", file=sys.stderr)
        return EXIT_OK if report["verdict"] == "PASS" else EXIT_FAIL

    if cmd == "bench":
        records = run_bench(args.sizes, args.seeds, args.threads)
        _emit(args, bench_to_csv(records))
        if len({r.m for r in records}) > 1:
            print(f"log-log slope of wall time vs m: {loglog_slope(records):.3f}", file=sys.stderr)
        return EXIT_OK

    if cmd == "simulate":
        profiles, prices = load_profiles(_need_input(args))
        table = read_price_series(args.prices) if args.prices else None
        rows = run_simulate(profiles, prices, args.intervals, table, force=args.force)
        _emit(args, _dump([dataclasses.asdict(r) for r in rows]))
        return EXIT_OK

    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except HypothesisViolated as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (Infeasible, InfeasibleBlock) as exc:
        print(f"error: infeasible instance: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Unbounded as exc:
        print(f"error: unbounded instance: {exc}", file=sys.stderr)
        return EXIT_UNBOUNDED
    except (BilevelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
