"""Seeded convex-vs-oracle agreement sweeps over small random instances."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .cvx_solver import certify_bilevel, solve_cvx
from .generator import GeneratorConfig, generate
from .market_model import HYPOTHESES, validate
from .oracle import grid_steps_for, oracle_grid
from .reduction import reduce_instance

SHAPES = ((1, 2), (1, 3), (2, 2), (1, 4), (2, 3))
ORACLE_BUDGET = 100_000  # grid points per oracle call


@dataclass(frozen=True)
class SweepRecord:
    seed: int
    n: int
    K: int
    bound_mode: str
    hypotheses_ok: bool
    phi_cvx: float
    phi_oracle: float
    phi_gap: float
    phi_gap_allowed: float
    response_residual: float
    certified: bool
    argmin_distance: float

    @property
    def oracle_below(self) -> bool:
        """The oracle beat the convex optimum, which the recovery result rules out."""
        return self.phi_oracle < self.phi_cvx - 1e-6

    @property
    def passed(self) -> bool:
        return (self.hypotheses_ok and self.certified and self.response_residual <= 1e-6
                and self.phi_gap <= self.phi_gap_allowed and not self.oracle_below)


def sweep_instance(seed: int, bound_mode: str = "both", budget: int = ORACLE_BUDGET) -> SweepRecord:
    n, K = SHAPES[seed % len(SHAPES)]
    inst = generate(GeneratorConfig(n=n, K=K, seed=seed))
    red = reduce_instance(inst)
    view = inst.with_bound_mode(bound_mode)
    hyp_ok = not validate(view, red).failed(HYPOTHESES[bound_mode])
    sol = solve_cvx(red, inst, bound_mode)
    cert = certify_bilevel(inst, red, sol, bound_mode)
    orc = oracle_grid(view, coarse_steps=grid_steps_for(inst.m, budget))
    return SweepRecord(
        seed=seed, n=n, K=K, bound_mode=bound_mode, hypotheses_ok=hyp_ok,
        phi_cvx=sol.phi, phi_oracle=orc.best_phi,
        phi_gap=abs(sol.phi - orc.best_phi),
        phi_gap_allowed=1e-3 * (1.0 + abs(orc.best_phi)),
        response_residual=cert.response_residual, certified=cert.passed,
        argmin_distance=float(np.max(np.abs(sol.x - orc.best_x))),
    )


def run_sweep(count: int, bound_mode: str = "both", start_seed: int = 0,
              budget: int = ORACLE_BUDGET) -> list[SweepRecord]:
    return [sweep_instance(s, bound_mode, budget) for s in range(start_seed, start_seed + count)]


def sweep_to_csv(records) -> str:
    buf = io.StringIO()
    fields = list(SweepRecord.__dataclass_fields__) + ["passed"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({**asdict(rec), "passed": rec.passed})
    return buf.getvalue()
