"""Rolling-horizon market simulation and runtime benchmarks."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cvx_solver import solve_cvx
from .generator import GeneratorConfig, generate
from .market_model import ProsumerProfile, assemble
from .reduction import reduce_instance


# --------------------------------------------------------------------------
# receding horizon


def read_price_series(path) -> dict[tuple[int, int], float]:
    """CSV ``interval,k,price`` -> ``{(interval, k): price}``."""
    path = Path(path)
    table: dict[tuple[int, int], float] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"interval", "k", "price"} <= set(reader.fieldnames):
            raise ValueError(f"{path}:1: header must contain interval,k,price")
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (int(row["interval"]), int(row["k"]))
                price = float(row["price"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not np.isfinite(price):
                raise ValueError(f"{path}:{lineno}: non-finite price")
            table[key] = price
    return table


def _rebalance(h0: np.ndarray, lb: np.ndarray, ub: np.ndarray, target: float) -> np.ndarray:
    """Shift preferred demand to sum to ``target`` while staying in bounds.

    The gap is spread proportionally to the room each step has toward the
    bound it moves to.
    """
    gap = target - h0.sum()
    room = (ub - h0) if gap > 0 else (h0 - lb)
    total = room.sum()
    if abs(gap) <= 1e-12 or total <= 0:
        return h0.copy()
    return h0 + gap * room / total


def _remaining_profile(prof: ProsumerProfile, t: int, consumed: float, s: np.ndarray) -> ProsumerProfile:
    lb, ub = prof.h_lb[t:], prof.h_ub[t:]
    remaining = float(np.clip(prof.h_tot - consumed, lb.sum(), ub.sum()))
    h0 = _rebalance(prof.h0[t:], lb, ub, remaining)
    return ProsumerProfile(q=prof.q[t:], h0=h0, h_lb=lb, h_ub=ub, h_tot=float(h0.sum()), s=s)


@dataclass(frozen=True)
class Settlement:
    interval: int
    grid_price: float
    x: list[float]
    y: list[float]
    h: list[float]
    aggregator_profit: float


def run_simulate(
    profiles: Sequence[ProsumerProfile],
    grid_prices: np.ndarray,
    intervals: int,
    price_table: dict[tuple[int, int], float] | None = None,
    force: bool = False,
) -> list[Settlement]:
    """Re-solve the remaining horizon each interval and settle its first step.

    At interval ``t`` the instance covers steps ``t..K-1`` with prices from
    ``price_table[(t, k)]`` (or the base ``grid_prices``) and each prosumer's
    remaining total demand; only step ``t`` is applied.
    """
    K = len(profiles[0].q)
    if not 1 <= intervals <= K:
        raise ValueError(f"intervals must be in [1, {K}]")
    consumed = np.zeros(len(profiles))
    out = []
    for t in range(intervals):
        if price_table is None:
            prices = np.asarray(grid_prices, dtype=float)[t:]
        else:
            missing = [k for k in range(t, K) if (t, k) not in price_table]
            if missing:
                raise ValueError(f"price series has no entry for interval {t}, k={missing[0]}")
            prices = np.array([price_table[(t, k)] for k in range(t, K)])
        rem = [_remaining_profile(pr, t, consumed[i], pr.s[t:]) for i, pr in enumerate(profiles)]
        inst = assemble(rem, prices)
        sol = solve_cvx(reduce_instance(inst), inst, force=force)
        first = np.arange(inst.n) * inst.K
        x, y = sol.x[first], sol.y[first]
        h = inst.s[first] - y
        consumed += h
        out.append(Settlement(
            interval=t,
            grid_price=float(prices[0]),
            x=x.tolist(),
            y=y.tolist(),
            h=h.tolist(),
            aggregator_profit=float((prices[0] - x) @ y),
        ))
    return out


# --------------------------------------------------------------------------
# benchmarks


@dataclass(frozen=True)
class BenchRecord:
    m: int
    n: int
    K: int
    seed: int
    solver: str
    wall_time: float
    iterations: int
    phi: float
    primal_residual: float
    dual_residual: float


BENCH_FIELDS = list(BenchRecord.__dataclass_fields__)


def shape_for(m: int) -> tuple[int, int]:
    """``(n, K)`` used for a benchmark size: day-ahead K=96 when it divides."""
    for K in (96, 10):
        if m % K == 0 and m >= K:
            return m // K, K
    return 1, m


def bench_one(m: int, seed: int) -> BenchRecord:
    n, K = shape_for(m)
    inst = generate(GeneratorConfig(n=n, K=K, seed=seed))
    t0 = time.perf_counter()
    red = reduce_instance(inst)
    sol = solve_cvx(red, inst)
    wall = time.perf_counter() - t0
    return BenchRecord(
        m=m, n=n, K=K, seed=seed, solver="cvx", wall_time=wall,
        iterations=int(sol.residuals["iterations"]), phi=sol.phi,
        primal_residual=sol.residuals["primal"], dual_residual=sol.residuals["dual"],
    )


def run_bench(sizes: Sequence[int], seeds: Sequence[int], threads: int = 1) -> list[BenchRecord]:
    jobs = [(m, s) for m in sizes for s in seeds]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda ms: bench_one(*ms), jobs))
    return [bench_one(m, s) for m, s in jobs]


def bench_to_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(asdict(rec))
    return buf.getvalue()


def bench_from_csv(text: str) -> list[BenchRecord]:
    types = {name: f.type for name, f in BenchRecord.__dataclass_fields__.items()}
    conv = {"int": int, "float": float, "str": str}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(BenchRecord(**{k: conv[types[k]](v) for k, v in row.items()}))
    return out


def loglog_slope(records: Sequence[BenchRecord]) -> float:
    """Least-squares slope of log(wall time) against log(m), averaged per size."""
    sizes = sorted({r.m for r in records})
    times = [np.mean([r.wall_time for r in records if r.m == m]) for m in sizes]
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
