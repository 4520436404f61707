"""Brute-force global search over aggregator prices.

The bilevel cost ``phi(x) = (x - p)' LLP(x)`` is evaluated directly with the
exact lower-level solver at every candidate, so nothing here depends on the
reduced model under test.  A full grid over ``[0, x_max]^m`` is followed by
rounds of batched line searches in a shrinking box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .config import DEFAULT, Tolerances
from .errors import DimensionTooLarge, InfeasibleBlock, Infeasible
from .llp_solver import solve_llp_batch
from .market_model import MarketInstance

MAX_GRID_DIM = 6
LINE_POINTS = 65
LINE_LEVELS = 4
CHUNK = 40_000
POOL = 64
POLISHED = 2


@dataclass(frozen=True)
class OracleResult:
    best_x: np.ndarray
    best_y: np.ndarray
    best_phi: float
    method: str
    x_max: np.ndarray
    coarse_steps: int = 0
    refine_rounds: int = 0
    evaluations: int = 0
    grid_phi: float = math.nan
    boundary: tuple[int, ...] = field(default=())  # coordinates at x_max: suspect

    def to_dict(self) -> dict:
        return {
            "x": self.best_x.tolist(),
            "y": self.best_y.tolist(),
            "phi": self.best_phi,
            "method": self.method,
            "x_max": self.x_max.tolist(),
            "coarse_steps": self.coarse_steps,
            "refine_rounds": self.refine_rounds,
            "evaluations": self.evaluations,
            "grid_phi": None if math.isnan(self.grid_phi) else self.grid_phi,
            "boundary": list(self.boundary),
        }


class _Objective:
    """Counts evaluations of ``phi`` on single points and batches."""

    def __init__(self, instance: MarketInstance, tol: Tolerances):
        self.inst = instance
        self.tol = tol
        self.count = 0

    def batch(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Y = solve_llp_batch(self.inst, X, self.tol, check=False)
        self.count += X.shape[0]
        return np.einsum("bi,bi->b", X - self.inst.p, Y), Y

    def __call__(self, x: np.ndarray) -> float:
        return float(self.batch(x[None])[0][0])


def default_x_max(instance: MarketInstance, reduced=None) -> np.ndarray:
    """Per-coordinate search bound ``|p| + |c| + q*(u - ell) + 1``.

    A missing bound (one-sided variants) is replaced by twice the distance
    from the present bound to the unconstrained response ``r``.
    """
    inst = instance
    r = reduced.r if reduced is not None else -inst.c / inst.q
    width = inst.u - inst.ell
    lower_only = np.isfinite(inst.ell) & ~np.isfinite(inst.u)
    upper_only = ~np.isfinite(inst.ell) & np.isfinite(inst.u)
    width = np.where(lower_only, 2.0 * (np.abs(r - np.where(lower_only, inst.ell, 0.0)) + 1.0), width)
    width = np.where(upper_only, 2.0 * (np.abs(np.where(upper_only, inst.u, 0.0) - r) + 1.0), width)
    width = np.where(np.isfinite(width), width, 2.0 * (np.abs(r) + 1.0))
    return np.abs(inst.p) + np.abs(inst.c) + inst.q * width + 1.0


def _line_search(obj: "_Objective", x: np.ndarray, direction: np.ndarray,
                 t_lo: float, t_hi: float) -> tuple[float, float]:
    """Minimize ``phi(x + t*direction)`` over ``[t_lo, t_hi]`` by nested grids.

    Each level evaluates ``LINE_POINTS`` points in one batched lower-level
    solve and zooms into the cells around the best one.  Unlike golden
    section this does not assume unimodality along the line.
    """
    best_t, best_f = 0.0, math.inf
    lo, hi = t_lo, t_hi
    for _ in range(LINE_LEVELS):
        ts = np.linspace(lo, hi, LINE_POINTS)
        vals, _ = obj.batch(x[None, :] + ts[:, None] * direction[None, :])
        i = int(np.argmin(vals))
        if vals[i] < best_f:
            best_t, best_f = float(ts[i]), float(vals[i])
        step = (hi - lo) / (LINE_POINTS - 1)
        lo, hi = max(t_lo, best_t - step), min(t_hi, best_t + step)
        if hi - lo <= 1e-14 * (1.0 + abs(best_t)):
            break
    return best_t, best_f


def _box_room(x: np.ndarray, direction: np.ndarray, x_max: np.ndarray) -> tuple[float, float]:
    """Interval of ``t`` keeping ``x + t*direction`` inside ``[0, x_max]``."""
    pos, neg = direction > 0, direction < 0
    t_hi = min(np.min((x_max - x)[pos] / direction[pos], initial=np.inf),
               np.min(-x[neg] / direction[neg], initial=np.inf))
    t_lo = max(np.max(-x[pos] / direction[pos], initial=-np.inf),
               np.max((x_max - x)[neg] / direction[neg], initial=-np.inf))
    return float(t_lo), float(t_hi)


def _coordinate_descent(obj: _Objective, x: np.ndarray, fx: float, half: np.ndarray,
                        x_max: np.ndarray, rounds: int, block_dirs: np.ndarray | None = None,
                        max_sweeps: int = 50, seed: int = 0) -> tuple[np.ndarray, float]:
    """Line searches along the axes inside a shrinking box.

    Within a round, sweeps repeat until nothing improves.  Besides the
    coordinate axes each sweep searches along ``block_dirs`` (the per-prosumer
    uniform shifts, which only move the cost linearly) and along the sweep's
    net displacement, so valleys that are not axis aligned are followed.
    A few seeded random directions per sweep get it off kinks where every
    fixed direction is an ascent direction.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, float).copy()
    half = half.copy()
    m = x.size
    axes = list(np.eye(m))
    extra = [] if block_dirs is None else list(block_dirs)
    for _ in range(rounds):
        for _sweep in range(max_sweeps):
            start, f_start = x.copy(), fx
            randoms = list(rng.normal(size=(m, m)))
            for j, direction in enumerate(axes + extra + randoms + [x - start]):
                if not np.any(direction != 0):
                    continue
                t_lo, t_hi = _box_room(x, direction, x_max)
                reach = (half[j] if j < m else float(np.max(half))) / float(np.max(np.abs(direction)))
                t_lo, t_hi = max(t_lo, -reach), min(t_hi, reach)
                if t_hi <= t_lo:
                    continue
                t, ft = _line_search(obj, x, direction, t_lo, t_hi)
                if ft < fx:
                    x, fx = np.clip(x + t * direction, 0.0, x_max), ft
            if f_start - fx <= 1e-13 * (1.0 + abs(fx)):
                break
        half *= 0.5
    return x, fx


def _simplex_polish(obj: _Objective, x: np.ndarray, fx: float, x_max: np.ndarray,
                    restarts: int = 5) -> tuple[np.ndarray, float]:
    """Restarted bounded Nelder-Mead; follows kinked valleys that line
    searches along fixed directions cannot."""
    bounds = list(zip(np.zeros_like(x_max), x_max))
    for _ in range(restarts):
        res = minimize(obj, x, method="Nelder-Mead", bounds=bounds,
                       options={"xatol": 1e-10, "fatol": 1e-15, "maxfev": 200 * x.size ** 2,
                                "adaptive": True})
        if not res.fun < fx - 1e-15 * (1.0 + abs(fx)):
            break
        x, fx = np.clip(res.x, 0.0, x_max), float(res.fun)
    return x, fx


def _block_directions(instance: MarketInstance) -> np.ndarray:
    return np.kron(np.eye(instance.n), np.ones(instance.K))


def _separated(X: np.ndarray, f: np.ndarray, gap: np.ndarray, count: int):
    """Greedily pick up to ``count`` rows of sorted ``X`` pairwise ``gap`` apart."""
    chosen = []
    for i in range(len(f)):
        if all(np.any(np.abs(X[i] - X[j]) > gap) for j in chosen):
            chosen.append(i)
            if len(chosen) == count:
                break
    return X[chosen], f[chosen]


def _check_llp_feasible(instance: MarketInstance, tol: Tolerances) -> None:
    try:
        solve_llp_batch(instance, np.zeros((1, instance.m)), tol)
    except InfeasibleBlock as exc:
        raise Infeasible(str(exc)) from exc


def oracle_grid(
    instance: MarketInstance,
    x_max=None,
    coarse_steps: int = 61,
    refine_rounds: int = 5,
    starts: int = 6,
    tol: Tolerances = DEFAULT,
) -> OracleResult:
    """Exhaustive grid over ``[0, x_max]^m`` plus local refinement.

    Refinement starts from up to ``starts`` of the best grid points that are
    at least 1.5 grid spacings apart, so a coarse grid that ranks the wrong
    basin first can still recover.
    """
    m = instance.m
    if m > MAX_GRID_DIM:
        raise DimensionTooLarge(f"grid oracle limited to m <= {MAX_GRID_DIM}, got m={m}")
    _check_llp_feasible(instance, tol)
    x_max = default_x_max(instance) if x_max is None else np.broadcast_to(np.asarray(x_max, float), (m,)).copy()
    if np.any(x_max <= 0):
        raise ValueError("x_max must be positive")
    steps = max(2, int(coarse_steps))
    axes = [np.linspace(0.0, xm, steps) for xm in x_max]
    obj = _Objective(instance, tol)

    # keep the best few grid points; ties resolve to the earliest in
    # row-major order (first coordinate slowest) via the stable sort
    pool_x, pool_f = np.empty((0, m)), np.empty(0)
    total = steps ** m
    for start in range(0, total, CHUNK):
        idx = np.arange(start, min(start + CHUNK, total))
        chunk = np.stack([ax[i] for ax, i in zip(axes, np.unravel_index(idx, (steps,) * m))], axis=1)
        vals, _ = obj.batch(chunk)
        keep = np.argsort(vals, kind="stable")[:POOL]
        pool_x = np.concatenate([pool_x, chunk[keep]])
        pool_f = np.concatenate([pool_f, vals[keep]])
        order = np.argsort(pool_f, kind="stable")[:POOL]
        pool_x, pool_f = pool_x[order], pool_f[order]
    grid_phi = float(pool_f[0])

    spacing = x_max / (steps - 1)
    dirs = _block_directions(instance)
    if refine_rounds <= 0:
        x, fx = pool_x[0], float(pool_f[0])
    else:
        refined = [
            _coordinate_descent(obj, x0, f0, 2.0 * spacing, x_max, refine_rounds, dirs)
            for x0, f0 in zip(*_separated(pool_x, pool_f, 1.5 * spacing, starts))
        ]
        refined.sort(key=lambda xf: xf[1])
        x, fx = min((_simplex_polish(obj, xr, fr, x_max) for xr, fr in refined[:POLISHED]),
                    key=lambda xf: xf[1])
    y = solve_llp_batch(instance, x[None], tol)[0]
    boundary = tuple(int(j) for j in np.flatnonzero(x >= x_max * (1 - 1e-12)))
    return OracleResult(
        best_x=x, best_y=y, best_phi=fx, method="grid", x_max=x_max,
        coarse_steps=steps, refine_rounds=refine_rounds, evaluations=obj.count,
        grid_phi=grid_phi, boundary=boundary,
    )


def oracle_multistart(
    instance: MarketInstance,
    reduced=None,
    starts: int = 32,
    seed: int = 0,
    rounds: int = 8,
    x_max=None,
    tol: Tolerances = DEFAULT,
) -> OracleResult:
    """Best of coordinate descents from ``starts`` points; the first is ``x = 0``."""
    m = instance.m
    _check_llp_feasible(instance, tol)
    x_max = default_x_max(instance, reduced) if x_max is None else np.asarray(x_max, float)
    rng = np.random.default_rng(seed)
    obj = _Objective(instance, tol)
    best_x, best_phi = None, math.inf
    for s in range(max(1, starts)):
        x0 = np.zeros(m) if s == 0 else rng.uniform(0.0, x_max)
        x, fx = _coordinate_descent(obj, x0, obj(x0), x_max.copy(), x_max, rounds,
                                    _block_directions(instance))
        if fx < best_phi:
            best_x, best_phi = x, fx
    y = solve_llp_batch(instance, best_x[None], tol)[0]
    boundary = tuple(int(j) for j in np.flatnonzero(best_x >= x_max * (1 - 1e-12)))
    return OracleResult(
        best_x=best_x, best_y=y, best_phi=best_phi, method="multistart", x_max=x_max,
        refine_rounds=rounds, evaluations=obj.count, boundary=boundary,
    )


def grid_steps_for(m: int, budget: int = 200_000, cap: int = 61) -> int:
    """Largest per-axis resolution whose full grid stays within ``budget``."""
    return max(3, min(cap, int(math.floor(budget ** (1.0 / m) + 1e-9))))
