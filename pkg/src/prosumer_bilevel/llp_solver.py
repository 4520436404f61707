"""Exact lower-level (prosumer) response.

For diagonal ``Q`` and the block equality ``-sum_k y_ik = d_i`` each
prosumer block is a continuous quadratic knapsack: for a multiplier
``lam`` the minimizer is ``y_k(lam) = clip((x_k - c_k + lam)/q_k, ell_k, u_k)``
and ``sum_k y_k(lam)`` is nondecreasing, so ``lam`` is found by bisection.
A general (non-diagonal ``R``, arbitrary ``F``) solver based on operator
splitting is provided for the one-sided variants and as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .config import DEFAULT, Tolerances
from .errors import BisectionStalled, Infeasible, InfeasibleBlock, MaxIterations
from .market_model import MarketInstance


@dataclass(frozen=True)
class LlpSolution:
    y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    kkt_residual: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "y": self.y.tolist(),
            "lambda": self.lam.tolist(),
            "mu": self.mu.tolist(),
            "nu": self.nu.tolist(),
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
        }


def _finite_or(a: np.ndarray, fill: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(a), a, fill)


def check_blocks_feasible(inst: MarketInstance, tol: Tolerances = DEFAULT) -> None:
    """Raise :class:`InfeasibleBlock` unless ``sum(ell) <= -d <= sum(u)`` per block."""
    with np.errstate(invalid="ignore"):
        lo_sum = inst.blocks(inst.ell).sum(axis=-1)
        hi_sum = inst.blocks(inst.u).sum(axis=-1)
    target = -inst.d
    slack = tol.profile * (1.0 + np.abs(inst.d))
    bad = ~((lo_sum - slack <= target) & (target <= hi_sum + slack))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InfeasibleBlock(i, lo_sum[i], target[i], hi_sum[i])


def _block_multipliers(inst: MarketInstance, X: np.ndarray, tol: Tolerances):
    """Solve every block for a batch of price vectors.

    ``X`` has shape ``(B, m)``.  Returns ``(y, lam, iterations)`` with ``y``
    of shape ``(B, n, K)`` and ``lam`` of shape ``(B, n)``.
    """
    q = inst.blocks(inst.q)
    ell = inst.blocks(inst.ell)
    u = inst.blocks(inst.u)
    target = -inst.d  # sum_k y_ik must equal -d_i
    Xb = inst.blocks(X)
    a = (Xb - inst.blocks(inst.c)) / q
    w = 1.0 / q

    check_blocks_feasible(inst, tol)

    def total(lam):
        return np.clip(a + lam[..., None] * w, ell, u).sum(axis=-1)

    # saturation points: below lo every coordinate sits at ell, above hi at u
    base = -a * q
    lo = _finite_or(q * ell - q * a, base).min(axis=-1)
    hi = _finite_or(q * u - q * a, base).max(axis=-1)
    span = np.maximum(hi - lo, 1.0)
    for _ in range(200):
        low_bad = total(lo) > target
        if not low_bad.any():
            break
        lo = np.where(low_bad, lo - span, lo)
        span = np.where(low_bad, 2 * span, span)
    span = np.maximum(hi - lo, 1.0)
    for _ in range(200):
        high_bad = total(hi) < target
        if not high_bad.any():
            break
        hi = np.where(high_bad, hi + span, hi)
        span = np.where(high_bad, 2 * span, span)
    if (total(lo) > target).any() or (total(hi) < target).any():
        raise BisectionStalled("could not bracket the equality multiplier")

    iterations = 0
    for iterations in range(1, 400):
        mid = 0.5 * (lo + hi)
        below = total(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol.bisection_width * (1.0 + np.abs(mid))):
            break
    else:
        raise BisectionStalled("bisection interval did not shrink")

    # exact multiplier on the free set identified by the final bracket
    v_lo = a + lo[..., None] * w
    v_hi = a + hi[..., None] * w
    at_lower = v_hi <= ell
    at_upper = v_lo >= u
    free = ~(at_lower | at_upper)
    fixed_sum = np.where(at_lower, ell, 0.0).sum(-1) + np.where(at_upper, u, 0.0).sum(-1)
    free_w = np.where(free, w, 0.0).sum(-1)
    free_a = np.where(free, a, 0.0).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (target - fixed_sum - free_a) / free_w
    width = hi - lo
    ok = (free_w > 0) & (exact >= lo - width) & (exact <= hi + width)
    lam = np.where(ok, exact, 0.5 * (lo + hi))
    y = np.clip(a + lam[..., None] * w, ell, u)

    resid = np.abs(y.sum(-1) - target)
    scale = tol.bisection_residual * (1.0 + np.abs(target) + np.abs(y).sum(-1))
    if np.any(resid > scale):
        raise BisectionStalled(f"equality residual {resid.max():.3g} after bisection")
    return y, lam, iterations


def _breakpoint_multipliers(inst: MarketInstance, X: np.ndarray):
    """Exact multipliers by locating the target on the sorted breakpoints.

    ``sum_k y_k(lam)`` is piecewise linear with kinks where a coordinate hits
    a bound; evaluating it at all ``2K`` kinks brackets the root on a single
    linear piece, which is then solved in closed form.  Costs ``O(K^2)`` per
    block without any iteration, which suits the many small solves of the
    search oracles.
    """
    q = inst.blocks(inst.q)
    w = 1.0 / q
    ell = inst.blocks(inst.ell)
    u = inst.blocks(inst.u)
    target = -inst.d
    a = (inst.blocks(X) - inst.blocks(inst.c)) / q
    bp = np.concatenate([q * (ell - a), q * (u - a)], axis=-1)
    finite = np.isfinite(bp)
    if not finite.all():
        lo_f = np.where(finite, bp, np.inf).min(axis=-1, keepdims=True)
        hi_f = np.where(finite, bp, -np.inf).max(axis=-1, keepdims=True)
        lo_f = np.where(np.isfinite(lo_f), lo_f, 0.0)
        hi_f = np.where(np.isfinite(hi_f), hi_f, 0.0)
        bp = np.where(bp == -np.inf, lo_f - 1.0, bp)
        bp = np.where(bp == np.inf, hi_f + 1.0, bp)
    bp = np.sort(bp, axis=-1)
    totals = np.clip(a[..., None, :] + bp[..., :, None] * w[..., None, :], ell[..., None, :], u[..., None, :]).sum(-1)
    j = (totals < target[:, None]).sum(axis=-1)
    nb = bp.shape[-1]
    left = np.take_along_axis(bp, np.clip(j - 1, 0, nb - 1)[..., None], -1)[..., 0]
    right = np.take_along_axis(bp, np.clip(j, 0, nb - 1)[..., None], -1)[..., 0]
    ref = np.where(j == 0, right - 1.0, np.where(j == nb, left + 1.0, 0.5 * (left + right)))
    v = a + ref[..., None] * w
    free = (v > ell) & (v < u)
    fixed = np.where(free, 0.0, np.clip(v, ell, u)).sum(-1)
    free_w = np.where(free, w, 0.0).sum(-1)
    free_a = np.where(free, a, 0.0).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(free_w > 0, (target - fixed - free_a) / free_w, right)
    return np.clip(a + lam[..., None] * w, ell, u), lam


def solve_llp_batch(instance: MarketInstance, X, tol: Tolerances = DEFAULT, check: bool = True) -> np.ndarray:
    """Responses ``y`` (shape ``(B, m)``) for a batch of prices ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if check:
        check_blocks_feasible(instance, tol)
    y, _ = _breakpoint_multipliers(instance, X)
    return y.reshape(X.shape[0], instance.m)


def solve_llp(instance: MarketInstance, x, tol: Tolerances = DEFAULT) -> LlpSolution:
    """Unique minimizer of the lower-level problem with its multipliers."""
    x = np.asarray(x, dtype=float)
    yb, lamb, its = _block_multipliers(instance, x[None], tol)
    y = yb[0].ravel()
    lam = lamb[0]
    # g = q*y + c - x + E'lam; at a lower-active coordinate g = mu, upper g = -nu
    unclipped = (x - instance.c - instance.Et(lam)) / instance.q
    g_lower = instance.q * instance.ell + instance.c - x + instance.Et(lam)
    g_upper = instance.q * instance.u + instance.c - x + instance.Et(lam)
    mu = np.where(unclipped < instance.ell, np.maximum(g_lower, 0.0), 0.0)
    nu = np.where(unclipped > instance.u, np.maximum(-g_upper, 0.0), 0.0)
    sol = LlpSolution(y=y, lam=lam, mu=mu, nu=nu, kkt_residual=0.0, iterations=its)
    return LlpSolution(y, lam, mu, nu, kkt_residual(instance, x, sol), its)


def _bound_products(y, mu, nu, ell, u) -> float:
    # a multiplier on an absent bound is itself a violation
    comp_l = np.where(np.isfinite(ell), np.abs(mu * np.where(np.isfinite(ell), y - ell, 0.0)), np.abs(mu))
    comp_u = np.where(np.isfinite(u), np.abs(nu * np.where(np.isfinite(u), u - y, 0.0)), np.abs(nu))
    feas = np.maximum(np.maximum(ell - y, 0.0), np.maximum(y - u, 0.0))
    signs = np.maximum(np.maximum(-mu, 0.0), np.maximum(-nu, 0.0))
    return float(max(comp_l.max(initial=0.0), comp_u.max(initial=0.0),
                     feas.max(initial=0.0), signs.max(initial=0.0)))


def kkt_residual(instance: MarketInstance, x, solution: LlpSolution) -> float:
    """Max-norm violation of stationarity, feasibility, sign and complementarity."""
    x = np.asarray(x, dtype=float)
    y, lam, mu, nu = solution.y, solution.lam, solution.mu, solution.nu
    stat = instance.q * y + instance.c - x + instance.Et(lam) - mu + nu
    eq = instance.E(y) - instance.d
    return max(float(np.abs(stat).max()), float(np.abs(eq).max()),
               _bound_products(y, mu, nu, instance.ell, instance.u))


def kkt_residual_general(R, F, c, d, ell, u, x, solution: LlpSolution) -> float:
    R = np.atleast_2d(np.asarray(R, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    y, lam, mu, nu = solution.y, solution.lam, solution.mu, solution.nu
    stat = R @ y + np.asarray(c) - np.asarray(x) + F.T @ lam - mu + nu
    eq = F @ y - np.asarray(d)
    return max(float(np.abs(stat).max(initial=0.0)), float(np.abs(eq).max(initial=0.0)),
               _bound_products(y, mu, nu, np.asarray(ell, float), np.asarray(u, float)))


def _check_feasible(F, d, ell, u) -> None:
    m = F.shape[1]
    bounds = [(None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
              for lo, hi in zip(ell, u)]
    res = linprog(np.zeros(m), A_eq=F, b_eq=d, bounds=bounds, method="highs")
    if res.status == 2:
        raise Infeasible("no y with Fy = d inside the bounds")


def _polish(R, F, rhs_c, d, ell, u, lower_act, upper_act):
    """Solve the equality-constrained KKT system on a fixed active set."""
    m = R.shape[0]
    n = F.shape[0]
    act = np.flatnonzero(lower_act | upper_act)
    A = np.zeros((act.size, m))
    A[np.arange(act.size), act] = 1.0
    bvals = np.where(lower_act, ell, u)[act]
    K = np.block([
        [R, F.T, A.T],
        [F, np.zeros((n, n)), np.zeros((n, act.size))],
        [A, np.zeros((act.size, n)), np.zeros((act.size, act.size))],
    ])
    rhs = np.concatenate([-rhs_c, d, bvals])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    y = sol[:m]
    lam = sol[m:m + n]
    eta = np.zeros(m)
    eta[act] = sol[m + n:]
    mu = np.where(lower_act, np.maximum(-eta, 0.0), 0.0)
    nu = np.where(upper_act, np.maximum(eta, 0.0), 0.0)
    ok = np.all(np.where(lower_act, -eta, 0.0) >= -1e-12) and np.all(np.where(upper_act, eta, 0.0) >= -1e-12)
    return y, lam, mu, nu, ok


def solve_llp_general(
    R, F, c, d, ell, u, x,
    lower: bool = True,
    upper: bool = True,
    tol: Tolerances = DEFAULT,
    max_iter: int | None = None,
) -> LlpSolution:
    """KKT point of ``min 1/2 y'Ry + (c-x)'y  s.t.  Fy = d, ell <= y <= u``.

    Splitting iteration: an equality-constrained linear solve (factored
    once) alternates with projection onto the box, followed by an exact
    solve on the detected active set.  ``lower``/``upper`` switch the
    corresponding bound off (treated as -inf/+inf).
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    m = R.shape[0]
    n = F.shape[0]
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    x = np.asarray(x, dtype=float)
    ell = np.asarray(ell, dtype=float) if lower else np.full(m, -np.inf)
    u = np.asarray(u, dtype=float) if upper else np.full(m, np.inf)
    if ell.shape != (m,):
        ell = np.full(m, -np.inf) if ell.size == 0 else np.broadcast_to(ell, (m,)).copy()
    if u.shape != (m,):
        u = np.full(m, np.inf) if u.size == 0 else np.broadcast_to(u, (m,)).copy()
    max_iter = tol.splitting_max_iter if max_iter is None else max_iter
    _check_feasible(F, d, ell, u)

    eig = np.linalg.eigvalsh(0.5 * (R + R.T))
    rho = float(np.sqrt(eig[0] * eig[-1]))
    lin = c - x
    KKT = np.block([[R + rho * np.eye(m), F.T], [F, np.zeros((n, n))]])
    lu = sla.lu_factor(KKT)

    z = np.clip(np.zeros(m), ell, u)
    w = np.zeros(m)
    best = None
    for it in range(1, max_iter + 1):
        sol = sla.lu_solve(lu, np.concatenate([-lin + rho * (z - w), d]))
        y, lam = sol[:m], sol[m:]
        z = np.clip(y + w, ell, u)
        w = w + y - z
        if it % 10 and it != max_iter:
            continue
        # bound multiplier estimate: rho*w = nu - mu
        lower_act = np.isfinite(ell) & (z <= ell) & (w < 0)
        upper_act = np.isfinite(u) & (z >= u) & (w > 0)
        yp, lp, mp, np_, ok = _polish(R, F, lin, d, ell, u, lower_act, upper_act)
        cand = LlpSolution(yp, lp, mp, np_, 0.0, it)
        res = kkt_residual_general(R, F, c, d, ell, u, x, cand)
        if ok and res <= tol.kkt:
            return LlpSolution(yp, lp, mp, np_, res, it)
        mu_est = np.maximum(-rho * w, 0.0)
        nu_est = np.maximum(rho * w, 0.0)
        plain = LlpSolution(z, lam, mu_est, nu_est, 0.0, it)
        res_plain = kkt_residual_general(R, F, c, d, ell, u, x, plain)
        if best is None or res_plain < best.kkt_residual:
            best = LlpSolution(z.copy(), lam.copy(), mu_est, nu_est, res_plain, it)
        if res_plain <= tol.kkt:
            return best
    raise MaxIterations(f"splitting did not reach kkt residual {tol.kkt:g}", best=best)
