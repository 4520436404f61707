"""Batched operator-splitting solver for small convex QPs.

Solves ``B`` independent problems of equal size

    minimize   1/2 x'Px + q'x
    subject to l <= Ax <= u

with the ADMM iteration popularised by OSQP: one linear system per block
(factored once per penalty value), projection onto the box, dual ascent.
Problems are Ruiz-equilibrated before iterating and an exact solve on the
detected active set (polishing) is attempted at every checkpoint, since the
absolute tolerances used here (1e-8) are out of reach for plain ADMM in a
reasonable number of iterations.

All arrays carry a leading batch axis: ``P (B,k,k)``, ``q (B,k)``,
``A (B,c,k)``, ``l``/``u`` ``(B,c)`` with infinite entries allowed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INF = 1e20  # bounds beyond this magnitude are treated as absent


@dataclass
class QPSettings:
    eps_abs: float = 1e-8
    max_iter: int = 200_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iter: int = 10
    check_every: int = 25
    adaptive_rho_tolerance: float = 5.0
    polish_delta: float = 1e-10
    polish_refine: int = 5


@dataclass
class QPResult:
    x: np.ndarray  # (B, k)
    y: np.ndarray  # (B, c) constraint multipliers
    prim_res: np.ndarray  # (B,)
    dual_res: np.ndarray  # (B,)
    converged: np.ndarray  # (B,) bool
    polished: np.ndarray  # (B,) bool
    iterations: int


def _mv(A, x):
    """Batched ``A @ x`` for ``A (B,i,j)``, ``x (B,j)``."""
    return np.matmul(A, x[..., None])[..., 0]


def _mtv(A, y):
    """Batched ``A' @ y`` for ``A (B,i,j)``, ``y (B,i)``."""
    return np.matmul(y[:, None, :], A)[:, 0, :]


def residuals(P, q, A, l, u, x, y):
    """Unscaled primal and dual residuals (max-norm) per block.

    The primal residual is the distance of ``Ax`` to ``[l, u]``; the dual
    residual also folds in sign errors of the multipliers on bounds that
    are not active, so it certifies complementarity as well.
    """
    Ax = _mv(A, x)
    prim = np.maximum(np.maximum(l - Ax, 0.0), np.maximum(Ax - u, 0.0)).max(axis=1, initial=0.0)
    stat = _mv(P, x) + q + _mtv(A, y)
    # y < 0 needs an active lower bound, y > 0 an active upper bound
    lo_gap = np.where(np.abs(l) < INF, Ax - l, np.inf)
    up_gap = np.where(np.abs(u) < INF, u - Ax, np.inf)
    comp = np.where(y < 0, np.minimum(-y, lo_gap), 0.0)
    comp = np.maximum(comp, np.where(y > 0, np.minimum(y, up_gap), 0.0))
    dual = np.maximum(np.abs(stat).max(axis=1, initial=0.0), comp.max(axis=1, initial=0.0))
    return prim, dual


def _ruiz(P, q, A, iters):
    B, k, _ = P.shape
    c = A.shape[1]
    D = np.ones((B, k))
    E = np.ones((B, c))
    Ps, As = P.copy(), A.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Ps).max(axis=1), np.abs(As).max(axis=1))
        row = np.abs(As).max(axis=2)
        dk = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        ek = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        Ps = dk[:, :, None] * Ps * dk[:, None, :]
        As = ek[:, :, None] * As * dk[:, None, :]
        D *= dk
        E *= ek
    qs = D * q
    cost = 1.0 / np.clip(np.maximum(np.abs(Ps).max(axis=(1, 2)), np.abs(qs).max(axis=1)), 1e-4, 1e4)
    return Ps * cost[:, None, None], qs * cost[:, None], As, D, E, cost


def _factor(Ps, As, rho_vec, sigma):
    k = Ps.shape[1]
    L = Ps + sigma * np.eye(k) + np.matmul(As.transpose(0, 2, 1), rho_vec[..., None] * As)
    return np.linalg.inv(L)


def polish(P, q, A, l, u, x, y, z, settings: QPSettings):
    """Exact solve on the active set guessed from ``(z, y)``; one block."""
    k = P.shape[0]
    lower = (z - l < -y) & (np.abs(l) < INF)
    upper = (u - z < y) & (np.abs(u) < INF)
    act = np.flatnonzero(lower | upper)
    Aa = A[act]
    ba = np.where(lower, l, u)[act]
    na = act.size
    delta = settings.polish_delta
    Kreg = np.block([[P + delta * np.eye(k), Aa.T], [Aa, -delta * np.eye(na)]])
    Kex = np.block([[P, Aa.T], [Aa, np.zeros((na, na))]])
    rhs = np.concatenate([-q, ba])
    try:
        sol = np.linalg.solve(Kreg, rhs)
        for _ in range(settings.polish_refine):
            sol = sol + np.linalg.solve(Kreg, rhs - Kex @ sol)
    except np.linalg.LinAlgError:
        return None
    xp = sol[:k]
    yp = np.zeros_like(y)
    yp[act] = sol[k:]
    # multipliers with the wrong sign mean the guessed active set is wrong
    yp[lower] = np.minimum(yp[lower], 0.0)
    yp[upper] = np.maximum(yp[upper], 0.0)
    return xp, yp


def solve_qp_batch(P, q, A, l, u, settings: QPSettings | None = None, x0=None) -> QPResult:
    st = settings or QPSettings()
    P = np.asarray(P, float)
    q = np.asarray(q, float)
    A = np.asarray(A, float)
    l = np.clip(np.asarray(l, float), -INF, INF)
    u = np.clip(np.asarray(u, float), -INF, INF)
    B, k, _ = P.shape
    c = A.shape[1]

    Ps, qs, As, D, E, cost = _ruiz(P, q, A, st.scaling_iter)
    ls = np.where(np.abs(l) < INF, E * l, -INF)
    us = np.where(np.abs(u) < INF, E * u, INF)

    def rho_vector(rho):
        eq = np.abs(us - ls) < 1e-12
        free = (ls <= -INF) & (us >= INF)
        rv = np.broadcast_to(rho[:, None], (B, c)).copy()
        rv[eq] *= 1e3
        rv[free] = 1e-6
        return rv

    rho = np.full(B, st.rho)
    rho_vec = rho_vector(rho)
    Linv = _factor(Ps, As, rho_vec, st.sigma)

    xs = np.zeros((B, k)) if x0 is None else np.asarray(x0, float) / D
    zs = np.clip(_mv(As, xs), ls, us)
    ys = np.zeros((B, c))

    x_out = np.zeros((B, k))
    y_out = np.zeros((B, c))
    prim_out = np.full(B, np.inf)
    dual_out = np.full(B, np.inf)
    done = np.zeros(B, bool)
    polished = np.zeros(B, bool)

    it = 0
    for it in range(1, st.max_iter + 1):
        rhs = st.sigma * xs - qs + _mtv(As, rho_vec * zs - ys)
        xt = _mv(Linv, rhs)
        zt = _mv(As, xt)
        xs = st.alpha * xt + (1 - st.alpha) * xs
        zr = st.alpha * zt + (1 - st.alpha) * zs
        z_new = np.clip(zr + ys / rho_vec, ls, us)
        ys = ys + rho_vec * (zr - z_new)
        zs = z_new

        if it % st.check_every and it != st.max_iter:
            continue

        # unscaled iterates
        x = D * xs
        z = zs / E
        y = E * ys / cost[:, None]
        active = ~done
        prim, dual = residuals(P, q, A, l, u, x, y)
        for b in np.flatnonzero(active):
            if prim[b] < prim_out[b] or (prim[b] <= st.eps_abs and dual[b] < dual_out[b]):
                x_out[b], y_out[b], prim_out[b], dual_out[b] = x[b], y[b], prim[b], dual[b]
            if prim[b] <= st.eps_abs and dual[b] <= st.eps_abs:
                done[b] = True
                continue
            pol = polish(P[b], q[b], A[b], l[b], u[b], x[b], y[b], z[b], st)
            if pol is None:
                continue
            xp, yp = pol
            pp, dp = residuals(P[b:b + 1], q[b:b + 1], A[b:b + 1], l[b:b + 1], u[b:b + 1], xp[None], yp[None])
            if pp[0] <= st.eps_abs and dp[0] <= st.eps_abs:
                x_out[b], y_out[b], prim_out[b], dual_out[b] = xp, yp, pp[0], dp[0]
                done[b] = True
                polished[b] = True
        if done.all():
            break

        # adaptive penalty, per block
        Axs = _mv(As, xs)
        prim_s = np.abs(Axs - zs).max(axis=1)
        dual_s = np.abs(_mv(Ps, xs) + qs + _mtv(As, ys)).max(axis=1)
        pn = np.maximum(np.abs(Axs).max(axis=1), np.abs(zs).max(axis=1)) + 1e-30
        dn = np.maximum.reduce([
            np.abs(_mv(Ps, xs)).max(axis=1),
            np.abs(_mtv(As, ys)).max(axis=1),
            np.abs(qs).max(axis=1),
        ]) + 1e-30
        ratio = np.sqrt((prim_s / pn + 1e-30) / (dual_s / dn + 1e-30))
        new_rho = np.clip(rho * ratio, 1e-6, 1e6)
        change = (new_rho > rho * st.adaptive_rho_tolerance) | (new_rho < rho / st.adaptive_rho_tolerance)
        change &= ~done
        if change.any():
            rho = np.where(change, new_rho, rho)
            rho_vec = rho_vector(rho)
            Linv[change] = _factor(Ps[change], As[change], rho_vec[change], st.sigma)

    return QPResult(
        x=x_out, y=y_out, prim_res=prim_out, dual_res=dual_out,
        converged=done.copy(), polished=polished, iterations=it,
    )
