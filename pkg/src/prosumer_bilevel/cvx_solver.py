"""Convex surrogate of the aggregator's bilevel pricing problem.

Substituting the unconstrained response ``y = Mx + r`` into the
aggregator's cost ``(x - p)'y`` gives

    minimize   x'Mx + (r - Mp)'x - p'r
    subject to x >= 0,  ell <= Mx + r <= u

(either bound may be dropped).  ``M`` is PSD, so this is a convex QP; it
decouples over the diagonal blocks of ``M``.  Under sign conditions on
``ell``, ``u`` and ``u - r`` every minimizer is a global minimizer of the
bilevel problem, which :func:`certify_bilevel` checks pointwise by
re-solving the lower level at the returned prices.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .config import DEFAULT, Tolerances
from .errors import HypothesisViolated, Infeasible, MaxIterations, Unbounded
from .llp_solver import solve_llp
from .market_model import BOUND_MODES, HYPOTHESES, MarketInstance, validate
from .qp import QPSettings, solve_qp_batch
from .reduction import ReducedModel


@dataclass(frozen=True)
class BilevelSolution:
    x: np.ndarray
    y: np.ndarray
    phi: float
    provenance: str
    consistency: float = np.nan
    residuals: dict = field(default_factory=dict)
    certified: bool | None = None

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "phi": self.phi,
            "certified": self.certified,
            "provenance": self.provenance,
            "residuals": {"consistency": self.consistency, **self.residuals},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def phi(x, y, p) -> float:
    """Aggregator cost ``(x - p)'y``."""
    return float((np.asarray(x) - np.asarray(p)) @ np.asarray(y))


def _blocks(v: np.ndarray, reduced: ReducedModel) -> np.ndarray:
    B, k, _ = reduced.M_blocks.shape
    return np.asarray(v, dtype=float).reshape(B, k)


def _check_bounded(reduced: ReducedModel, g: np.ndarray, tol: float = 1e-9) -> None:
    """Raise :class:`Unbounded` if some ``z >= 0`` with ``Mz = 0`` has ``g'z < 0``.

    A convex QP is bounded below on a nonempty polyhedron iff no recession
    direction lies in the kernel of the Hessian with negative slope; with
    ``M`` PSD, ``z'Mz = 0`` forces ``Mz = 0`` and the constraints do not
    move along ``z``.
    """
    Mb = reduced.M_blocks
    evals, evecs = np.linalg.eigh(Mb)
    scale = np.maximum(1.0, np.abs(evals).max(axis=1))
    for b in range(Mb.shape[0]):
        null = evecs[b][:, np.abs(evals[b]) <= 1e-10 * scale[b]]
        if null.shape[1] == 0:
            continue
        if null.shape[1] == 1:
            v = null[:, 0]
            v = v if v.sum() >= 0 else -v
            if np.all(v >= -1e-12):
                if g[b] @ v < -tol * max(1.0, np.abs(g[b]).max()):
                    raise Unbounded(f"block {b}: objective decreases along a kernel direction of M")
                continue
        k = Mb.shape[1]
        res = linprog(g[b], A_eq=Mb[b], b_eq=np.zeros(k), bounds=[(0, 1)] * k, method="highs")
        if res.status == 0 and res.fun < -tol * max(1.0, np.abs(g[b]).max()):
            raise Unbounded(f"block {b}: objective decreases along a kernel direction of M")


def _check_feasible(reduced: ReducedModel, lo: np.ndarray, hi: np.ndarray) -> None:
    """``x = 0`` is the common witness; fall back to an LP per block."""
    if np.all(lo <= 1e-12) and np.all(hi >= -1e-12):
        return
    Mb = reduced.M_blocks
    k = Mb.shape[1]
    for b in range(Mb.shape[0]):
        if np.all(lo[b] <= 1e-12) and np.all(hi[b] >= -1e-12):
            continue
        A_ub, b_ub = [], []
        fin_hi = np.isfinite(hi[b])
        fin_lo = np.isfinite(lo[b])
        if fin_hi.any():
            A_ub.append(Mb[b][fin_hi])
            b_ub.append(hi[b][fin_hi])
        if fin_lo.any():
            A_ub.append(-Mb[b][fin_lo])
            b_ub.append(-lo[b][fin_lo])
        res = linprog(np.zeros(k), A_ub=np.vstack(A_ub), b_ub=np.concatenate(b_ub),
                      bounds=[(0, None)] * k, method="highs")
        if res.status == 2:
            raise Infeasible(f"block {b}: no x >= 0 with ell <= Mx + r <= u")


def solve_cvx(
    reduced: ReducedModel,
    instance: MarketInstance,
    bound_mode: str = "both",
    force: bool = False,
    tol: Tolerances = DEFAULT,
    settings: QPSettings | None = None,
) -> BilevelSolution:
    """Minimize the convex surrogate for the chosen bound mode.

    ``bound_mode`` selects both bounds, ``lower_only`` or ``upper_only``.
    The hypotheses of the matching recovery result are enforced unless
    ``force`` is set, in which case they only raise a warning.  Optimal
    prices need not be unique; the solver returns whichever optimum its
    iteration reaches.
    """
    if bound_mode not in BOUND_MODES:
        raise ValueError(f"bound_mode must be one of {BOUND_MODES}")
    inst = instance.with_bound_mode(bound_mode)
    report = validate(inst, reduced, tol)
    failed = report.failed(HYPOTHESES[bound_mode])
    if failed:
        if not force:
            raise HypothesisViolated(failed, report)
        warnings.warn(f"proceeding despite violated hypotheses: {failed}", stacklevel=2)

    Mb = reduced.M_blocks
    B, k, _ = Mb.shape
    r = _blocks(reduced.r, reduced)
    p = _blocks(inst.p, reduced)
    lo = _blocks(inst.ell, reduced) - r
    hi = _blocks(inst.u, reduced) - r
    g = r - np.einsum("bij,bj->bi", Mb, p)

    _check_feasible(reduced, lo, hi)
    _check_bounded(reduced, g)

    # rows: x >= 0, then ell - r <= Mx <= u - r (absent bounds are infinite)
    eye = np.broadcast_to(np.eye(k), (B, k, k))
    A = np.concatenate([eye, Mb], axis=1)
    lvec = np.concatenate([np.zeros((B, k)), lo], axis=1)
    uvec = np.concatenate([np.full((B, k), np.inf), hi], axis=1)

    st = settings or QPSettings(eps_abs=min(tol.cvx_primal, tol.cvx_dual), max_iter=tol.cvx_max_iter)
    res = solve_qp_batch(2.0 * Mb, g, A, lvec, uvec, st)
    x = np.maximum(res.x.ravel(), 0.0)
    y = reduced.response(x)
    sol_phi = phi(x, y, inst.p)
    info = {
        "primal": float(res.prim_res.max()),
        "dual": float(res.dual_res.max()),
        "iterations": int(res.iterations),
        "polished_blocks": int(res.polished.sum()),
    }
    if not res.converged.all():
        best = BilevelSolution(x, y, sol_phi, "cvx", residuals=info)
        raise MaxIterations(
            f"{int((~res.converged).sum())} of {B} blocks unconverged "
            f"(primal {info['primal']:.2g}, dual {info['dual']:.2g})",
            best=best,
        )
    y_llp = solve_llp(inst, x, tol).y
    return BilevelSolution(
        x=x, y=y, phi=sol_phi, provenance=f"cvx:{bound_mode}",
        consistency=float(np.max(np.abs(y_llp - y))), residuals=info,
    )


@dataclass(frozen=True)
class BilevelCertificate:
    passed: bool
    response_residual: float
    phi_residual: float

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "response_residual": self.response_residual,
            "phi_residual": self.phi_residual,
        }


def certify_bilevel(
    instance: MarketInstance,
    reduced: ReducedModel | None,
    sol: BilevelSolution,
    bound_mode: str = "both",
    tol: Tolerances = DEFAULT,
) -> BilevelCertificate:
    """Check that ``sol.y`` is the prosumers' actual response to ``sol.x``."""
    inst = instance.with_bound_mode(bound_mode)
    y_true = solve_llp(inst, sol.x, tol).y
    resp = float(np.max(np.abs(y_true - sol.y)))
    dphi = abs(phi(sol.x, y_true, inst.p) - sol.phi)
    return BilevelCertificate(
        passed=resp <= tol.certify_response and dphi <= tol.certify_phi,
        response_residual=resp,
        phi_residual=dphi,
    )
