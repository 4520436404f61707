"""Elimination of the equality dual from the lower-level KKT system.

For ``min 1/2 y'Ry + (c-x)'y  s.t.  Fy = d`` plus bound multipliers, the
stationarity condition solved for ``y`` and substituted into ``Fy = d`` gives

    y = M(x + mu - nu) + r
    M = R^-1 - R^-1 F' (F R^-1 F')^-1 F R^-1
    r = R^-1 F' (F R^-1 F')^-1 d - M c

``M`` is the Schur complement of a PSD matrix, hence PSD.  With diagonal
``R`` and ``F = -I_n kron 1_K'`` it is block diagonal and every block is
``diag(w) - w w'/sum(w)`` with ``w = 1/q``, a symmetric M-matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .config import DEFAULT, Tolerances
from .errors import NotPositiveDefinite, NotSymmetric, RankDeficient
from .market_model import MarketInstance


@dataclass(frozen=True)
class Certificate:
    passed: bool
    value: float  # witness: smallest eigenvalue or largest off-diagonal entry

    def __bool__(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class ReducedModel:
    """The pair ``(M, r)`` with structural certificates.

    ``M`` is stored as a stack of equal-size diagonal blocks of shape
    ``(B, k, k)`` covering contiguous index ranges (``B = 1`` for the dense
    path), so the prosumer structure never needs an ``m x m`` array.
    """

    M_blocks: np.ndarray
    r: np.ndarray
    cert_psd: Certificate
    cert_mmatrix: Certificate
    cert_structured: bool

    @property
    def m(self) -> int:
        return self.r.size

    @property
    def block_size(self) -> int:
        return self.M_blocks.shape[1]

    @property
    def M(self) -> np.ndarray:
        """Dense ``M``; only sensible for small ``m``."""
        return sla.block_diag(*self.M_blocks)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        B, k, _ = self.M_blocks.shape
        x = np.asarray(x, dtype=float)
        xb = x.reshape(x.shape[:-1] + (B, k))
        return np.einsum("bij,...bj->...bi", self.M_blocks, xb).reshape(x.shape)

    def response(self, x: np.ndarray) -> np.ndarray:
        """``Mx + r``: the lower-level response when no bound is active."""
        return self.matvec(x) + self.r


def _symmetry_gap(A: np.ndarray) -> float:
    return float(np.max(np.abs(A - np.swapaxes(A, -1, -2)))) if A.size else 0.0


def _as_stack(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        M = M[None]
    if M.ndim != 3 or M.shape[1] != M.shape[2]:
        raise ValueError(f"expected square matrix or stack of square blocks, got shape {M.shape}")
    return M


def check_psd(M, tol: Tolerances = DEFAULT) -> Certificate:
    """PSD certificate from a symmetric eigendecomposition.

    ``M`` may be one square matrix or a ``(B, k, k)`` stack of diagonal
    blocks; the witness is the smallest eigenvalue over all blocks.
    """
    stack = _as_stack(M)
    scale = max(1.0, float(np.max(np.abs(stack)))) if stack.size else 1.0
    if _symmetry_gap(stack) > tol.symmetry * scale:
        raise NotSymmetric(f"asymmetry {_symmetry_gap(stack):.3g}")
    if stack.size == 0:
        return Certificate(True, 0.0)
    lam_min = float(np.linalg.eigvalsh(stack).min())
    return Certificate(lam_min >= tol.psd_eig, lam_min)


def max_offdiagonal(M) -> float:
    stack = _as_stack(M)
    B, k, _ = stack.shape
    if k == 1:
        inner = -np.inf
    else:
        mask = ~np.eye(k, dtype=bool)
        inner = float(stack[:, mask].max())
    if B > 1:
        # entries between blocks are exact zeros
        inner = max(inner, 0.0)
    return inner if np.isfinite(inner) else 0.0


def check_mmatrix(M, tol: Tolerances = DEFAULT) -> Certificate:
    """Symmetric M-matrix certificate: PSD with nonpositive off-diagonals."""
    psd = check_psd(M, tol)
    off = max_offdiagonal(M)
    return Certificate(psd.passed and off <= tol.offdiag, off)


def check_structured_preconditions(R, F, tol: float = 1e-12) -> bool:
    """Nonpositive ``F`` with orthogonal rows and diagonal ``R``.

    Under these conditions the reduced ``M`` is guaranteed to be an
    M-matrix.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if np.any(F > 0):
        return False
    G = F @ F.T
    if np.any(np.abs(G - np.diag(np.diag(G))) > tol * max(1.0, float(np.abs(G).max()))):
        return False
    return bool(np.all(R - np.diag(np.diag(R)) == 0))


def _block_structure(F: np.ndarray) -> int | None:
    """Return ``K`` if ``F == -I_n kron 1_K'`` exactly, else None."""
    n, m = F.shape
    if n == 0 or m % n:
        return None
    K = m // n
    return K if np.array_equal(F, -np.kron(np.eye(n), np.ones((1, K)))) else None


def _block_closed_form(w: np.ndarray, c: np.ndarray, d: np.ndarray):
    """Per-block ``M`` and ``r`` for ``R = diag(1/w)`` and ``F = -I kron 1'``.

    ``w`` and ``c`` have shape ``(n, K)``; no inverse is formed.
    """
    wsum = w.sum(axis=1)
    M_blocks = np.einsum("bi,ij->bij", w, np.eye(w.shape[1])) - np.einsum("bi,bj->bij", w, w) / wsum[:, None, None]
    r = -w * (d / wsum)[:, None] - np.einsum("bij,bj->bi", M_blocks, c)
    return M_blocks, r.ravel()


def _certify(M_blocks: np.ndarray, r: np.ndarray, structured: bool, tol: Tolerances) -> ReducedModel:
    return ReducedModel(
        M_blocks=M_blocks,
        r=r,
        cert_psd=check_psd(M_blocks, tol),
        cert_mmatrix=check_mmatrix(M_blocks, tol),
        cert_structured=structured,
    )


def compute_reduced(R, F, c, d, tol: Tolerances = DEFAULT, force_dense: bool = False) -> ReducedModel:
    """Reduced pair ``(M, r)`` for positive definite ``R`` and full-rank ``F``.

    When ``R`` is diagonal and ``F`` has the prosumer block structure the
    closed form is used unless ``force_dense`` is set.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    c = np.asarray(c, dtype=float).ravel()
    d = np.asarray(d, dtype=float).ravel()
    m = R.shape[0]
    if R.shape != (m, m) or F.shape[1] != m or c.size != m or F.shape[0] != d.size:
        raise ValueError(f"inconsistent shapes R{R.shape} F{F.shape} c{c.shape} d{d.shape}")
    if _symmetry_gap(R) > tol.symmetry * max(1.0, float(np.abs(R).max())):
        raise NotPositiveDefinite("R is not symmetric")
    try:
        chol = sla.cho_factor(R, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("Cholesky factorization of R failed") from exc
    if F.shape[0] > m:
        raise RankDeficient(f"F has {F.shape[0]} rows but only {m} columns")

    structured = check_structured_preconditions(R, F)
    K = _block_structure(F) if structured else None
    if K is not None and not force_dense:
        n = F.shape[0]
        w = (1.0 / np.diag(R)).reshape(n, K)
        M_blocks, r = _block_closed_form(w, c.reshape(n, K), d)
        return _certify(M_blocks, r, True, tol)

    RinvFt = sla.cho_solve(chol, F.T)
    S = F @ RinvFt
    S = 0.5 * (S + S.T)
    if S.size and np.linalg.cond(S) > tol.max_condition:
        raise RankDeficient(f"F R^-1 F' has condition number {np.linalg.cond(S):.3g}")
    Rinv = sla.cho_solve(chol, np.eye(m))
    Sinv_G = np.linalg.solve(S, RinvFt.T) if S.size else np.zeros((0, m))
    M = Rinv - RinvFt @ Sinv_G
    M = 0.5 * (M + M.T)
    r = (RinvFt @ np.linalg.solve(S, d) if S.size else np.zeros(m)) - M @ c
    return _certify(M[None], r, structured, tol)


def reduce_instance(instance: MarketInstance, tol: Tolerances = DEFAULT) -> ReducedModel:
    """Closed-form reduction of the prosumer lower-level problem."""
    w = instance.blocks(1.0 / instance.q)
    M_blocks, r = _block_closed_form(w, instance.blocks(instance.c), instance.d)
    return _certify(M_blocks, r, True, tol)


def identity_residuals(reduced: ReducedModel, F, d) -> tuple[float, float]:
    """``(|M F'|_max, |F r - d|_inf)``; both vanish for an exact reduction."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    MFt = reduced.matvec(F)  # rows of F are mapped through M
    return float(np.max(np.abs(MFt), initial=0.0)), float(np.max(np.abs(F @ reduced.r - d), initial=0.0))


def instance_identity_residuals(reduced: ReducedModel, instance: MarketInstance) -> tuple[float, float]:
    """Same as :func:`identity_residuals` with ``F = E`` applied blockwise."""
    ones = np.ones(instance.m)
    MEt = reduced.matvec(ones)  # E' has -1 on each block's columns
    return float(np.max(np.abs(MEt))), float(np.max(np.abs(instance.E(reduced.r) - instance.d)))


def write_matrix_text(path, A) -> None:
    """One row per line, space separated."""
    np.savetxt(Path(path), np.atleast_2d(A), fmt="%.17g", delimiter=" ")


def read_matrix_text(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(Path(path), ndmin=2))
