"""Numerical tolerances shared by every module."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    # reduction certificates
    symmetry: float = 1e-12
    psd_eig: float = -1e-10
    offdiag: float = 1e-12
    max_condition: float = 1e12
    # hypothesis margin for the strict inequality u > r
    strict_margin: float = 1e-9
    # input validation
    profile: float = 1e-9
    equality: float = 1e-8
    # lower-level solvers
    bisection_width: float = 1e-12
    bisection_residual: float = 1e-10
    kkt: float = 1e-8
    splitting_max_iter: int = 100_000
    # convex surrogate
    cvx_primal: float = 1e-8
    cvx_dual: float = 1e-8
    cvx_max_iter: int = 200_000
    # bilevel certificate
    certify_response: float = 1e-6
    certify_phi: float = 1e-8


DEFAULT = Tolerances()
