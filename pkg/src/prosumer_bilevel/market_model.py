"""Prosumer profiles, assembled market instances and their validation.

A prosumer ``i`` picks demand ``h_i(k)`` over ``K`` steps; eliminating the
demand through ``h = s - y`` leaves the net exchange ``y`` (energy sold minus
energy bought) as the only decision.  Stacking the ``n`` prosumers gives the
lower-level problem

    min_y  1/2 y'Qy + (c - x)'y   s.t.  ell <= y <= u,  Ey = d

with ``Q = diag(q)``, ``c = Q(h0 - s)``, ``ell = s - h_ub``, ``u = s - h_lb``,
``E = -I_n kron 1_K'`` and ``d_i = h_tot_i - sum_k s_i(k)``.  ``E`` is never
formed densely; every product with it is a per-block sum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import DEFAULT, Tolerances
from .errors import DimensionMismatch, EqualityViolated, InfeasibleBlock, InvalidProfile

BOUND_MODES = ("both", "lower_only", "upper_only")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ProsumerProfile:
    q: np.ndarray
    h0: np.ndarray
    h_lb: np.ndarray
    h_ub: np.ndarray
    h_tot: float
    s: np.ndarray

    def __post_init__(self):
        for name in ("q", "h0", "h_lb", "h_ub", "s"):
            object.__setattr__(self, name, _frozen(np.atleast_1d(getattr(self, name))))
        object.__setattr__(self, "h_tot", float(self.h_tot))

    @property
    def K(self) -> int:
        return len(self.q)

    def check(self, index: int | None = None, tol: float = DEFAULT.profile) -> None:
        """Raise :class:`InvalidProfile` naming the first violated field."""
        K = len(self.q)
        if K < 1:
            raise InvalidProfile("q", "horizon must have K >= 1", index)
        for name in ("h0", "h_lb", "h_ub", "s"):
            if len(getattr(self, name)) != K:
                raise InvalidProfile(name, f"length {len(getattr(self, name))} != K={K}", index)
        for name in ("q", "h0", "h_lb", "h_ub", "s"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidProfile(name, "non-finite entry", index)
        if not math.isfinite(self.h_tot):
            raise InvalidProfile("h_tot", "non-finite", index)
        if np.any(self.q <= 0):
            raise InvalidProfile("q", "dissatisfaction weights must be > 0", index)
        if np.any(self.s < 0):
            raise InvalidProfile("s", "generation must be >= 0", index)
        if np.any(self.h_lb < 0):
            raise InvalidProfile("h_lb", "demand lower bound must be >= 0", index)
        if np.any(self.h_lb > self.h_ub + tol):
            raise InvalidProfile("h_ub", "h_lb <= h_ub violated", index)
        if np.any(self.h0 < self.h_lb - tol) or np.any(self.h0 > self.h_ub + tol):
            raise InvalidProfile("h0", "preferred demand outside [h_lb, h_ub]", index)
        scale = 1.0 + abs(self.h_tot)
        if not (self.h_lb.sum() - tol * scale <= self.h_tot <= self.h_ub.sum() + tol * scale):
            # same condition as sum(ell) <= -d <= sum(u) on the assembled block
            total_s = float(self.s.sum())
            raise InfeasibleBlock(-1 if index is None else index, total_s - float(self.h_ub.sum()),
                                  total_s - self.h_tot, total_s - float(self.h_lb.sum()))
        if abs(self.h0.sum() - self.h_tot) > tol * scale:
            raise InvalidProfile(
                "h_tot",
                f"Assumption 1 violated: sum(h0)={self.h0.sum():.12g} != h_tot={self.h_tot:.12g}",
                index,
            )

    def to_dict(self) -> dict:
        return {
            "q": self.q.tolist(),
            "h0": self.h0.tolist(),
            "h_lb": self.h_lb.tolist(),
            "h_ub": self.h_ub.tolist(),
            "h_tot": self.h_tot,
            "s": self.s.tolist(),
        }


@dataclass(frozen=True)
class MarketInstance:
    """Vector-form lower-level data for ``n`` prosumers over ``K`` steps.

    All vectors have length ``m = n*K`` except ``d`` (length ``n``); the
    ordering is prosumer-major, so block ``i`` is ``[i*K, (i+1)*K)``.
    ``ell``/``u`` may hold ``-inf``/``+inf`` for one-sided variants.
    """

    n: int
    K: int
    q: np.ndarray
    c: np.ndarray
    ell: np.ndarray
    u: np.ndarray
    d: np.ndarray
    p: np.ndarray
    s: np.ndarray
    profiles: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        for name in ("q", "c", "ell", "u", "d", "p", "s"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        m = self.n * self.K
        for name in ("q", "c", "ell", "u", "p", "s"):
            if getattr(self, name).shape != (m,):
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected ({m},)")
        if self.d.shape != (self.n,):
            raise DimensionMismatch(f"d has shape {self.d.shape}, expected ({self.n},)")

    @property
    def m(self) -> int:
        return self.n * self.K

    def blocks(self, v: np.ndarray) -> np.ndarray:
        """View an ``m``-vector (or a ``(..., m)`` batch) as ``(..., n, K)``."""
        v = np.asarray(v, dtype=float)
        return v.reshape(v.shape[:-1] + (self.n, self.K))

    def E(self, y: np.ndarray) -> np.ndarray:
        return -self.blocks(y).sum(axis=-1)

    def Et(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        return -np.repeat(lam, self.K, axis=-1)

    def dense_E(self) -> np.ndarray:
        return -np.kron(np.eye(self.n), np.ones((1, self.K)))

    @property
    def h0(self) -> np.ndarray:
        return self.s + self.c / self.q

    @property
    def h_lb(self) -> np.ndarray:
        return self.s - self.u

    def llp_objective(self, y: np.ndarray, x: np.ndarray) -> float:
        y = np.asarray(y, dtype=float)
        return float(0.5 * y @ (self.q * y) + (self.c - x) @ y)

    def with_bound_mode(self, mode: str) -> "MarketInstance":
        """Drop the upper or lower bound to obtain the one-sided variants."""
        if mode not in BOUND_MODES:
            raise ValueError(f"bound_mode must be one of {BOUND_MODES}, got {mode!r}")
        if mode == "lower_only":
            return replace(self, u=np.full(self.m, np.inf))
        if mode == "upper_only":
            return replace(self, ell=np.full(self.m, -np.inf))
        return self


def assemble(
    profiles: Sequence[ProsumerProfile],
    grid_prices: Sequence[float],
    tol: Tolerances = DEFAULT,
) -> MarketInstance:
    """Stack prosumer profiles into a :class:`MarketInstance`."""
    if len(profiles) == 0:
        raise DimensionMismatch("need at least one prosumer")
    K = len(profiles[0].q)
    for i, prof in enumerate(profiles):
        if len(prof.q) != K:
            raise DimensionMismatch(f"prosumer {i} has K={len(prof.q)}, expected {K}")
    grid_prices = np.asarray(grid_prices, dtype=float)
    if grid_prices.shape != (K,):
        raise DimensionMismatch(f"grid_prices has length {grid_prices.size}, expected K={K}")
    if not np.all(np.isfinite(grid_prices)):
        raise InvalidProfile("grid_prices", "non-finite entry")
    for i, prof in enumerate(profiles):
        prof.check(i, tol.profile)

    q = np.concatenate([pr.q for pr in profiles])
    s = np.concatenate([pr.s for pr in profiles])
    h0 = np.concatenate([pr.h0 for pr in profiles])
    c = q * (h0 - s)
    ell = s - np.concatenate([pr.h_ub for pr in profiles])
    u = s - np.concatenate([pr.h_lb for pr in profiles])
    d = np.array([pr.h_tot - pr.s.sum() for pr in profiles])
    inst = MarketInstance(
        n=len(profiles),
        K=K,
        q=q,
        c=c,
        ell=ell,
        u=u,
        d=d,
        p=np.tile(grid_prices, len(profiles)),
        s=s,
        profiles=tuple(profiles),
    )
    lo, hi = inst.blocks(ell).sum(axis=1), inst.blocks(u).sum(axis=1)
    for i in range(inst.n):
        slack = tol.profile * (1.0 + abs(d[i]))
        if not (lo[i] - slack <= -d[i] <= hi[i] + slack):
            raise InfeasibleBlock(i, lo[i], -d[i], hi[i])
    return inst


def reconstruct_demand(instance: MarketInstance, y, tol: float = DEFAULT.equality) -> np.ndarray:
    """Recover demand ``h = s - y`` after checking ``Ey = d``."""
    y = np.asarray(y, dtype=float)
    viol = np.max(np.abs(instance.E(y) - instance.d))
    if viol > tol:
        raise EqualityViolated(f"|Ey - d|_inf = {viol:.3g} exceeds {tol:.1g}")
    return instance.s - y


def split_net_exchange(y) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    return np.maximum(y, 0.0), np.maximum(-y, 0.0)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    offending: tuple[int, ...] = ()
    margin: float = math.inf

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "offending": list(self.offending),
            "margin": self.margin if math.isfinite(self.margin) else None,
        }


@dataclass(frozen=True)
class ValidationReport:
    checks: dict[str, Check]

    @property
    def passed(self) -> bool:
        return all(ch.passed for ch in self.checks.values())

    def failed(self, names: Sequence[str] | None = None) -> list[str]:
        names = self.checks.keys() if names is None else names
        return [nm for nm in names if nm in self.checks and not self.checks[nm].passed]

    def __getitem__(self, name: str) -> Check:
        return self.checks[name]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": {k: v.to_dict() for k, v in self.checks.items()}}


# Hypotheses under which the convex surrogate recovers bilevel optima, per
# bound mode.  "m_matrix" is only evaluated when a reduced model is supplied.
HYPOTHESES = {
    "both": ("ell_nonpositive", "u_nonnegative", "u_gt_r", "m_matrix"),
    "lower_only": ("ell_nonpositive",),
    "upper_only": ("u_nonnegative", "u_gt_r", "m_matrix"),
}


def _slack_check(name: str, slack: np.ndarray, threshold: float = 0.0) -> Check:
    """Pass iff every entry of ``slack`` exceeds ``threshold`` (>= when 0)."""
    slack = np.asarray(slack, dtype=float)
    if threshold > 0:
        bad = np.flatnonzero(~(slack > threshold))
    else:
        bad = np.flatnonzero(slack < 0)
    finite = slack[np.isfinite(slack)]
    margin = float(finite.min()) if finite.size else math.inf
    return Check(name, bad.size == 0, tuple(int(i) for i in bad), margin)


def validate(instance: MarketInstance, reduced=None, tol: Tolerances = DEFAULT) -> ValidationReport:
    """Evaluate instance invariants and the convex-recovery hypotheses.

    Without ``reduced`` the strict inequality ``u > r`` is checked through
    the equivalent ``h0 > h_lb`` (which relies on Assumption 1).
    """
    inst = instance
    checks: list[Check] = [
        Check(
            "positive_q",
            bool(np.all(inst.q > 0)),
            tuple(int(i) for i in np.flatnonzero(inst.q <= 0)),
            float(inst.q.min()),
        ),
    ]
    with np.errstate(invalid="ignore"):
        checks.append(_slack_check("bounds_ordered", inst.u - inst.ell))

    gap = np.abs(inst.blocks(inst.c / inst.q).sum(axis=1) - inst.d)
    scale = tol.profile * (1.0 + np.abs(inst.d))
    checks.append(
        Check(
            "assumption1",
            bool(np.all(gap <= scale)),
            tuple(int(i) for i in np.flatnonzero(gap > scale)),
            float(-gap.max()),
        )
    )

    with np.errstate(invalid="ignore"):
        lo = inst.blocks(inst.ell).sum(axis=1)
        hi = inst.blocks(inst.u).sum(axis=1)
    feas_slack = np.minimum(-inst.d - lo, hi + inst.d) + scale
    checks.append(_slack_check("llp_feasible", feas_slack))
    checks.append(_slack_check("bounded", -inst.d + scale))

    checks.append(_slack_check("ell_nonpositive", -inst.ell))
    checks.append(_slack_check("u_nonnegative", inst.u))
    if reduced is not None:
        with np.errstate(invalid="ignore"):
            checks.append(_slack_check("u_gt_r", inst.u - reduced.r, tol.strict_margin))
        checks.append(Check("m_matrix", bool(reduced.cert_mmatrix.passed), (), -reduced.cert_mmatrix.value))
    else:
        # h0 - h_lb = u + c/q
        checks.append(_slack_check("u_gt_r", inst.u + inst.c / inst.q, tol.strict_margin))
    return ValidationReport({ch.name: ch for ch in checks})


# --------------------------------------------------------------------------
# instance files


def _reject_constant(token: str):
    raise ValueError(f"non-finite JSON constant {token!r} not allowed")


def profiles_to_json(profiles: Sequence[ProsumerProfile], grid_prices) -> str:
    doc = {
        "K": len(profiles[0].q),
        "grid_prices": [float(v) for v in grid_prices],
        "prosumers": [pr.to_dict() for pr in profiles],
    }
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def parse_profiles(text: str, source: str = "<string>") -> tuple[list[ProsumerProfile], np.ndarray]:
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from exc
    try:
        K = int(doc["K"])
        prices = np.asarray(doc["grid_prices"], dtype=float)
        raw = doc["prosumers"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{source}: missing or malformed top-level field {exc}") from exc
    if prices.shape != (K,):
        raise DimensionMismatch(f"{source}: grid_prices has {prices.size} entries, K={K}")
    profiles = []
    for i, entry in enumerate(raw):
        try:
            prof = ProsumerProfile(
                q=entry["q"], h0=entry["h0"], h_lb=entry["h_lb"],
                h_ub=entry["h_ub"], h_tot=entry["h_tot"], s=entry["s"],
            )
        except KeyError as exc:
            raise ValueError(f"{source}: prosumer {i} missing field {exc}") from exc
        for name in ("q", "h0", "h_lb", "h_ub", "s"):
            if len(getattr(prof, name)) != K:
                raise DimensionMismatch(f"{source}: prosumer {i} field {name} has length != K={K}")
        if np.any(prof.q < 0):
            raise InvalidProfile("q", "negative dissatisfaction weight", i)
        profiles.append(prof)
    return profiles, prices


def load_profiles(path) -> tuple[list[ProsumerProfile], np.ndarray]:
    path = Path(path)
    return parse_profiles(path.read_text(), str(path))


def load_instance(path, tol: Tolerances = DEFAULT) -> MarketInstance:
    profiles, prices = load_profiles(path)
    return assemble(profiles, prices, tol)


def save_profiles(path, profiles: Sequence[ProsumerProfile], grid_prices) -> None:
    Path(path).write_text(profiles_to_json(profiles, grid_prices))
