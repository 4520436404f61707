"""Seeded random market instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market_model import MarketInstance, ProsumerProfile, assemble


@dataclass(frozen=True)
class GeneratorConfig:
    """Sampling ranges for :func:`generate`.

    With ``hypothesis_mode`` every profile has ``h_lb = 0``,
    ``h_ub >= max(s, h0)`` and ``h0 > 0``, which is exactly what the
    convex-recovery hypotheses ask of prosumers.  ``net_producer`` keeps
    ``h_tot <= sum(s)`` per prosumer; without it the aggregator's problem is
    unbounded below (a uniform price shift does not change the response).
    """

    n: int = 2
    K: int = 3
    seed: int = 0
    q_range: tuple[float, float] = (0.5, 2.0)
    s_range: tuple[float, float] = (0.0, 2.0)
    h0_scale: float = 2.0
    h_ub_slack: tuple[float, float] = (0.0, 1.0)
    price_range: tuple[float, float] = (0.0, 3.0)
    hypothesis_mode: bool = True
    net_producer: bool = True
    demand_fraction: tuple[float, float] = (0.3, 1.0)


def generate_profiles(config: GeneratorConfig) -> tuple[list[ProsumerProfile], np.ndarray]:
    rng = np.random.default_rng(config.seed)
    K = config.K
    profiles = []
    for _ in range(config.n):
        q = rng.uniform(*config.q_range, size=K)
        s = rng.uniform(*config.s_range, size=K)
        while config.net_producer and s.sum() < 1e-6:
            s = rng.uniform(*config.s_range, size=K)
        # (0, h0_scale]: never exactly zero
        raw = config.h0_scale * (1.0 - rng.uniform(size=K))
        if config.net_producer:
            h_tot = s.sum() * rng.uniform(*config.demand_fraction)
        else:
            h_tot = raw.sum()
        h0 = raw * (h_tot / raw.sum())
        slack = rng.uniform(*config.h_ub_slack, size=K)
        if config.hypothesis_mode:
            h_lb = np.zeros(K)
            h_ub = np.maximum(s, h0) + slack
        else:
            h_lb = h0 * rng.uniform(0.0, 0.9, size=K)
            h_ub = h0 + slack
        profiles.append(ProsumerProfile(q=q, h0=h0, h_lb=h_lb, h_ub=h_ub, h_tot=float(h0.sum()), s=s))
    prices = rng.uniform(*config.price_range, size=K)
    return profiles, prices


def generate(config: GeneratorConfig) -> MarketInstance:
    profiles, prices = generate_profiles(config)
    return assemble(profiles, prices)
