"""Shared fixtures: a hand-built toy world with controllable assignment
scores, random model batches, and a finite-difference oracle."""

from datetime import date, timedelta

import numpy as np
import pytest

from spillover.assignment import ThresholdRegime
from spillover.domain import County, CountyWeekMetrics, Tier, build_dataset
from spillover.zipmodel import DataBatch, ModelParams

TOY_REGIME = ThresholdRegime(cr_red=7.0, tp_red=8.0, he_red=8.0,
                             tp_orange=5.0, he_orange=5.0,
                             effective_from=date(2020, 8, 31))
WEEK0 = date(2021, 2, 1)


def metrics_for_z(county: str, week: date, z: float, large: bool) -> CountyWeekMetrics:
    """Metrics that make the assignment score exactly z under TOY_REGIME
    (same values both weeks: case rate drives the red path, positivity and
    equity pin the orange path at the same margin)."""
    return CountyWeekMetrics(county=county, week=week,
                             case_rate=7.0 + z,
                             test_positivity=5.0 + z,
                             health_equity=(5.0 + z) if large else None)


def build_toy(z_by_county: dict[str, float],
              tier_override: dict[tuple[str, date], Tier] | None = None,
              edges=(), n_weeks: int = 1,
              adjacency=(("A", "B"), ("B", "C"))):
    """Three-county world (A large; B, C small), controllable z per county
    (constant over weeks), tiers derived from z unless overridden."""
    counties = [County("A", 500_000), County("B", 50_000), County("C", 60_000)]
    weeks = [WEEK0 + timedelta(days=7 * i) for i in range(n_weeks)]
    metrics, tiers = [], {}
    for c in counties:
        z = z_by_county[c.id]
        for w in [WEEK0 - timedelta(days=7)] + weeks:
            metrics.append(metrics_for_z(c.id, w, z, c.is_large))
        for w in weeks:
            tier = Tier.RED if z < 0 else Tier.PURPLE
            tiers[(c.id, w)] = tier
    if tier_override:
        tiers.update(tier_override)
    cbgs = [
        ("A-b1", "A", 37.00, -120.00, (0.5, -0.2)),
        ("A-b2", "A", 37.02, -120.01, (-1.0, 0.3)),
        ("B-b1", "B", 37.30, -120.00, (0.1, 0.1)),
        ("C-b1", "C", 37.60, -120.00, (0.0, -0.5)),
    ]
    pois = [
        ("A-p1", "A", 37.01, -120.02, "g1", 4000.0),
        ("B-p1", "B", 37.31, -120.01, "g1", 6000.0),
        ("B-p2", "B", 37.32, -120.02, "g2", 2500.0),
        ("C-p1", "C", 37.61, -120.01, "g2", 9000.0),
    ]
    devices = {(c[0], w): 100.0 + 10 * i
               for i, c in enumerate(cbgs) for w in weeks}
    return build_dataset(counties, adjacency, weeks, metrics, tiers,
                         cbgs, pois, devices, list(edges))


def make_batch(seed: int, n: int, n_cov: int = 5, n_groups: int = 2,
               y_values=(0, 0, 1, 2, 5)) -> DataBatch:
    g = np.random.default_rng(seed)
    return DataBatch(
        y=np.array([y_values[i % len(y_values)] for i in range(n)], dtype=float),
        zi=g.uniform(-5, 5, n),
        zj=g.uniform(-5, 5, n),
        vi=g.integers(0, 4, n),
        vj=g.integers(0, 4, n),
        x=g.normal(0, 1, (n, n_cov)),
        tt=g.integers(0, 4 * n_groups, n),
        d=np.concatenate([[0.0], g.uniform(0.05, 60.0, n - 1)]),
        weight=g.uniform(0.5, 3.0, n))


def make_params(seed: int, n_cov: int = 5, n_groups: int = 2,
                scale: float = 0.4) -> ModelParams:
    g = np.random.default_rng(seed + 1)
    return ModelParams(
        beta0=float(g.normal(0, scale)),
        beta1=g.normal(0, 0.05, 4),
        beta2=g.normal(0, 0.05, 4),
        beta3=g.normal(0, scale / 2, n_cov),
        beta_tt=g.normal(0, scale / 2, (n_groups, 2, 2)),
        log_alpha1=float(g.normal(-0.5, 0.4)),
        log_alpha2=float(g.normal(0.1, 0.3)))


def finite_diff(f, vec: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(vec)
    for i in range(len(vec)):
        up, dn = vec.copy(), vec.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


@pytest.fixture(scope="session")
def small_world():
    from spillover import synth
    return synth.generate_world(synth.WorldConfig(seed=3))
