import numpy as np
import pytest

from spillover import rng, synth
from spillover.domain import Tier
from spillover.zipmodel import DataBatch, visit_probabilities
from conftest import make_params


def test_world_deterministic(small_world):
    again = synth.generate_world(synth.WorldConfig(seed=3))
    ds1, ds2 = small_world.dataset, again.dataset
    assert np.array_equal(ds1.edge_visits, ds2.edge_visits)
    assert np.array_equal(ds1.devices, ds2.devices)
    assert [c.population for c in ds1.counties] == [c.population for c in ds2.counties]


def test_world_all_compliant_without_injection(small_world):
    assert all(r.compliant for r in small_world.records.values())
    assert not small_world.injected_noncompliers


def test_world_condition_support(small_world):
    f = small_world.filtered(bandwidth=float("inf"))
    counts = {c: v["nonzero_triples"] for c, v in f.condition_counts.items()}
    assert all(counts[c] > 0 for c in ("PP", "PR", "RP", "RR"))


def test_noncomplier_injection_rate():
    cfg = synth.WorldConfig(seed=5, n_counties=40, n_weeks=8,
                            cbgs_per_county=(1, 2), pois_per_county=(1, 2),
                            noncomplier_rate=0.05)
    w = synth.generate_world(cfg)
    n_cw = cfg.n_counties * cfg.n_weeks
    k = len(w.injected_noncompliers)
    se = np.sqrt(0.05 * 0.95 * n_cw)
    assert abs(k - 0.05 * n_cw) < 4 * se
    # injected set is exactly the non-compliant set
    flagged = {(r.county, r.week) for r in w.records.values() if not r.compliant}
    assert flagged == w.injected_noncompliers


def test_tiers_match_score_sign(small_world):
    for r in small_world.records.values():
        assert r.tier is (Tier.RED if r.z < 0 else Tier.PURPLE)


def test_simulated_moments_match_model():
    """Zero share and mean of the simulated counts match the mixture at
    fixed pi and lambda."""
    n = 1_000_000
    pi, lam = 0.3, 0.8
    b = rng.bernoulli(1, pi, np.arange(n))
    y = np.zeros(n)
    y[b] = rng.poisson(2, np.full(int(b.sum()), lam), np.flatnonzero(b))
    p0 = (1 - pi) + pi * np.exp(-lam)
    se0 = np.sqrt(p0 * (1 - p0) / n)
    assert abs((y == 0).mean() - p0) < 4 * se0
    mean = pi * lam
    var = pi * lam * (1 + lam) - mean ** 2
    assert abs(y.mean() - mean) < 4 * np.sqrt(var / n)


def test_simulator_consistent_with_likelihood(small_world):
    """The planted parameters beat perturbed ones on simulated data."""
    from spillover.estimator import (FitConfig, assemble_nonzero_batch,
                                     draw_sample, sampling_probabilities,
                                     assemble_negative_batch,
                                     corrected_loss_and_gradient)
    w = small_world
    f = w.filtered(bandwidth=float("inf"))
    enc = w.planted_encoding
    nonzero = assemble_nonzero_batch(f, enc)
    plan = sampling_probabilities(f, 1.0, "uniform")
    zeros = assemble_negative_batch(draw_sample(plan, 0), enc)
    wins = 0
    reps = 20
    g = np.random.default_rng(8)
    for _ in range(reps):
        delta = g.normal(0, 1, w.planted.to_vector().shape)
        delta *= 0.5 / np.linalg.norm(delta)
        perturbed = type(w.planted).from_vector(
            w.planted.to_vector() + delta, enc.n_covariates, enc.n_groups)
        l_true, _, _ = corrected_loss_and_gradient(w.planted, nonzero, zeros)
        l_pert, _, _ = corrected_loss_and_gradient(perturbed, nonzero, zeros)
        wins += l_true < l_pert
    assert wins >= 0.95 * reps


def test_config_round_trip():
    cfg = synth.WorldConfig(seed=9, n_counties=7, noncomplier_rate=0.02)
    back = synth.config_from_jsonable(synth.config_to_jsonable(cfg))
    assert back == cfg


def test_missing_support_warning(caplog):
    # a world whose counties are all far in purple territory has no RP/PR
    import logging
    cfg = synth.WorldConfig(seed=1, n_counties=6, n_weeks=2, cr_spread=0.0,
                            tp_spread=0.0)
    with caplog.at_level(logging.WARNING, logger="spillover.synth"):
        w = synth.generate_world(cfg)
    counts = {r.tier for r in w.records.values()}
    if counts == {Tier.PURPLE} or counts == {Tier.RED}:
        assert any("support" in rec.message for rec in caplog.records)
