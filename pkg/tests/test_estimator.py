import itertools

import numpy as np
import pytest

from spillover.assignment import FilterConfig, compute_assignments, filter_dataset
from spillover.domain import ValidationError
from spillover.estimator import (
    FitConfig,
    assemble_negative_batch,
    assemble_nonzero_batch,
    bootstrap,
    corrected_loss_and_gradient,
    draw_sample,
    fit,
    sampling_probabilities,
    scale_to_target,
    spillover_effects,
    training_encoding,
)
from spillover.zipmodel import DataBatch, loglik_and_gradient
from conftest import TOY_REGIME, WEEK0, build_toy, make_params


def toy_filtered(edges=((WEEK0, "A-b1", "B-p1", 3), (WEEK0, "B-b1", "A-p1", 1))):
    ds = build_toy({"A": 1.0, "B": -1.0, "C": 2.0}, edges=list(edges))
    recs = compute_assignments(ds, (TOY_REGIME,))
    return filter_dataset(ds, recs, FilterConfig(bandwidth=5.0))


def test_scale_to_target_hand_case():
    # two zeros at d=0 and d=1: raw 1/(1+d) = (1, 0.5); target 1.5 -> (1, 0.5)
    s = scale_to_target(np.array([1.0, 0.5]), 1.5)
    assert s.tolist() == [1.0, 0.5]
    # clamping: strongly skewed weights, target beyond proportional scaling
    s = scale_to_target(np.array([10.0, 1.0, 1.0]), 2.0)
    assert s[0] == 1.0
    assert s.sum() == pytest.approx(2.0, rel=1e-9)
    assert ((0 < s) & (s <= 1)).all()


def test_scale_to_target_infeasible():
    # target above the cell count cannot be met with probabilities <= 1
    with pytest.raises(ValidationError):
        scale_to_target(np.array([1.0, 1.0]), 3.0)


def test_sampling_probabilities_full_fraction():
    f = toy_filtered()
    for mode in ("uniform", "inv-distance"):
        plan = sampling_probabilities(f, 1.0, mode)
        assert all((s == 1.0).all() for s in plan.probabilities)


def test_sampling_probabilities_uniform():
    f = toy_filtered()
    plan = sampling_probabilities(f, 0.25, "uniform")
    for s in plan.probabilities:
        assert np.allclose(s, 0.25)
    total = sum(s.sum() for s in plan.probabilities)
    assert total == pytest.approx(0.25 * plan.total_zeros)


def test_sampling_probabilities_inverse_distance_sum():
    f = toy_filtered()
    plan = sampling_probabilities(f, 0.3, "inv-distance")
    total = sum(s.sum() for s in plan.probabilities)
    assert total == pytest.approx(0.3 * plan.total_zeros, rel=1e-6)
    # nearer zero cells get higher probabilities
    d = plan.as_dict()
    assert len(d) == plan.total_zeros


def test_draw_sample_deterministic_and_complete():
    f = toy_filtered()
    plan = sampling_probabilities(f, 1.0, "uniform")
    s1 = draw_sample(plan, seed=4)
    assert s1.size == plan.total_zeros          # s=1 includes everything
    plan2 = sampling_probabilities(f, 0.5, "uniform")
    a = draw_sample(plan2, seed=9)
    b = draw_sample(plan2, seed=9)
    assert [p.tolist() for p in a.block_positions] == \
           [p.tolist() for p in b.block_positions]


def test_draw_sample_binomial_concentration():
    g = np.random.default_rng(0)
    # standalone check of the keyed Bernoulli at scale
    from spillover import rng as crng
    n = 100_000
    keep = crng.bernoulli(12, 0.5, np.arange(n))
    se = np.sqrt(0.25 / n)
    assert abs(keep.mean() - 0.5) < 4 * se


def test_corrected_loss_equals_full_data_at_s1():
    f = toy_filtered()
    enc = training_encoding(f)
    params = make_params(3, enc.n_covariates, enc.n_groups)
    nonzero = assemble_nonzero_batch(f, enc)
    plan = sampling_probabilities(f, 1.0, "inv-distance")
    neg = assemble_negative_batch(draw_sample(plan, 0), enc)
    loss, grad, _ = corrected_loss_and_gradient(params, nonzero, neg)
    # direct full-data loss: all cells with weight 1
    assert np.allclose(neg.weight, 1.0)
    full = DataBatch.concatenate([nonzero, neg])
    ll, g, _ = loglik_and_gradient(params, full)
    assert loss == pytest.approx(-ll, rel=1e-12)
    assert np.allclose(grad, -g, rtol=1e-12)


@pytest.mark.parametrize("mode", ["uniform", "inv-distance"])
def test_exact_unbiasedness_over_all_inclusion_outcomes(mode):
    """Enumerate every inclusion pattern of the zero cells: the expectation
    of the corrected gradient must equal the full-data gradient exactly."""
    f = toy_filtered()
    enc = training_encoding(f)
    params = make_params(8, enc.n_covariates, enc.n_groups)
    nonzero = assemble_nonzero_batch(f, enc)
    plan = sampling_probabilities(f, 0.4, mode)
    full_plan = sampling_probabilities(f, 1.0, mode)
    all_zeros = assemble_negative_batch(draw_sample(full_plan, 0), enc)
    n_zeros = len(all_zeros)
    assert n_zeros <= 12
    s = np.concatenate([p for p in plan.probabilities if len(p)])
    # per-zero-cell gradient of logL (weight 1)
    _, loss_full_grad, _ = corrected_loss_and_gradient(params, nonzero, None)
    per_zero = []
    for i in range(n_zeros):
        one = all_zeros.slice(np.array([i]))
        one.weight[:] = 1.0
        _, g, _ = loglik_and_gradient(params, one)
        per_zero.append(g)
    per_zero = np.array(per_zero)
    full_grad = loss_full_grad - per_zero.sum(axis=0)

    expect = np.zeros_like(full_grad)
    for pattern in itertools.product([0, 1], repeat=n_zeros):
        b = np.array(pattern, dtype=float)
        prob = float(np.prod(np.where(b == 1, s, 1 - s)))
        grad = loss_full_grad - ((b / s)[:, None] * per_zero).sum(axis=0)
        expect += prob * grad
    assert np.max(np.abs(expect - full_grad)) < 1e-12 * max(
        1.0, np.max(np.abs(full_grad)))


def test_variance_formula_and_ordering():
    f = toy_filtered()
    enc = training_encoding(f)
    params = make_params(5, enc.n_covariates, enc.n_groups)
    full_plan = sampling_probabilities(f, 1.0, "uniform")
    all_zeros = assemble_negative_batch(draw_sample(full_plan, 0), enc)
    n_zeros = len(all_zeros)
    per_zero = []
    for i in range(n_zeros):
        one = all_zeros.slice(np.array([i]))
        one.weight[:] = 1.0
        _, g, _ = loglik_and_gradient(params, one)
        per_zero.append(g)
    per_zero = np.array(per_zero)

    def closed_form(s):
        return ((1.0 / s - 1.0)[:, None] * per_zero ** 2).sum(axis=0)

    for mode in ("uniform", "inv-distance"):
        plan = sampling_probabilities(f, 0.5, mode)
        s = np.concatenate([p for p in plan.probabilities if len(p)])
        want = closed_form(s)
        g = np.random.default_rng(17)
        draws = g.random((20_000, n_zeros)) < s
        sims = (draws / s) @ per_zero          # gradient contribution of zeros
        got = sims.var(axis=0, ddof=1)
        mask = want > 1e-12
        assert np.max(np.abs(got[mask] - want[mask]) / want[mask]) < 0.05
        assert np.allclose(got[~mask], 0.0, atol=1e-12)
    # s = 1 everywhere: exactly zero variance
    assert np.allclose(closed_form(np.ones(n_zeros)), 0.0)
    # inverse-distance beats uniform per coordinate sum at equal sample size
    su = np.concatenate(sampling_probabilities(f, 0.5, "uniform").probabilities)
    sd = np.concatenate(sampling_probabilities(f, 0.5, "inv-distance").probabilities)
    assert closed_form(sd).sum() <= closed_form(su).sum()


def test_fit_zero_epochs_returns_init(small_world):
    f = small_world.filtered(bandwidth=5.0)
    r = fit(f, FitConfig(epochs=0, seed=1))
    assert np.allclose(r.params.to_vector(), 0.0)
    assert r.trace == []


def test_fit_deterministic_same_seed(small_world):
    f = small_world.filtered(bandwidth=5.0)
    cfg = FitConfig(epochs=8, seed=5, sample_frac=0.2)
    r1 = fit(f, cfg)
    r2 = fit(f, cfg)
    assert np.array_equal(r1.params.to_vector(), r2.params.to_vector())


def test_fit_multiworker_bitwise(small_world):
    f = small_world.filtered(bandwidth=5.0)
    r1 = fit(f, FitConfig(epochs=6, seed=5, sample_frac=0.2, workers=1))
    r4 = fit(f, FitConfig(epochs=6, seed=5, sample_frac=0.2, workers=4))
    assert np.array_equal(r1.params.to_vector(), r4.params.to_vector())


def test_bootstrap_and_effects(small_world):
    f = small_world.filtered(bandwidth=5.0)
    cfg = FitConfig(epochs=30, seed=2, sample_frac=0.2,
                    redraw_per_epoch=False, workers=2)
    result = bootstrap(f, cfg, trials=4)
    assert result.trials.shape[0] == 4
    rows = spillover_effects(result)
    groups = {r.group for r in rows}
    assert groups == set(result.encoding.groups)
    conds = {r.condition for r in rows}
    assert conds == {"PR", "RP", "RR"}
    for r in rows:
        if r.available:
            assert r.lo <= r.mean <= r.hi


def test_bootstrap_sampling_only_narrower(small_world):
    f = small_world.filtered(bandwidth=5.0)
    cfg = FitConfig(epochs=25, seed=3, sample_frac=0.1, redraw_per_epoch=False)
    full = bootstrap(f, cfg, trials=5)
    sampling_only = bootstrap(f, cfg, trials=5, resample_nonzeros=False)
    # uncertainty from negative sampling alone is far smaller than the
    # data bootstrap, on average over parameters
    assert sampling_only.sd.mean() < full.sd.mean()


def test_effect_rows_identical_betas_give_unit_ratio(small_world):
    f = small_world.filtered(bandwidth=5.0)
    cfg = FitConfig(epochs=5, seed=2, sample_frac=0.2)
    result = bootstrap(f, cfg, trials=3)
    pinned = result.trials.copy()
    enc = result.encoding
    tt0 = 1 + 8 + enc.n_covariates
    for g in range(enc.n_groups):            # force PR == PP in every trial
        pinned[:, tt0 + 4 * g + 1] = pinned[:, tt0 + 4 * g]
    result.trials = pinned
    rows = [r for r in spillover_effects(result) if r.condition == "PR"]
    for r in rows:
        assert r.mean == pytest.approx(1.0)
        assert (r.lo, r.hi) == (pytest.approx(1.0), pytest.approx(1.0))
