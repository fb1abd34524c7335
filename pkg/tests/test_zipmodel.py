import json
import math

import numpy as np
import pytest

from spillover.zipmodel import (
    DataBatch,
    Encoding,
    ModelParams,
    exposure_prob,
    expected_visits,
    identification_null_basis,
    linear_predictor,
    log_likelihood,
    loglik_and_gradient,
    params_from_jsonable,
    params_to_jsonable,
    poisson_rate,
    project_identified,
    reexpress_params,
    visit_probabilities,
)
from conftest import finite_diff, make_batch, make_params

N_COV, N_GROUPS = 5, 2


def one_point(y=0.0, d=1.0, **kw):
    defaults = dict(y=np.array([y]), zi=np.zeros(1), zj=np.zeros(1),
                    vi=np.zeros(1, int), vj=np.zeros(1, int),
                    x=np.zeros((1, N_COV)), tt=np.zeros(1, int),
                    d=np.array([d], dtype=float), weight=np.ones(1))
    defaults.update(kw)
    return DataBatch(**defaults)


def zero_params(**kw):
    p = ModelParams.zeros(N_COV, N_GROUPS)
    for k, v in kw.items():
        setattr(p, k, v)
    return p


def test_rate_at_zero_params_is_one():
    lam, clamped = poisson_rate(zero_params(), one_point())
    assert lam[0] == 1.0 and clamped == 0


def test_rate_direct_evaluations():
    lam, _ = poisson_rate(zero_params(beta0=-2.0), one_point())
    assert lam[0] == pytest.approx(math.exp(-2.0))
    p = zero_params()
    p.beta_tt[0, 0, 1] = 0.3          # group 0, PR cell
    batch = one_point(tt=np.array([1]))
    lam, _ = poisson_rate(p, batch)
    assert lam[0] == pytest.approx(math.exp(0.3))


def test_rate_clamp_counted():
    lam, clamped = poisson_rate(zero_params(beta0=35.0), one_point())
    assert lam[0] == math.exp(30.0) and clamped == 1


def test_exposure_direct():
    assert exposure_prob(zero_params(), 0.0) == 1.0
    assert exposure_prob(zero_params(), 1.0) == pytest.approx(0.5)
    p = zero_params(log_alpha1=math.log(2.0), log_alpha2=math.log(2.0))
    assert exposure_prob(p, 3.0) == pytest.approx(1 / 19)


def test_loglik_hand_values():
    # pi = 1 (d = 0), lam = 0 impossible with exp; emulate with clamped
    # tiny rate: beta0 very negative makes lam ~ 0, y=0 ll -> log 1 = 0
    ll = log_likelihood(zero_params(beta0=-200.0), one_point(y=0, d=0.0))
    assert ll[0] == pytest.approx(0.0, abs=1e-12)
    # pi = 0.5 (alpha1=1, d=1), lam = 1: y = 0
    ll = log_likelihood(zero_params(), one_point(y=0, d=1.0))
    assert ll[0] == pytest.approx(math.log(0.5 + 0.5 * math.exp(-1)), abs=1e-12)
    assert ll[0] == pytest.approx(-0.37989, abs=1e-5)
    # same mixture, y = 2: log(0.5 * e^-1 / 2) = ln 0.5 - 1 - ln 2
    ll = log_likelihood(zero_params(), one_point(y=2, d=1.0))
    oracle = math.log(0.5 * 1.0 ** 2 * math.exp(-1) / math.factorial(2))
    assert oracle == pytest.approx(-2.386294, abs=1e-6)
    assert ll[0] == pytest.approx(oracle, abs=1e-12)


def test_pmf_sums_to_one():
    params = make_params(5, N_COV, N_GROUPS)
    batch = make_batch(6, 40, N_COV, N_GROUPS)
    pmf = visit_probabilities(params, batch, y_max=400)
    assert np.all(np.abs(pmf.sum(axis=1) - 1.0) < 1e-9)
    assert (exposure_prob(params, batch.d) > 0).all()
    assert (exposure_prob(params, batch.d) <= 1).all()


def test_expected_visits_series_oracle():
    params = make_params(7, N_COV, N_GROUPS)
    batch = make_batch(8, 25, N_COV, N_GROUPS)
    pmf = visit_probabilities(params, batch, y_max=200)
    series = pmf @ np.arange(201)
    assert np.allclose(expected_visits(params, batch), series, atol=1e-9)
    # direct cases
    assert expected_visits(zero_params(beta0=math.log(2.5)),
                           one_point(d=0.0))[0] == pytest.approx(2.5)
    assert expected_visits(zero_params(), one_point(d=1.0))[0] == pytest.approx(0.5)


def test_gradient_simple_y_positive_case():
    # d logL / d beta0 = y - lam for exposed counts
    params = make_params(9, N_COV, N_GROUPS)
    batch = make_batch(10, 1, N_COV, N_GROUPS, y_values=(3,))
    lam, _ = poisson_rate(params, batch)
    _, grad, _ = loglik_and_gradient(params, batch)
    assert grad[0] == pytest.approx(batch.weight[0] * (3 - lam[0]), rel=1e-12)


def test_gradient_zero_covariate_column():
    params = make_params(11, N_COV, N_GROUPS)
    batch = make_batch(12, 30, N_COV, N_GROUPS)
    batch.x[:, 2] = 0.0
    _, grad, _ = loglik_and_gradient(params, batch)
    k = 1 + 8 + 2                    # beta3[2] position in the flat vector
    assert grad[k] == 0.0


def test_gradient_matches_finite_differences():
    for trial in range(12):
        params = make_params(100 + trial, N_COV, N_GROUPS)
        batch = make_batch(200 + trial, 7, N_COV, N_GROUPS)

        def f(vec):
            p = ModelParams.from_vector(vec, N_COV, N_GROUPS)
            ll, _, _ = loglik_and_gradient(p, batch)
            return ll

        vec = params.to_vector()
        _, grad, _ = loglik_and_gradient(params, batch)
        fd = finite_diff(f, vec)
        denom = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(grad - fd) / denom) < 1e-6


def test_gradient_chunked_matches_single_and_workers():
    params = make_params(31, N_COV, N_GROUPS)
    batch = make_batch(32, 70_000, N_COV, N_GROUPS)   # crosses chunk boundary
    ll1, g1, c1 = loglik_and_gradient(params, batch, workers=1)
    ll4, g4, c4 = loglik_and_gradient(params, batch, workers=4)
    assert ll1 == ll4 and c1 == c4
    assert np.array_equal(g1, g4)


def test_treatment_ratio_identity():
    # exp(beta_PR - beta_PP) equals the ratio of expected visits exactly
    params = make_params(41, N_COV, N_GROUPS)
    base = make_batch(42, 1, N_COV, N_GROUPS)
    pr = DataBatch(**{**base.__dict__, "tt": np.array([0 * 4 + 1])})
    pp = DataBatch(**{**base.__dict__, "tt": np.array([0 * 4 + 0])})
    ratio = expected_visits(params, pr)[0] / expected_visits(params, pp)[0]
    want = math.exp(params.beta_tt[0, 0, 1] - params.beta_tt[0, 0, 0])
    assert ratio == pytest.approx(want, rel=1e-12)


def test_vector_round_trip():
    params = make_params(51, N_COV, N_GROUPS)
    back = ModelParams.from_vector(params.to_vector(), N_COV, N_GROUPS)
    assert back.to_vector().tolist() == params.to_vector().tolist()


def test_artifact_json_round_trip_lossless():
    params = make_params(61, N_COV, N_GROUPS)
    enc = Encoding(groups=("g1", "g2"), demographic_names=("d1", "d2"),
                   scalar_mean=np.array([3.3, 5.1, 0.123456789012345, -3.0, 8.1]),
                   scalar_std=np.array([1.1, 0.4, 1.5, 0.25, 0.77]))
    blob = json.dumps(params_to_jsonable(params, enc))
    back, enc2 = params_from_jsonable(json.loads(blob))
    assert np.array_equal(back.to_vector(), params.to_vector())
    assert np.array_equal(enc2.scalar_mean, enc.scalar_mean)
    assert np.array_equal(enc2.scalar_std, enc.scalar_std)
    assert enc2.groups == enc.groups


def test_reexpress_params_preserves_rate():
    raw = Encoding.identity(("g1", "g2"), ("d1", "d2", "d3"))
    std = Encoding(groups=("g1", "g2"), demographic_names=("d1", "d2", "d3"),
                   scalar_mean=np.array([3.0, 5.2, 0.2, -0.4, 1.0, 8.3]),
                   scalar_std=np.array([0.9, 0.3, 1.3, 0.8, 2.0, 0.6]))
    n_cov = raw.n_covariates
    n_s = raw.n_scalars
    params = make_params(71, n_cov, 2)
    moved = reexpress_params(params, raw, std)
    g = np.random.default_rng(0)
    # same underlying cell: raw covariates vs standardized covariates
    raw_x = g.normal(0, 1, (20, n_cov))
    raw_x[:, 0] = g.uniform(0, 3, 20)
    std_x = raw_x.copy()
    std_x[:, :n_s] = (raw_x[:, :n_s] - std.scalar_mean) / std.scalar_std
    common = dict(y=np.zeros(20), zi=g.normal(0, 1, 20), zj=g.normal(0, 1, 20),
                  vi=g.integers(0, 4, 20), vj=g.integers(0, 4, 20),
                  tt=g.integers(0, 8, 20), d=g.uniform(0, 10, 20),
                  weight=np.ones(20))
    eta_raw = linear_predictor(params, DataBatch(x=raw_x, **common))
    eta_std = linear_predictor(moved, DataBatch(x=std_x, **common))
    assert np.allclose(eta_raw, eta_std, atol=1e-12)


def test_identified_projection_kills_null_directions():
    enc = Encoding.identity(("g1", "g2"), ("d1",))
    basis = identification_null_basis(enc)
    g = np.random.default_rng(3)
    vec = g.normal(0, 1, basis.shape[0])
    proj = project_identified(vec, enc)
    # orthogonal to every null direction, and idempotent
    assert np.allclose(basis.T @ proj, 0.0, atol=1e-12)
    assert np.allclose(project_identified(proj, enc), proj, atol=1e-12)
    # null directions leave the linear predictor unchanged
    params = ModelParams.from_vector(vec, enc.n_covariates, enc.n_groups)
    moved = ModelParams.from_vector(vec + basis @ np.array([0.7, -0.3, 1.1]),
                                    enc.n_covariates, enc.n_groups)
    batch = make_batch(5, 30, enc.n_covariates, enc.n_groups)
    # onehot block must be consistent with tt's group for the identity to hold
    batch.x[:, enc.onehot_slice] = 0.0
    batch.x[np.arange(30), enc.onehot_slice.start + batch.tt // 4] = 1.0
    assert np.allclose(linear_predictor(params, batch),
                       linear_predictor(moved, batch), atol=1e-12)
