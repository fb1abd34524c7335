"""Zero-inflated Poisson visit model.

A visit count is a mixture of a point mass at zero (non-exposure, with
distance-decaying exposure probability pi = 1 / (1 + a1 * d^a2)) and a
Poisson whose log-rate is linear in the assignment scores, covariates and a
per-(group, tier-pair) treatment weight. Everything here is vectorized over
flat point batches and pure; gradient accumulation reduces over fixed-size
chunks so results are independent of worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .assignment import VARIANT_NAMES
from .domain import CONDITIONS, MobilityDataset

#: Linear predictors are clamped here before exponentiation; clamp events
#: are counted and reported in fit traces.
EXPONENT_CLAMP = 30.0

N_VARIANTS = len(VARIANT_NAMES)
GRAD_CHUNK = 65_536


@dataclass(frozen=True)
class Encoding:
    """Covariate layout and standardization constants for one fitted model.

    Column order: log1p(distance km), log(device count), demographics,
    log(POI area), POI-group one-hot block. Every scalar column is
    standardized with constants persisted here (one-hots are left raw);
    the raw distance is carried separately for the exposure term.
    """

    groups: tuple[str, ...]
    demographic_names: tuple[str, ...]
    scalar_mean: np.ndarray        # (2 + D + 1,) over the scalar columns
    scalar_std: np.ndarray

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_scalars(self) -> int:
        return 2 + len(self.demographic_names) + 1

    @property
    def n_covariates(self) -> int:
        return self.n_scalars + len(self.groups)

    @property
    def scalar_names(self) -> tuple[str, ...]:
        return ("log1p_distance_km", "log_devices", *self.demographic_names,
                "log_area")

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return (*self.scalar_names, *(f"group_{g}" for g in self.groups))

    @property
    def onehot_slice(self) -> slice:
        return slice(self.n_scalars, self.n_scalars + len(self.groups))

    def cell_index(self, group_idx, ti, tj):
        """Flat index of the (group, cbg tier, poi tier) treatment cell."""
        return np.asarray(group_idx) * 4 + np.asarray(ti) * 2 + np.asarray(tj)

    @classmethod
    def identity(cls, groups: Sequence[str],
                 demographic_names: Sequence[str]) -> "Encoding":
        """No-op standardization (raw covariate coordinates)."""
        n = 2 + len(demographic_names) + 1
        return cls(tuple(groups), tuple(demographic_names), np.zeros(n), np.ones(n))

    @classmethod
    def from_dataset(cls, dataset: MobilityDataset,
                     cbg_rows: np.ndarray | None = None,
                     poi_rows: np.ndarray | None = None,
                     distance_stats: tuple[float, float] = (0.0, 1.0),
                     device_stats: tuple[float, float] = (0.0, 1.0)) -> "Encoding":
        """Standardization from the distinct CBGs/POIs of a training sample
        (defaults to the whole dataset). Distance and device statistics vary
        per cell, so the caller supplies them."""
        cbg_rows = np.arange(len(dataset.cbg_ids)) if cbg_rows is None else cbg_rows
        poi_rows = np.arange(len(dataset.poi_ids)) if poi_rows is None else poi_rows
        demo = dataset.cbg_demographics[cbg_rows]
        log_area = np.log(dataset.poi_area[poi_rows])
        mean = np.concatenate([[distance_stats[0], device_stats[0]],
                               demo.mean(axis=0), [log_area.mean()]])
        std = np.concatenate([[distance_stats[1], device_stats[1]],
                              demo.std(axis=0), [log_area.std()]])
        std = np.where(std > 1e-12, std, 1.0)
        return cls(tuple(dataset.groups), tuple(dataset.demographic_names),
                   mean, std)

    def covariates(self, dataset: MobilityDataset, cbg_idx: np.ndarray,
                   poi_idx: np.ndarray, devices: np.ndarray,
                   d_km: np.ndarray) -> np.ndarray:
        """Covariate matrix for aligned cell arrays, in this encoding."""
        n = len(cbg_idx)
        x = np.zeros((n, self.n_covariates))
        x[:, 0] = np.log1p(d_km)
        x[:, 1] = np.log(devices)
        d = len(self.demographic_names)
        x[:, 2:2 + d] = dataset.cbg_demographics[cbg_idx]
        x[:, 2 + d] = np.log(dataset.poi_area[poi_idx])
        x[:, :self.n_scalars] = (x[:, :self.n_scalars] - self.scalar_mean) / self.scalar_std
        x[np.arange(n), self.onehot_slice.start + dataset.poi_group[poi_idx]] = 1.0
        return x

    def to_jsonable(self) -> dict:
        return {"groups": list(self.groups),
                "demographic_names": list(self.demographic_names),
                "scalar_names": list(self.scalar_names),
                "scalar_mean": self.scalar_mean.tolist(),
                "scalar_std": self.scalar_std.tolist()}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "Encoding":
        return cls(tuple(obj["groups"]), tuple(obj["demographic_names"]),
                   np.array(obj["scalar_mean"], dtype=float),
                   np.array(obj["scalar_std"], dtype=float))


@dataclass
class ModelParams:
    """All learnable parameters. Exposure decay parameters are kept in log
    space so positivity is structural."""

    beta0: float
    beta1: np.ndarray          # (4,) score slope of the cbg county, by variant
    beta2: np.ndarray          # (4,) score slope of the poi county, by variant
    beta3: np.ndarray          # (n_covariates,)
    beta_tt: np.ndarray        # (n_groups, 2, 2) treatment cells, tiers P=0/R=1
    log_alpha1: float
    log_alpha2: float

    @property
    def alpha1(self) -> float:
        return float(np.exp(self.log_alpha1))

    @property
    def alpha2(self) -> float:
        return float(np.exp(self.log_alpha2))

    @property
    def n_groups(self) -> int:
        return self.beta_tt.shape[0]

    @classmethod
    def zeros(cls, n_covariates: int, n_groups: int) -> "ModelParams":
        return cls(0.0, np.zeros(N_VARIANTS), np.zeros(N_VARIANTS),
                   np.zeros(n_covariates), np.zeros((n_groups, 2, 2)), 0.0, 0.0)

    def copy(self) -> "ModelParams":
        return replace(self, beta1=self.beta1.copy(), beta2=self.beta2.copy(),
                       beta3=self.beta3.copy(), beta_tt=self.beta_tt.copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.beta1, self.beta2, self.beta3,
                               self.beta_tt.ravel(),
                               [self.log_alpha1, self.log_alpha2]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_covariates: int,
                    n_groups: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        expected = 1 + 2 * N_VARIANTS + n_covariates + 4 * n_groups + 2
        if vec.shape != (expected,):
            raise ValueError(f"parameter vector must have length {expected}")
        i = 1 + N_VARIANTS
        j = i + N_VARIANTS
        k = j + n_covariates
        m = k + 4 * n_groups
        return cls(float(vec[0]), vec[1:i].copy(), vec[i:j].copy(),
                   vec[j:k].copy(), vec[k:m].reshape(n_groups, 2, 2).copy(),
                   float(vec[m]), float(vec[m + 1]))


def param_names(encoding: Encoding) -> list[str]:
    names = ["beta0"]
    names += [f"beta1[{v}]" for v in VARIANT_NAMES]
    names += [f"beta2[{v}]" for v in VARIANT_NAMES]
    names += [f"beta3[{c}]" for c in encoding.covariate_names]
    for g in encoding.groups:
        names += [f"beta_tt[{g}|{c}]" for c in CONDITIONS]
    names += ["log_alpha1", "log_alpha2"]
    return names


@dataclass
class DataBatch:
    """Flat batch of data points with pre-resolved integer codes.

    `tt` is the flat treatment-cell index (group * 4 + ti * 2 + tj), `vi`/`vj`
    are slope-variant indices, `weight` is the per-point loss weight (1 for
    observed non-zeros, 1/s for sampled zeros).
    """

    y: np.ndarray
    zi: np.ndarray
    zj: np.ndarray
    vi: np.ndarray
    vj: np.ndarray
    x: np.ndarray
    tt: np.ndarray
    d: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def slice(self, sl) -> "DataBatch":
        """Subset by slice or index array (fancy indexing keeps duplicates)."""
        return DataBatch(*(getattr(self, f)[sl] for f in
                           ("y", "zi", "zj", "vi", "vj", "x", "tt", "d", "weight")))

    @staticmethod
    def concatenate(batches: Sequence["DataBatch"]) -> "DataBatch":
        fields = ("y", "zi", "zj", "vi", "vj", "x", "tt", "d", "weight")
        return DataBatch(*(np.concatenate([getattr(b, f) for b in batches])
                           for f in fields))


def linear_predictor(params: ModelParams, batch: DataBatch) -> np.ndarray:
    """Unclamped log-rate."""
    return (params.beta0
            + params.beta1[batch.vi] * batch.zi
            + params.beta2[batch.vj] * batch.zj
            + batch.x @ params.beta3
            + params.beta_tt.reshape(-1)[batch.tt])


def poisson_rate(params: ModelParams, batch: DataBatch) -> tuple[np.ndarray, int]:
    """Poisson rate exp(eta) with the exponent clamped at EXPONENT_CLAMP;
    returns (rates, number of clamped points)."""
    eta = linear_predictor(params, batch)
    clamped = eta > EXPONENT_CLAMP
    return np.exp(np.minimum(eta, EXPONENT_CLAMP)), int(clamped.sum())


def exposure_prob(params: ModelParams, d) -> np.ndarray:
    """Exposure probability 1 / (1 + a1 * d^a2); equals 1 at d = 0."""
    d = np.asarray(d, dtype=float)
    return 1.0 / (1.0 + params.alpha1 * d ** params.alpha2)


def _zero_terms(params: ModelParams, d: np.ndarray, lam: np.ndarray):
    """Stable pieces of the y = 0 likelihood: t, log(pi), log(1-pi), ll."""
    t = params.alpha1 * d ** params.alpha2
    log1p_t = np.log1p(t)
    log_pi = -log1p_t
    with np.errstate(divide="ignore"):
        log_1mpi = np.log(t) - log1p_t
    ll = np.logaddexp(log_1mpi, log_pi - lam)
    return t, log_pi, log_1mpi, ll


def log_likelihood(params: ModelParams, batch: DataBatch) -> np.ndarray:
    """Per-point log-likelihood (unweighted)."""
    eta = linear_predictor(params, batch)
    eta_c = np.minimum(eta, EXPONENT_CLAMP)
    lam = np.exp(eta_c)
    _, log_pi, _, ll0 = _zero_terms(params, batch.d, lam)
    zero = batch.y == 0
    ll = log_pi + batch.y * eta_c - lam - gammaln(batch.y + 1.0)
    return np.where(zero, ll0, ll)


def loglik_and_gradient(params: ModelParams, batch: DataBatch,
                        workers: int = 1) -> tuple[float, np.ndarray, int]:
    """Weighted log-likelihood, its gradient over the flat parameter vector,
    and the clamp-event count.

    Reduction is over fixed-size chunks combined in index order, so the
    result is bitwise identical for any worker count.
    """
    n = len(batch)
    chunks = [slice(s, min(s + GRAD_CHUNK, n)) for s in range(0, max(n, 1), GRAD_CHUNK)]

    def one(sl: slice):
        return _loglik_gradient_chunk(params, batch.slice(sl))

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, chunks))
    else:
        parts = [one(sl) for sl in chunks]

    total_ll = 0.0
    grad = np.zeros(parts[0][1].shape)
    clamped = 0
    for ll, g, c in parts:
        total_ll += ll
        grad += g
        clamped += c
    return total_ll, grad, clamped


def _loglik_gradient_chunk(params: ModelParams, batch: DataBatch):
    n_cov = len(params.beta3)
    n_groups = params.n_groups
    eta = linear_predictor(params, batch)
    unclamped = eta <= EXPONENT_CLAMP
    eta_c = np.minimum(eta, EXPONENT_CLAMP)
    lam = np.exp(eta_c)
    t, log_pi, log_1mpi, ll0 = _zero_terms(params, batch.d, lam)
    pi = np.exp(log_pi)

    zero = batch.y == 0
    ll_pt = np.where(zero, ll0,
                     log_pi + batch.y * eta_c - lam - gammaln(batch.y + 1.0))

    # d logL / d eta, honoring the clamp (rate is flat past the clamp)
    w2 = np.exp(log_pi - lam - ll0)          # pi * exp(-lam) / L, in [0, 1]
    g_eta = np.where(zero, -lam * w2, batch.y - lam * unclamped)
    g_eta = np.where(zero & ~unclamped, 0.0, g_eta)

    # d logL / d log_alpha1 = gpi * dpi/dlog_a1; all factors bounded
    w1 = np.exp(log_1mpi - ll0)              # (1 - pi) / L
    g_la1 = np.where(zero, -np.expm1(-lam) * pi * w1, -(1.0 - pi))
    with np.errstate(divide="ignore"):
        log_d = np.where(batch.d > 0, np.log(batch.d), 0.0)
    g_la2 = g_la1 * params.alpha2 * log_d

    w = batch.weight
    wg = w * g_eta
    grad = np.zeros(1 + 2 * N_VARIANTS + n_cov + 4 * n_groups + 2)
    grad[0] = wg.sum()
    i = 1
    grad[i:i + N_VARIANTS] = np.bincount(batch.vi, weights=wg * batch.zi,
                                         minlength=N_VARIANTS)
    i += N_VARIANTS
    grad[i:i + N_VARIANTS] = np.bincount(batch.vj, weights=wg * batch.zj,
                                         minlength=N_VARIANTS)
    i += N_VARIANTS
    grad[i:i + n_cov] = batch.x.T @ wg
    i += n_cov
    grad[i:i + 4 * n_groups] = np.bincount(batch.tt, weights=wg,
                                           minlength=4 * n_groups)
    i += 4 * n_groups
    grad[i] = (w * g_la1).sum()
    grad[i + 1] = (w * g_la2).sum()
    return float((w * ll_pt).sum()), grad, int((~unclamped).sum())


def expected_visits(params: ModelParams, batch: DataBatch) -> np.ndarray:
    """E[Y] = pi * lambda per point."""
    lam, _ = poisson_rate(params, batch)
    return exposure_prob(params, batch.d) * lam


def visit_probabilities(params: ModelParams, batch: DataBatch,
                        y_max: int) -> np.ndarray:
    """P(Y = y) for y = 0..y_max, shaped (n, y_max + 1). Oracle helper."""
    lam, _ = poisson_rate(params, batch)
    pi = exposure_prob(params, batch.d)
    ys = np.arange(y_max + 1)
    log_pois = ys[None, :] * np.log(np.maximum(lam, 1e-300))[:, None] \
        - lam[:, None] - gammaln(ys + 1.0)[None, :]
    pmf = pi[:, None] * np.exp(log_pois)
    pmf[:, 0] += 1.0 - pi
    return pmf


# -- identification ------------------------------------------------------------

def identification_null_basis(encoding: Encoding) -> np.ndarray:
    """Basis of the flat directions of the design: the intercept equals the
    sum of the group one-hots, and each group one-hot equals the sum of the
    group's four treatment cells. Shape (dim, n_groups + 1)."""
    n_cov, n_g = encoding.n_covariates, encoding.n_groups
    dim = 1 + 2 * N_VARIANTS + n_cov + 4 * n_g + 2
    oh0 = 1 + 2 * N_VARIANTS + encoding.onehot_slice.start
    tt0 = 1 + 2 * N_VARIANTS + n_cov
    basis = np.zeros((dim, n_g + 1))
    basis[0, 0] = 1.0
    basis[oh0:oh0 + n_g, 0] = -1.0
    for g in range(n_g):
        basis[oh0 + g, 1 + g] = 1.0
        basis[tt0 + 4 * g: tt0 + 4 * (g + 1), 1 + g] = -1.0
    return basis


def project_identified(vec: np.ndarray, encoding: Encoding) -> np.ndarray:
    """Project a flat parameter vector onto the identified subspace (the
    orthogonal complement of the design's null directions)."""
    basis = identification_null_basis(encoding)
    q, _ = np.linalg.qr(basis)
    return vec - q @ (q.T @ vec)


def reexpress_params(params: ModelParams, source: Encoding,
                     target: Encoding) -> ModelParams:
    """Rewrite parameters defined on `source` covariate coordinates in the
    `target` standardization (same groups and demographic order). The rate
    function is unchanged; the intercept absorbs the location shifts."""
    if source.groups != target.groups or \
            source.demographic_names != target.demographic_names:
        raise ValueError("encodings describe different designs")
    out = params.copy()
    beta3 = params.beta3.copy()
    n_s = source.n_scalars
    raw = beta3[:n_s] / source.scalar_std
    shift = float(raw @ (target.scalar_mean - source.scalar_mean))
    beta3[:n_s] = raw * target.scalar_std
    out.beta3 = beta3
    out.beta0 = params.beta0 + shift
    return out


# -- artifact ------------------------------------------------------------------

def params_to_jsonable(params: ModelParams, encoding: Encoding) -> dict:
    return {
        "encoding": encoding.to_jsonable(),
        "variant_names": list(VARIANT_NAMES),
        "covariate_names": list(encoding.covariate_names),
        "conditions": list(CONDITIONS),
        "beta0": params.beta0,
        "beta1": params.beta1.tolist(),
        "beta2": params.beta2.tolist(),
        "beta3": params.beta3.tolist(),
        "beta_tt": params.beta_tt.tolist(),
        "log_alpha1": params.log_alpha1,
        "log_alpha2": params.log_alpha2,
    }


def params_from_jsonable(obj: dict) -> tuple[ModelParams, Encoding]:
    enc = Encoding.from_jsonable(obj["encoding"])
    params = ModelParams(
        beta0=float(obj["beta0"]),
        beta1=np.array(obj["beta1"], dtype=float),
        beta2=np.array(obj["beta2"], dtype=float),
        beta3=np.array(obj["beta3"], dtype=float),
        beta_tt=np.array(obj["beta_tt"], dtype=float),
        log_alpha1=float(obj["log_alpha1"]),
        log_alpha2=float(obj["log_alpha2"]),
    )
    return params, enc


def save_params(path, params: ModelParams, encoding: Encoding) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_jsonable(params, encoding), fh, indent=1)


def load_params(path) -> tuple[ModelParams, Encoding]:
    with open(path, encoding="utf-8") as fh:
        return params_from_jsonable(json.load(fh))
