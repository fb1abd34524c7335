"""Fitting the visit model with loss-corrected negative sampling.

The dense zero space is never materialized: zero cells are subsampled with
per-cell probabilities (uniform, or inverse-distance to upweight hard
negatives) and their loss terms reweighted by 1/s, which keeps the stochastic
gradient an unbiased estimate of the full-data gradient. Uncertainty comes
from bootstrap trials that resample non-zero points with replacement and
redraw the negative sample.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np
from scipy.stats import norm

from . import rng
from .assignment import FilteredDataset, PairBlock
from .domain import CONDITIONS, ValidationError
from .zipmodel import (
    N_VARIANTS,
    DataBatch,
    Encoding,
    ModelParams,
    loglik_and_gradient,
    param_names,
)

log = logging.getLogger(__name__)

WEIGHTING_MODES = ("uniform", "inv-distance")


class FitDivergedError(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


class BootstrapError(RuntimeError):
    def __init__(self, trial: int, cause: Exception):
        super().__init__(f"bootstrap trial {trial} failed: {cause}")
        self.trial = trial


@dataclass(frozen=True)
class FitConfig:
    """Full-batch descent settings for the corrected loss.

    One update per epoch from the corrected gradient (scaled by the dense
    point count). The default update rule is Adam: the exposure-decay
    parameters make the loss surface stiff enough that constant-rate descent
    needs thousands of epochs, while Adam converges within the default 50.
    `optimizer="gd"` gives plain constant-rate descent; either way the rate
    is halved when the loss blows past its best value."""

    epochs: int = 50
    lr: float = 0.05
    sample_frac: float = 0.02
    weighting: str = "inv-distance"
    seed: int = 0
    workers: int = 1
    optimizer: str = "adam"           # "adam" or "gd"
    redraw_per_epoch: bool = True     # False: one negative sample per fit
    lr_halving: bool = True
    divergence_limit: float = 1e3
    include_z: bool = True            # False for the within-county model

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not 0 < self.sample_frac <= 1:
            raise ValidationError("sample_frac must be in (0, 1]")
        if self.weighting not in WEIGHTING_MODES:
            raise ValidationError(f"weighting must be one of {WEIGHTING_MODES}")
        if self.optimizer not in ("adam", "gd"):
            raise ValidationError("optimizer must be 'adam' or 'gd'")


# -- batch assembly --------------------------------------------------------------


def _block_local_rows(filtered: FilteredDataset, block: PairBlock):
    ds = filtered.dataset
    return ds.cbgs_of(block.cbg_county), ds.pois_of(block.poi_county)


def _cells_to_batch(filtered: FilteredDataset, encoding: Encoding,
                    block: PairBlock, cbg_idx: np.ndarray, poi_idx: np.ndarray,
                    d: np.ndarray, y: np.ndarray, weight: np.ndarray,
                    include_z: bool) -> DataBatch:
    ds = filtered.dataset
    n = len(cbg_idx)
    x = encoding.covariates(ds, cbg_idx, poi_idx,
                            ds.devices[cbg_idx, block.week_idx], d)
    zi = np.full(n, block.zi if include_z else 0.0)
    zj = np.full(n, block.zj if include_z else 0.0)
    return DataBatch(
        y=y.astype(float), zi=zi, zj=zj,
        vi=np.full(n, block.vi), vj=np.full(n, block.vj),
        x=x,
        tt=encoding.cell_index(ds.poi_group[poi_idx], block.ti, block.tj),
        d=d, weight=weight)


def assemble_nonzero_batch(filtered: FilteredDataset, encoding: Encoding,
                           include_z: bool = True) -> DataBatch:
    """One batch holding every retained non-zero triple, weight 1."""
    ds = filtered.dataset
    parts = []
    for block in filtered.blocks:
        sl = filtered.block_edges(block)
        if sl.stop == sl.start:
            continue
        cbg_idx = ds.edge_cbg[sl]
        poi_idx = ds.edge_poi[sl]
        cbg_rows, poi_rows = _block_local_rows(filtered, block)
        dmat = ds.distance_matrix(block.cbg_county, block.poi_county)
        li = np.searchsorted(cbg_rows, cbg_idx)
        lj = np.searchsorted(poi_rows, poi_idx)
        d = dmat[li, lj]
        parts.append(_cells_to_batch(filtered, encoding, block, cbg_idx, poi_idx,
                                     d, ds.edge_visits[sl],
                                     np.ones(len(cbg_idx)), include_z))
    if not parts:
        raise ValidationError("filtered dataset has no non-zero triples")
    return DataBatch.concatenate(parts)


@dataclass
class SamplingPlan:
    """Per-zero-cell inclusion probabilities for one filtered dataset.

    Aligned with `filtered.blocks`: for each block, the flat positions of its
    zero cells inside the (n_cbgs x n_pois) grid and their probabilities."""

    filtered: FilteredDataset
    fraction: float
    mode: str
    zero_positions: list[np.ndarray]
    probabilities: list[np.ndarray]
    total_zeros: int

    def as_dict(self) -> dict[tuple[int, int, int], float]:
        """(week_idx, cbg_idx, poi_idx) -> s. For small datasets and tests."""
        out = {}
        for block, pos, s in zip(self.filtered.blocks, self.zero_positions,
                                 self.probabilities):
            cbg_rows, poi_rows = _block_local_rows(self.filtered, block)
            for p, sv in zip(pos, s):
                out[(block.week_idx, int(cbg_rows[p // len(poi_rows)]),
                     int(poi_rows[p % len(poi_rows)]))] = float(sv)
        return out


def scale_to_target(q: np.ndarray, target: float, tol: float = 1e-6) -> np.ndarray:
    """Scale raw sampling weights q so probabilities sum to `target`, clamping
    at 1 and redistributing the clamped excess until the sum converges."""
    s = np.empty_like(q, dtype=float)
    clamped = np.zeros(len(q), dtype=bool)
    for _ in range(200):
        mass = target - clamped.sum()
        free = ~clamped
        if mass < 0 or (mass > 0 and not free.any()):
            raise ValidationError(
                f"sampling target {target} cannot be met: "
                f"{int(clamped.sum())} of {len(q)} cells already at s=1")
        scale = mass / q[free].sum() if free.any() else 0.0
        s[free] = scale * q[free]
        s[clamped] = 1.0
        newly = free & (s >= 1.0)
        if not newly.any():
            break
        clamped |= newly
    if abs(s.sum() - target) > tol * max(target, 1.0):
        raise ValidationError("sampling probability scaling did not converge")
    return s


def sampling_probabilities(filtered: FilteredDataset, fraction: float,
                           mode: str = "inv-distance") -> SamplingPlan:
    """Assign inclusion probabilities to every zero cell.

    Inverse-distance mode makes s proportional to 1/(1 + d), scaled so the
    probabilities sum to fraction * n_zeros; any s pushed past 1 is clamped
    and the excess mass redistributed until the target sum is met."""
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must be in (0, 1]")
    if mode not in WEIGHTING_MODES:
        raise ValidationError(f"unknown weighting mode {mode!r}")
    ds = filtered.dataset
    positions, raw = [], []
    for block in filtered.blocks:
        cbg_rows, poi_rows = _block_local_rows(filtered, block)
        n_cells = len(cbg_rows) * len(poi_rows)
        mask = np.ones(n_cells, dtype=bool)
        sl = filtered.block_edges(block)
        if sl.stop > sl.start:
            li = np.searchsorted(cbg_rows, ds.edge_cbg[sl])
            lj = np.searchsorted(poi_rows, ds.edge_poi[sl])
            mask[li * len(poi_rows) + lj] = False
        pos = np.flatnonzero(mask).astype(np.int64)
        positions.append(pos)
        if mode == "inv-distance":
            d = ds.distance_matrix(block.cbg_county, block.poi_county).ravel()[pos]
            raw.append(1.0 / (1.0 + d))
        else:
            raw.append(np.ones(len(pos)))
    total = sum(len(p) for p in positions)
    if total == 0:
        return SamplingPlan(filtered, fraction, mode, positions,
                            [np.empty(0)] * len(positions), 0)
    s = scale_to_target(np.concatenate(raw), fraction * total)
    out, at = [], 0
    for pos in positions:
        out.append(s[at:at + len(pos)].copy())
        at += len(pos)
    return SamplingPlan(filtered, fraction, mode, positions, out, total)


@dataclass
class NegativeSample:
    """One Bernoulli draw over the zero cells, keyed on (seed, triple)."""

    plan: SamplingPlan
    seed: int
    block_positions: list[np.ndarray]       # selected flat positions per block
    block_probs: list[np.ndarray]           # their inclusion probabilities

    @property
    def size(self) -> int:
        return sum(len(p) for p in self.block_positions)

    def triples(self) -> Iterator[tuple[int, int, int, float]]:
        """(week_idx, cbg_idx, poi_idx, s) per sampled zero."""
        filtered = self.plan.filtered
        for block, pos, s in zip(filtered.blocks, self.block_positions,
                                 self.block_probs):
            cbg_rows, poi_rows = _block_local_rows(filtered, block)
            for p, sv in zip(pos, s):
                yield (block.week_idx, int(cbg_rows[p // len(poi_rows)]),
                       int(poi_rows[p % len(poi_rows)]), float(sv))


def draw_sample(plan: SamplingPlan, seed: int) -> NegativeSample:
    """Independent per-cell Bernoulli inclusion; order-independent given seed."""
    ds = plan.filtered.dataset
    n_cbg, n_poi = len(ds.cbg_ids), len(ds.poi_ids)
    sel_pos, sel_s = [], []
    for block, pos, s in zip(plan.filtered.blocks, plan.zero_positions,
                             plan.probabilities):
        if len(pos) == 0:
            sel_pos.append(pos)
            sel_s.append(s)
            continue
        cbg_rows, poi_rows = _block_local_rows(plan.filtered, block)
        gi = cbg_rows[pos // len(poi_rows)]
        gj = poi_rows[pos % len(poi_rows)]
        code = (np.int64(block.week_idx) * n_poi + gj) * n_cbg + gi
        keep = rng.uniform(seed, code) < s
        sel_pos.append(pos[keep])
        sel_s.append(s[keep])
    return NegativeSample(plan, seed, sel_pos, sel_s)


def assemble_negative_batch(sample: NegativeSample, encoding: Encoding,
                            include_z: bool = True) -> DataBatch | None:
    """Batch of sampled zeros with weights 1/s; None if the draw is empty."""
    filtered = sample.plan.filtered
    ds = filtered.dataset
    parts = []
    for block, pos, s in zip(filtered.blocks, sample.block_positions,
                             sample.block_probs):
        if len(pos) == 0:
            continue
        cbg_rows, poi_rows = _block_local_rows(filtered, block)
        gi = cbg_rows[pos // len(poi_rows)]
        gj = poi_rows[pos % len(poi_rows)]
        d = ds.distance_matrix(block.cbg_county, block.poi_county).ravel()[pos]
        parts.append(_cells_to_batch(filtered, encoding, block, gi, gj, d,
                                     np.zeros(len(pos)), 1.0 / s, include_z))
    return DataBatch.concatenate(parts) if parts else None


def corrected_loss_and_gradient(params: ModelParams, nonzero: DataBatch,
                                negative: DataBatch | None,
                                workers: int = 1):
    """Loss-corrected negative log-likelihood and its gradient, as raw sums:
    non-zero points carry weight 1, sampled zeros carry 1/s. Returns
    (loss, gradient, clamp_count)."""
    ll, grad, clamped = loglik_and_gradient(params, nonzero, workers)
    if negative is not None and len(negative):
        ll2, grad2, clamped2 = loglik_and_gradient(params, negative, workers)
        ll, grad, clamped = ll + ll2, grad + grad2, clamped + clamped2
    return -ll, -grad, clamped


# -- fitting ---------------------------------------------------------------------


@dataclass
class FitResult:
    params: ModelParams
    encoding: Encoding
    config: FitConfig
    trace: list[dict]
    unidentified: set[tuple[str, str]]     # (group, condition) cells w/o data
    n_nonzero: int
    n_dense: int

    def trace_jsonable(self) -> dict:
        return {
            "epochs": [{k: (v.tolist() if isinstance(v, np.ndarray) else v)
                        for k, v in row.items()} for row in self.trace],
            "unidentified": sorted(map(list, self.unidentified)),
            "n_nonzero": self.n_nonzero,
            "n_dense": self.n_dense,
        }


def training_encoding(filtered: FilteredDataset) -> Encoding:
    """Standardization constants from the training sample: demographics and
    area over the distinct CBGs/POIs of the retained blocks, distance and
    device counts over the dense retained cells."""
    ds = filtered.dataset
    cbg_rows = sorted({int(i) for b in filtered.blocks
                       for i in ds.cbgs_of(b.cbg_county)})
    poi_rows = sorted({int(j) for b in filtered.blocks
                       for j in ds.pois_of(b.poi_county)})
    if not cbg_rows or not poi_rows:
        raise ValidationError("filtered dataset is empty")
    d_sum = d_sq = v_sum = v_sq = n_cells = 0.0
    for block in filtered.blocks:
        ld = np.log1p(ds.distance_matrix(block.cbg_county, block.poi_county))
        n_poi = ld.shape[1]
        d_sum += ld.sum()
        d_sq += (ld * ld).sum()
        lv = np.log(ds.devices[ds.cbgs_of(block.cbg_county), block.week_idx])
        v_sum += n_poi * lv.sum()
        v_sq += n_poi * (lv * lv).sum()
        n_cells += ld.size
    d_mean = d_sum / n_cells
    v_mean = v_sum / n_cells
    d_std = float(np.sqrt(max(d_sq / n_cells - d_mean ** 2, 0.0)))
    v_std = float(np.sqrt(max(v_sq / n_cells - v_mean ** 2, 0.0)))
    return Encoding.from_dataset(
        ds, np.array(cbg_rows), np.array(poi_rows),
        distance_stats=(d_mean, d_std if d_std > 1e-12 else 1.0),
        device_stats=(v_mean, v_std if v_std > 1e-12 else 1.0))


def unidentified_cells(filtered: FilteredDataset,
                       encoding: Encoding) -> set[tuple[str, str]]:
    ds = filtered.dataset
    seen = set()
    for block in filtered.blocks:
        sl = filtered.block_edges(block)
        if sl.stop == sl.start:
            continue
        for g in np.unique(ds.poi_group[ds.edge_poi[sl]]):
            seen.add((encoding.groups[int(g)], CONDITIONS[block.ti * 2 + block.tj]))
    return {(g, c) for g in encoding.groups for c in CONDITIONS} - seen


def fit(filtered: FilteredDataset, config: FitConfig,
        encoding: Encoding | None = None,
        init: ModelParams | None = None,
        nonzero_batch: DataBatch | None = None,
        plan: SamplingPlan | None = None) -> FitResult:
    """Full-batch gradient descent on the corrected loss.

    Each epoch draws a fresh negative sample (seed XOR epoch) unless the
    config pins one sample per fit. The step uses the gradient scaled by the
    dense point count; per-epoch parameter snapshots land in the trace.
    """
    if encoding is None:
        encoding = training_encoding(filtered)
    if nonzero_batch is None:
        nonzero_batch = assemble_nonzero_batch(filtered, encoding, config.include_z)
    if plan is None:
        plan = sampling_probabilities(filtered, config.sample_frac, config.weighting)
    unidentified = unidentified_cells(filtered, encoding)
    if unidentified:
        log.info("treatment cells without non-zero data: %s", sorted(unidentified))

    params = (init.copy() if init is not None
              else ModelParams.zeros(encoding.n_covariates, encoding.n_groups))
    theta = params.to_vector()
    n_dense = len(nonzero_batch) + plan.total_zeros
    scale = 1.0 / max(n_dense, 1)
    lr = config.lr
    trace: list[dict] = []
    best_loss = None
    negative = None
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        if negative is None or config.redraw_per_epoch:
            sample = draw_sample(plan, config.seed ^ epoch
                                 if config.redraw_per_epoch else config.seed)
            negative = assemble_negative_batch(sample, encoding, config.include_z)
        params = ModelParams.from_vector(theta, encoding.n_covariates,
                                         encoding.n_groups)
        loss, grad, clamped = corrected_loss_and_gradient(
            params, nonzero_batch, negative, config.workers)
        # halve on loss increase, with a 5% band above the best loss seen so
        # far: converging descent oscillates slightly (and redrawn samples
        # add noise), so only a genuine blowup should anneal the rate
        if best_loss is not None and config.lr_halving and loss > best_loss * 1.05:
            lr *= 0.5
        best_loss = loss if best_loss is None else min(best_loss, loss)
        g = scale * grad
        if config.optimizer == "adam":
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1.0 - 0.9 ** (epoch + 1))
            vhat = v / (1.0 - 0.999 ** (epoch + 1))
            theta = theta - lr * mhat / (np.sqrt(vhat) + 1e-8)
        else:
            theta = theta - lr * g
        if not np.all(np.isfinite(theta)) or \
                np.abs(theta).max() > config.divergence_limit:
            trace.append({"epoch": epoch, "loss": loss, "lr": lr,
                          "clamped": clamped, "params": theta.copy()})
            raise FitDivergedError(
                f"fit diverged at epoch {epoch} "
                f"(max |param| = {np.abs(theta).max():.3g})", trace)
        trace.append({"epoch": epoch, "loss": float(loss), "lr": lr,
                      "clamped": clamped,
                      "max_abs_param": float(np.abs(theta).max()),
                      "seconds": time.perf_counter() - t0,
                      "params": theta.copy()})
    final = ModelParams.from_vector(theta, encoding.n_covariates, encoding.n_groups)
    return FitResult(params=final, encoding=encoding, config=config, trace=trace,
                     unidentified=unidentified, n_nonzero=len(nonzero_batch),
                     n_dense=n_dense)


# -- bootstrap -------------------------------------------------------------------


@dataclass
class BootstrapResult:
    """Per-trial parameter vectors plus normal-theory summaries."""

    encoding: Encoding
    config: FitConfig
    trials: np.ndarray                      # (n_trials, dim)
    names: list[str]
    unidentified: set[tuple[str, str]]
    resample_nonzeros: bool

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def mean(self) -> np.ndarray:
        return self.trials.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.trials.std(axis=0, ddof=1)

    def mean_params(self) -> ModelParams:
        return ModelParams.from_vector(self.mean, self.encoding.n_covariates,
                                       self.encoding.n_groups)

    def trial_params(self, t: int) -> ModelParams:
        return ModelParams.from_vector(self.trials[t], self.encoding.n_covariates,
                                       self.encoding.n_groups)

    def interval(self, idx: int) -> tuple[float, float, float]:
        m, s = float(self.mean[idx]), float(self.sd[idx])
        return m, m - 1.96 * s, m + 1.96 * s

    def to_jsonable(self) -> dict:
        from dataclasses import asdict
        return {
            "names": self.names,
            "trials": self.trials.tolist(),
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
            "resample_nonzeros": self.resample_nonzeros,
            "unidentified": sorted(map(list, self.unidentified)),
            "encoding": self.encoding.to_jsonable(),
            "fit_config": asdict(self.config),
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "BootstrapResult":
        return cls(encoding=Encoding.from_jsonable(obj["encoding"]),
                   config=FitConfig(**obj["fit_config"]),
                   trials=np.array(obj["trials"], dtype=float),
                   names=list(obj["names"]),
                   unidentified={tuple(u) for u in obj["unidentified"]},
                   resample_nonzeros=bool(obj["resample_nonzeros"]))


def bootstrap(filtered: FilteredDataset, config: FitConfig, trials: int = 30,
              resample_nonzeros: bool = True) -> BootstrapResult:
    """Fit `trials` times; each trial resamples the non-zero points with
    replacement (unless disabled, for sampling-only uncertainty) and draws
    fresh negative samples. Trials run in parallel and are seeded
    independently, so results do not depend on scheduling."""
    encoding = training_encoding(filtered)
    base_nonzero = assemble_nonzero_batch(filtered, encoding, config.include_z)
    plan = sampling_probabilities(filtered, config.sample_frac, config.weighting)
    n_nz = len(base_nonzero)

    def one_trial(t: int) -> np.ndarray:
        trial_seed = rng.derive_seed(config.seed, 9000 + t)
        if resample_nonzeros:
            idx = rng.generator(trial_seed, 7).integers(0, n_nz, n_nz)
            nz = base_nonzero.slice(np.sort(idx))
        else:
            nz = base_nonzero
        trial_cfg = replace(config, seed=trial_seed, workers=1)
        try:
            result = fit(filtered, trial_cfg, encoding=encoding,
                         nonzero_batch=nz, plan=plan)
        except FitDivergedError as exc:
            raise BootstrapError(t, exc) from exc
        return result.params.to_vector()

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            vectors = list(pool.map(one_trial, range(trials)))
    else:
        vectors = [one_trial(t) for t in range(trials)]
    base_unidentified = unidentified_cells(filtered, encoding)
    return BootstrapResult(encoding=encoding, config=config,
                           trials=np.array(vectors), names=param_names(encoding),
                           unidentified=base_unidentified,
                           resample_nonzeros=resample_nonzeros)


# -- estimands -------------------------------------------------------------------


@dataclass(frozen=True)
class EffectRow:
    group: str
    condition: str              # PR, RP or RR, always relative to PP
    mean: float
    lo: float
    hi: float
    significant: bool
    bonferroni_significant: bool
    available: bool = True


def spillover_effects(result: BootstrapResult) -> list[EffectRow]:
    """Per-group multiplicative tier-pair effects exp(beta_cell - beta_PP),
    with normal-theory CIs over trials and Bonferroni-adjusted significance
    across groups."""
    enc = result.encoding
    n_groups = enc.n_groups
    crit = norm.ppf(1 - 0.025 / max(n_groups, 1))
    tt0 = 1 + 2 * N_VARIANTS + enc.n_covariates
    rows = []
    for gi, group in enumerate(enc.groups):
        pp = tt0 + 4 * gi
        for cond in ("PR", "RP", "RR"):
            off = CONDITIONS.index(cond)
            if (group, cond) in result.unidentified or \
                    (group, "PP") in result.unidentified:
                rows.append(EffectRow(group, cond, float("nan"), float("nan"),
                                      float("nan"), False, False, available=False))
                continue
            taus = np.exp(result.trials[:, pp + off] - result.trials[:, pp])
            m = float(taus.mean())
            s = float(taus.std(ddof=1)) if len(taus) > 1 else 0.0
            rows.append(EffectRow(
                group, cond, m, m - 1.96 * s, m + 1.96 * s,
                significant=bool(abs(m - 1.0) > 1.96 * s),
                bonferroni_significant=bool(abs(m - 1.0) > crit * s)))
    return rows


def effects_csv_rows(rows: list[EffectRow]) -> list[dict]:
    return [{"group": r.group, "condition": r.condition, "mean": r.mean,
             "lo": r.lo, "hi": r.hi, "significant": r.significant,
             "bonferroni_significant": r.bonferroni_significant,
             "available": r.available} for r in rows]
