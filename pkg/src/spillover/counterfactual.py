"""Counterfactual county mobility under alternative treatment vectors.

Expected cross-county visits factor into tier-independent weights per
(group, ordered adjacent county pair) — computed once at the threshold
(scores frozen at zero, device counts at their per-CBG study means) — times
exp(treatment cell). Within-county visits come from a companion model fit on
same-county pairs. Efficacy ratios compare the mobility reduction a county
keeps under a scenario against a full shutdown.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .domain import TIER_CODE, MobilityDataset, Tier
from .zipmodel import Encoding, ModelParams, exposure_prob

#: Tier codes: purple = 0, red = 1 (matches domain.TIER_CODE).
PURPLE, RED = 0, 1


@dataclass
class PhiTable:
    """Tier-independent expected-visit weights phi[(a, b)][g] for ordered
    adjacent county pairs, plus the covariate snapshot they were built on."""

    county_ids: list[str]
    groups: list[str]
    values: dict[tuple[int, int], np.ndarray]
    snapshot: dict = field(default_factory=dict)

    def get(self, a: int, b: int) -> np.ndarray:
        return self.values[(a, b)]

    def to_jsonable(self) -> dict:
        return {
            "county_ids": self.county_ids,
            "groups": self.groups,
            "values": {f"{self.county_ids[a]}->{self.county_ids[b]}": v.tolist()
                       for (a, b), v in sorted(self.values.items())},
            "snapshot": self.snapshot,
        }


@dataclass
class WithinCountyModel:
    """Expected within-county visits per county and tier."""

    county_ids: list[str]
    expected: np.ndarray            # (n_counties, 2); columns purple, red

    def get(self, a: int, tier_code: int) -> float:
        return float(self.expected[a, tier_code])

    def to_jsonable(self) -> dict:
        return {"county_ids": self.county_ids,
                "expected_purple": self.expected[:, 0].tolist(),
                "expected_red": self.expected[:, 1].tolist()}


def _baseline_cell_weights(params: ModelParams, encoding: Encoding,
                           dataset: MobilityDataset, cbg_rows: np.ndarray,
                           poi_rows: np.ndarray,
                           device_means: np.ndarray) -> np.ndarray:
    """pi * exp(beta0 + beta3.X) per (cbg, poi) cell of a county pair, with
    scores at zero and device counts at their study means. Shape (C, P)."""
    d = dataset.distance_matrix(int(dataset.cbg_county[cbg_rows[0]]),
                                int(dataset.poi_county[poi_rows[0]]))
    ci = np.repeat(cbg_rows, len(poi_rows))
    pj = np.tile(poi_rows, len(cbg_rows))
    x = encoding.covariates(dataset, ci, pj, device_means[ci], d.ravel())
    eta = params.beta0 + x @ params.beta3
    w = exposure_prob(params, d.ravel()) * np.exp(np.minimum(eta, 30.0))
    return w.reshape(len(cbg_rows), len(poi_rows))


def precompute_phi(params: ModelParams, encoding: Encoding,
                   dataset: MobilityDataset,
                   device_means: np.ndarray | None = None) -> PhiTable:
    """phi(g, A, B) = sum over A's CBGs and B's group-g POIs of the baseline
    expected visits; one entry per ordered adjacent pair."""
    if device_means is None:
        device_means = dataset.device_means()
    groups = list(dataset.groups)
    values: dict[tuple[int, int], np.ndarray] = {}
    for a, b in sorted(dataset.adjacency):
        for s, t in ((a, b), (b, a)):
            cbg_rows = dataset.cbgs_of(s)
            poi_rows = dataset.pois_of(t)
            phi = np.zeros(len(groups))
            if cbg_rows.size and poi_rows.size:
                w = _baseline_cell_weights(params, encoding, dataset,
                                           cbg_rows, poi_rows, device_means)
                phi = np.bincount(dataset.poi_group[poi_rows],
                                  weights=w.sum(axis=0), minlength=len(groups))
            values[(s, t)] = phi
    snapshot = {
        "scores": 0.0,
        "device_means_sha256": hashlib.sha256(
            np.ascontiguousarray(device_means).tobytes()).hexdigest(),
        "params_sha256": hashlib.sha256(
            json.dumps(params.to_vector().tolist()).encode()).hexdigest(),
    }
    return PhiTable([c.id for c in dataset.counties], groups, values, snapshot)


def build_within_model(params: ModelParams, encoding: Encoding,
                       dataset: MobilityDataset,
                       device_means: np.ndarray | None = None) -> WithinCountyModel:
    """Expected same-county visits per tier from the within-county companion
    model (within-county pairs always share the county's tier)."""
    if device_means is None:
        device_means = dataset.device_means()
    n = dataset.n_counties
    expected = np.zeros((n, 2))
    for a in range(n):
        cbg_rows = dataset.cbgs_of(a)
        poi_rows = dataset.pois_of(a)
        if not cbg_rows.size or not poi_rows.size:
            continue
        w = _baseline_cell_weights(params, encoding, dataset, cbg_rows,
                                   poi_rows, device_means)
        per_group = np.bincount(dataset.poi_group[poi_rows],
                                weights=w.sum(axis=0),
                                minlength=len(dataset.groups))
        for tier in (PURPLE, RED):
            expected[a, tier] = per_group @ np.exp(
                params.beta_tt[:, tier, tier])
    return WithinCountyModel([c.id for c in dataset.counties], expected)


# -- treatment vectors -----------------------------------------------------------

def all_red(n: int) -> np.ndarray:
    return np.full(n, RED)


def all_purple(n: int) -> np.ndarray:
    return np.full(n, PURPLE)


def lone_county(n: int, a: int) -> np.ndarray:
    """Only county `a` restricted; the rest stay red."""
    tv = np.full(n, RED)
    tv[a] = PURPLE
    return tv


def macro_county(assignment: np.ndarray, a: int) -> np.ndarray:
    """County a's whole macro-county goes purple; the rest stay red."""
    return np.where(assignment == assignment[a], PURPLE, RED)


def realistic_week(dataset: MobilityDataset, week: date) -> np.ndarray:
    """The recorded configuration, coarsened to two tiers: purple where the
    observed tier was purple, red otherwise."""
    wi = dataset.week_index[week]
    tv = np.full(dataset.n_counties, RED)
    for ci in range(dataset.n_counties):
        if dataset.observed_tiers.get((ci, wi)) is Tier.PURPLE:
            tv[ci] = PURPLE
    return tv


def validate_treatment(tv: np.ndarray, n: int) -> np.ndarray:
    tv = np.asarray(tv)
    if tv.shape != (n,) or not np.isin(tv, (PURPLE, RED)).all():
        raise ValueError("treatment vector must assign purple/red to every county")
    return tv


# -- engine ----------------------------------------------------------------------

@dataclass
class CounterfactualEngine:
    """Everything needed to evaluate expected out-degrees under arbitrary
    treatment vectors: phi weights, within-county expectations, and the main
    model's treatment cells."""

    dataset: MobilityDataset
    phi: PhiTable
    within: WithinCountyModel
    tt_weights: np.ndarray           # (n_groups, 2, 2)

    def __post_init__(self):
        self._neighbors = [self.dataset.neighbors(a)
                           for a in range(self.dataset.n_counties)]
        self._cell_exp = np.exp(self.tt_weights)

    def expected_cross(self, a: int, b: int, ta: int, tb: int) -> float:
        """E[Y_AB | T_A, T_B] for an adjacent ordered pair."""
        return float(self._cell_exp[:, ta, tb] @ self.phi.get(a, b))

    def expected_out_degree(self, a: int, treatment: np.ndarray) -> float:
        """Within-county visits plus visits to every adjacent county."""
        tv = validate_treatment(treatment, self.dataset.n_counties)
        total = self.within.get(a, int(tv[a]))
        for b in self._neighbors[a]:
            total += self.expected_cross(a, b, int(tv[a]), int(tv[b]))
        return total

    def shutdown_contrast(self, a: int) -> float:
        """E[out(A) | all red] - E[out(A) | all purple], the efficacy
        denominator."""
        n = self.dataset.n_counties
        return (self.expected_out_degree(a, all_red(n))
                - self.expected_out_degree(a, all_purple(n)))

    def efficacy_ratio(self, a: int, scenario: np.ndarray) -> float | None:
        """Share of the full-shutdown mobility reduction county `a` keeps
        under the scenario; None when the contrast is degenerate."""
        denom = self.shutdown_contrast(a)
        if denom <= 0:
            return None
        n = self.dataset.n_counties
        num = (self.expected_out_degree(a, all_red(n))
               - self.expected_out_degree(a, scenario))
        return num / denom


def expected_out_degree(a: int, treatment: np.ndarray, phi: PhiTable,
                        within: WithinCountyModel, tt_weights: np.ndarray,
                        dataset: MobilityDataset) -> float:
    return CounterfactualEngine(dataset, phi, within,
                                tt_weights).expected_out_degree(a, treatment)


def efficacy_ratio(a: int, scenario: np.ndarray, phi: PhiTable,
                   within: WithinCountyModel, tt_weights: np.ndarray,
                   dataset: MobilityDataset) -> float | None:
    return CounterfactualEngine(dataset, phi, within,
                                tt_weights).efficacy_ratio(a, scenario)


# -- reports ---------------------------------------------------------------------

@dataclass
class EfficacyRow:
    scenario: str
    county: str | None
    week: date | None
    mean: float
    lo: float
    hi: float
    n_trials: int


@dataclass
class EfficacyReport:
    scenario: str
    rows: list[EfficacyRow]
    subset_averages: dict[str, dict]
    excluded_counties: list[str]


def _ci(values: np.ndarray) -> tuple[float, float, float]:
    m = float(values.mean())
    s = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return m, m - 1.96 * s, m + 1.96 * s


def efficacy_report(engines: list[CounterfactualEngine], scenario: str,
                    partition: np.ndarray | None = None,
                    weeks: list[date] | None = None) -> EfficacyReport:
    """Per-county efficacy ratios with CIs across bootstrap engines, plus
    all/small/large subset averages. `scenario` is one of "lone",
    "macro" (requires a partition) or "realistic" (one row per week,
    averaged over that week's purple counties)."""
    dataset = engines[0].dataset
    n = dataset.n_counties
    small = [c.id for c in dataset.counties if not c.is_large]

    if scenario == "realistic":
        if weeks is None:
            weeks = dataset.weeks
        rows = []
        for week in weeks:
            tv = realistic_week(dataset, week)
            purple = np.flatnonzero(tv == PURPLE)
            per_trial = []
            for eng in engines:
                rs = [eng.efficacy_ratio(int(a), tv) for a in purple]
                rs = [r for r in rs if r is not None]
                if rs:
                    per_trial.append(float(np.mean(rs)))
            if not per_trial:
                continue
            m, lo, hi = _ci(np.array(per_trial))
            rows.append(EfficacyRow("realistic", None, week, m, lo, hi,
                                    len(per_trial)))
        return EfficacyReport("realistic", rows, {}, [])

    def scenario_for(a: int) -> np.ndarray:
        if scenario == "lone":
            return lone_county(n, a)
        if scenario == "macro":
            if partition is None:
                raise ValueError("macro scenario requires a partition")
            return macro_county(partition, a)
        raise ValueError(f"unknown scenario {scenario!r}")

    per_county = np.full((len(engines), n), np.nan)
    for t, eng in enumerate(engines):
        for a in range(n):
            r = eng.efficacy_ratio(a, scenario_for(a))
            if r is not None:
                per_county[t, a] = r
    defined = ~np.isnan(per_county).any(axis=0)
    excluded = [dataset.counties[a].id for a in np.flatnonzero(~defined)]
    rows = []
    for a in np.flatnonzero(defined):
        m, lo, hi = _ci(per_county[:, a])
        rows.append(EfficacyRow(scenario, dataset.counties[a].id, None,
                                m, lo, hi, len(engines)))
    subsets = {}
    for name, members in (("all", {c.id for c in dataset.counties}),
                          ("small", set(small)),
                          ("large", {c.id for c in dataset.counties} - set(small))):
        cols = [a for a in np.flatnonzero(defined)
                if dataset.counties[a].id in members]
        if not cols:
            subsets[name] = {"mean": None, "lo": None, "hi": None, "n": 0}
            continue
        trial_avgs = per_county[:, cols].mean(axis=1)
        m, lo, hi = _ci(trial_avgs)
        subsets[name] = {"mean": m, "lo": lo, "hi": hi, "n": len(cols)}
    return EfficacyReport(scenario, rows, subsets, excluded)


def engine_from_params(dataset: MobilityDataset, main_params: ModelParams,
                       main_encoding: Encoding, within_params: ModelParams,
                       within_encoding: Encoding,
                       device_means: np.ndarray | None = None) -> CounterfactualEngine:
    """Build a query engine from fitted main and within-county parameters."""
    if device_means is None:
        device_means = dataset.device_means()
    phi = precompute_phi(main_params, main_encoding, dataset, device_means)
    within = build_within_model(within_params, within_encoding, dataset,
                                device_means)
    return CounterfactualEngine(dataset, phi, within, main_params.beta_tt)
