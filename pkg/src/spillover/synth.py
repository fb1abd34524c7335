"""Synthetic worlds with planted ground truth.

Generates counties on a jittered grid with Delaunay-derived adjacency,
scatters CBGs and POIs around the centroids, runs mean-reverting metric
trajectories that straddle the tier thresholds, derives tiers from the
assignment score (optionally injecting non-compliers), and simulates visit
counts from the exact generative model under planted parameters. Every draw
is keyed on (seed, item), so identical configs produce identical worlds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
from scipy.spatial import Delaunay

from . import rng
from .assignment import (
    AssignmentRecord,
    FilterConfig,
    ThresholdRegime,
    assign_tier_from_z,
    compute_assignments,
    compute_z,
    filter_dataset,
    regime_for_week,
    variant_index,
)
from .domain import (
    TIER_CODE,
    County,
    CountyWeekMetrics,
    MobilityDataset,
    Tier,
    build_dataset,
)
from .zipmodel import (
    DataBatch,
    Encoding,
    ModelParams,
    exposure_prob,
    params_to_jsonable,
    poisson_rate,
)

log = logging.getLogger(__name__)

SYNTH_REGIMES = (
    ThresholdRegime(cr_red=7.0, tp_red=8.0, he_red=8.0, tp_orange=5.0,
                    he_orange=5.0, effective_from=date(2020, 8, 31)),
)


@dataclass(frozen=True)
class WorldConfig:
    n_counties: int = 12
    small_fraction: float = 0.4
    cbgs_per_county: tuple[int, int] = (4, 7)
    pois_per_county: tuple[int, int] = (5, 9)
    groups: tuple[str, ...] = ("eating_places", "retail", "grocery", "recreation")
    group_mix: tuple[float, ...] | None = None
    demographics_dim: int = 3
    n_weeks: int = 6
    start_week: date = date(2021, 2, 1)
    seed: int = 0
    noncomplier_rate: float = 0.0
    regimes: tuple[ThresholdRegime, ...] = SYNTH_REGIMES
    # geometry (degrees)
    center: tuple[float, float] = (37.0, -120.0)
    grid_spacing: float = 0.35
    grid_jitter: float = 0.07
    scatter: float = 0.08
    # metric process
    metric_rho: float = 0.6
    cr_spread: float = 3.5
    tp_spread: float = 3.0
    cr_sigma: float = 1.2
    tp_sigma: float = 0.8
    # covariate processes
    device_log_mean: float = 5.3
    device_log_sigma: float = 0.3
    area_log_mean: float = 8.5
    area_log_sigma: float = 0.8
    # planted parameters (cycled over groups where tuples are shorter)
    beta0: float = -1.3
    beta_distance: float = -0.25
    beta_devices: float = 0.3
    beta_area: float = 0.2
    tau_pr: tuple[float, ...] = (1.15, 1.25, 1.35, 1.5)
    tau_rp: tuple[float, ...] = (0.95, 1.0, 1.05, 1.1)
    tau_rr: tuple[float, ...] = (1.1, 1.15, 1.2, 1.25)
    alpha1: float = 0.15
    alpha2: float = 1.3

    def __post_init__(self):
        if self.n_counties < 2 or self.n_weeks < 1:
            raise ValueError("need at least 2 counties and 1 week")
        if self.start_week.weekday() != 0:
            raise ValueError("start_week must be a Monday")
        if self.group_mix is not None and len(self.group_mix) != len(self.groups):
            raise ValueError("group_mix length must match groups")

    @property
    def weeks(self) -> list[date]:
        return [self.start_week + timedelta(days=7 * i) for i in range(self.n_weeks)]


def default_planted_params(config: WorldConfig) -> ModelParams:
    """Planted parameters in raw (identity-encoded) covariate coordinates."""
    n_groups = len(config.groups)
    demo_pattern = [0.15, -0.1, 0.05]
    beta3 = np.zeros(2 + config.demographics_dim + 1 + n_groups)
    beta3[0] = config.beta_distance
    beta3[1] = config.beta_devices
    for k in range(config.demographics_dim):
        beta3[2 + k] = demo_pattern[k % len(demo_pattern)]
    beta3[2 + config.demographics_dim] = config.beta_area
    beta_tt = np.zeros((n_groups, 2, 2))
    for g in range(n_groups):
        base = 0.05 * g - 0.05
        beta_tt[g, 0, 0] = base
        beta_tt[g, 0, 1] = base + math.log(config.tau_pr[g % len(config.tau_pr)])
        beta_tt[g, 1, 0] = base + math.log(config.tau_rp[g % len(config.tau_rp)])
        beta_tt[g, 1, 1] = base + math.log(config.tau_rr[g % len(config.tau_rr)])
    return ModelParams(
        beta0=config.beta0,
        beta1=np.array([-0.02, -0.015, -0.025, -0.02]),
        beta2=np.array([-0.03, -0.02, -0.035, -0.025]),
        beta3=beta3,
        beta_tt=beta_tt,
        log_alpha1=math.log(config.alpha1),
        log_alpha2=math.log(config.alpha2),
    )


@dataclass
class World:
    """A generated world: the dataset plus everything the generator knows."""

    dataset: MobilityDataset
    records: dict[tuple[int, int], AssignmentRecord]
    planted: ModelParams
    planted_encoding: Encoding
    injected_noncompliers: set[tuple[str, date]]
    config: WorldConfig

    def filtered(self, bandwidth: float = 5.0, scope: str = "cross",
                 **kwargs):
        cfg = FilterConfig(bandwidth=bandwidth, **kwargs)
        return filter_dataset(self.dataset, self.records, cfg, scope=scope)


def _county_geometry(config: WorldConfig):
    g = rng.generator(config.seed, 1)
    n = config.n_counties
    cols = math.ceil(math.sqrt(n))
    lat0, lon0 = config.center
    lat = np.array([lat0 + (i // cols) * config.grid_spacing for i in range(n)])
    lon = np.array([lon0 + (i % cols) * config.grid_spacing for i in range(n)])
    lat = lat + g.uniform(-config.grid_jitter, config.grid_jitter, n)
    lon = lon + g.uniform(-config.grid_jitter, config.grid_jitter, n)
    if n >= 4:
        tri = Delaunay(np.column_stack([lon, lat]))
        pairs = set()
        for simplex in tri.simplices:
            for i in range(3):
                a, b = int(simplex[i]), int(simplex[(i + 1) % 3])
                pairs.add((min(a, b), max(a, b)))
        adjacency = sorted(pairs)
    else:
        adjacency = [(i, i + 1) for i in range(n - 1)]
    n_small = round(n * config.small_fraction)
    sizes = np.array(["small"] * n_small + ["large"] * (n - n_small))
    g.shuffle(sizes)
    pops = np.where(sizes == "small",
                    g.integers(20_000, 105_000, n),
                    g.integers(110_000, 2_000_000, n))
    return lat, lon, adjacency, pops


def _metric_trajectories(config: WorldConfig, counties: list[County]):
    """Mean-reverting walks around the thresholds, one extra lead-in week.

    A per-county severity factor moves all metrics together (slightly
    red-leaning to offset the upward pull of the max aggregation), so both
    tiers and all four pair conditions occur."""
    regime = config.regimes[0]
    all_weeks = [config.start_week - timedelta(days=7)] + config.weeks
    out = []
    for ci, county in enumerate(counties):
        g = rng.generator(config.seed, 2, ci)
        severity = g.uniform(-1.2, 0.8)
        base_cr = regime.cr_red + severity * config.cr_spread
        base_tp = regime.tp_red + severity * config.tp_spread + g.normal(0, 0.5)
        base_he = base_tp + g.uniform(0.0, 1.5)
        cr, tp, he = base_cr, base_tp, base_he
        for week in all_weeks:
            cr = base_cr + config.metric_rho * (cr - base_cr) + g.normal(0, config.cr_sigma)
            tp = base_tp + config.metric_rho * (tp - base_tp) + g.normal(0, config.tp_sigma)
            he = base_he + config.metric_rho * (he - base_he) + g.normal(0, config.tp_sigma)
            out.append(CountyWeekMetrics(
                county=county.id, week=week,
                case_rate=max(0.0, cr),
                test_positivity=float(np.clip(tp, 0.5, 99.0)),
                health_equity=float(np.clip(he, 0.5, 99.0)) if county.is_large else None))
    return out


def simulate_visits(dataset: MobilityDataset,
                    records: dict[tuple[int, int], AssignmentRecord],
                    params: ModelParams, encoding: Encoding,
                    seed: int) -> list[tuple[date, str, str, int]]:
    """Draw visit counts for every (cbg, poi, week) cell from the generative
    model: an exposure Bernoulli then a Poisson count. Draws are keyed on
    (seed, week, cbg, poi), so output is independent of iteration order.
    Only positive counts are returned."""
    n_cbg, n_poi = len(dataset.cbg_ids), len(dataset.poi_ids)
    seed_b = rng.derive_seed(seed, 101)
    seed_y = rng.derive_seed(seed, 202)
    edges: list[tuple[date, str, str, int]] = []
    for wi, week in enumerate(dataset.weeks):
        for ca in range(dataset.n_counties):
            ra = records.get((ca, wi))
            if ra is None:
                continue
            cbg_rows = dataset.cbgs_of(ca)
            if cbg_rows.size == 0:
                continue
            for cb in range(dataset.n_counties):
                rb = records.get((cb, wi))
                if rb is None:
                    continue
                poi_rows = dataset.pois_of(cb)
                if poi_rows.size == 0:
                    continue
                d = dataset.distance_matrix(ca, cb).ravel()
                ci = np.repeat(cbg_rows, poi_rows.size)
                pj = np.tile(poi_rows, cbg_rows.size)
                x = encoding.covariates(dataset, ci, pj,
                                        dataset.devices[ci, wi], d)
                n = len(ci)
                batch = DataBatch(
                    y=np.zeros(n), zi=np.full(n, ra.z), zj=np.full(n, rb.z),
                    vi=np.full(n, variant_index(dataset.counties[ca].is_large,
                                                ra.regime_idx)),
                    vj=np.full(n, variant_index(dataset.counties[cb].is_large,
                                                rb.regime_idx)),
                    x=x,
                    tt=encoding.cell_index(dataset.poi_group[pj],
                                           TIER_CODE[ra.tier], TIER_CODE[rb.tier]),
                    d=d, weight=np.ones(n))
                lam, _ = poisson_rate(params, batch)
                pi = exposure_prob(params, d)
                code = (np.int64(wi) * n_poi + pj) * n_cbg + ci
                exposed = rng.bernoulli(seed_b, pi, code)
                if not exposed.any():
                    continue
                counts = rng.poisson(seed_y, lam[exposed], code[exposed])
                pos = counts >= 1
                for c, p, y in zip(ci[exposed][pos], pj[exposed][pos], counts[pos]):
                    edges.append((week, dataset.cbg_ids[c], dataset.poi_ids[p], int(y)))
    return edges


def generate_world(config: WorldConfig,
                   params: ModelParams | None = None) -> World:
    """Build the full synthetic world; see the module docstring."""
    lat, lon, adjacency, pops = _county_geometry(config)
    counties = [County(id=f"c{ci:03d}", population=int(pops[ci]),
                       name=f"County {ci:03d}")
                for ci in range(config.n_counties)]
    adjacency_ids = [(counties[a].id, counties[b].id) for a, b in adjacency]

    metrics = _metric_trajectories(config, counties)

    g = rng.generator(config.seed, 3)
    cbgs, pois = [], []
    mix = config.group_mix
    for ci, county in enumerate(counties):
        n_cbg = int(g.integers(config.cbgs_per_county[0], config.cbgs_per_county[1] + 1))
        n_poi = int(g.integers(config.pois_per_county[0], config.pois_per_county[1] + 1))
        for k in range(n_cbg):
            cbgs.append((f"{county.id}-b{k:04d}", county.id,
                         lat[ci] + g.normal(0, config.scatter),
                         lon[ci] + g.normal(0, config.scatter),
                         tuple(g.normal(0, 1, config.demographics_dim))))
        for k in range(n_poi):
            pois.append((f"{county.id}-p{k:04d}", county.id,
                         lat[ci] + g.normal(0, config.scatter),
                         lon[ci] + g.normal(0, config.scatter),
                         config.groups[int(g.choice(len(config.groups), p=mix))],
                         float(np.exp(g.normal(config.area_log_mean,
                                               config.area_log_sigma)))))

    gd = rng.generator(config.seed, 4)
    device_draws = np.exp(gd.normal(config.device_log_mean, config.device_log_sigma,
                                    (len(cbgs), len(config.weeks))))
    devices = {(c[0], week): max(1.0, round(float(device_draws[i, wi])))
               for i, c in enumerate(cbgs)
               for wi, week in enumerate(config.weeks)}

    # first pass: dataset without tiers/edges, to compute assignment scores
    base = build_dataset(counties, adjacency_ids, config.weeks, metrics, {},
                         cbgs, pois, devices, [])
    tiers: dict[tuple[str, date], Tier] = {}
    injected: set[tuple[str, date]] = set()
    for wi, week in enumerate(config.weeks):
        r_curr = regime_for_week(week, config.regimes)
        r_prev = regime_for_week(week - timedelta(days=7), config.regimes)
        for ci, county in enumerate(counties):
            curr = base.metrics[(ci, week)]
            prev = base.metrics[(ci, week - timedelta(days=7))]
            score = compute_z(curr, prev, county.is_large, r_curr, r_prev)
            tier = assign_tier_from_z(score.z)
            if config.noncomplier_rate > 0 and bool(
                    rng.bernoulli(rng.derive_seed(config.seed, 5),
                                  config.noncomplier_rate,
                                  np.int64(ci * 1000 + wi))):
                tier = Tier.RED if tier is Tier.PURPLE else Tier.PURPLE
                injected.add((county.id, week))
            tiers[(county.id, week)] = tier

    dataset = build_dataset(counties, adjacency_ids, config.weeks, metrics,
                            tiers, cbgs, pois, devices, [])
    records = compute_assignments(dataset, config.regimes)

    planted = params if params is not None else default_planted_params(config)
    encoding = Encoding.identity(dataset.groups,
                                 [f"demo_{i+1}" for i in range(config.demographics_dim)])
    edges = simulate_visits(dataset, records, planted, encoding, config.seed)
    dataset = build_dataset(counties, adjacency_ids, config.weeks, metrics,
                            tiers, cbgs, pois, devices, edges)
    records = compute_assignments(dataset, config.regimes)

    world = World(dataset=dataset, records=records, planted=planted,
                  planted_encoding=encoding, injected_noncompliers=injected,
                  config=config)
    _warn_on_missing_support(world)
    return world


def _warn_on_missing_support(world: World) -> None:
    filtered = world.filtered(bandwidth=float("inf"))
    counts = {c: v["nonzero_triples"] for c, v in filtered.condition_counts.items()}
    missing = [c for c in ("PR", "RP") if counts.get(c, 0) == 0]
    if missing:
        log.warning("synthetic world lacks %s support; condition counts: %s",
                    "/".join(missing), counts)


def ground_truth_jsonable(world: World) -> dict:
    return {
        "config": config_to_jsonable(world.config),
        "planted_params": params_to_jsonable(world.planted, world.planted_encoding),
        "injected_noncompliers": sorted(
            [c, str(w)] for c, w in world.injected_noncompliers),
        "assignments": [
            {"county": r.county, "week": str(r.week), "z": r.z,
             "tier": r.tier.value, "compliant": r.compliant}
            for _, r in sorted(world.records.items())],
    }


def config_to_jsonable(config: WorldConfig) -> dict:
    out = {}
    for k, v in config.__dict__.items():
        if isinstance(v, date):
            out[k] = str(v)
        elif k == "regimes":
            out[k] = [{"cr_red": r.cr_red, "tp_red": r.tp_red, "he_red": r.he_red,
                       "tp_orange": r.tp_orange, "he_orange": r.he_orange,
                       "effective_from": str(r.effective_from)} for r in v]
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def regimes_from_jsonable(rows: list[dict]) -> tuple[ThresholdRegime, ...]:
    return tuple(
        ThresholdRegime(cr_red=r["cr_red"], tp_red=r["tp_red"],
                        he_red=r["he_red"], tp_orange=r["tp_orange"],
                        he_orange=r["he_orange"],
                        effective_from=date.fromisoformat(r["effective_from"]))
        for r in rows)


def config_from_jsonable(obj: dict) -> WorldConfig:
    kwargs = dict(obj)
    if "start_week" in kwargs:
        kwargs["start_week"] = date.fromisoformat(kwargs["start_week"])
    if "regimes" in kwargs:
        kwargs["regimes"] = regimes_from_jsonable(kwargs["regimes"])
    for k in ("cbgs_per_county", "pois_per_county", "groups", "group_mix",
              "tau_pr", "tau_rp", "tau_rr", "center"):
        if k in kwargs and kwargs[k] is not None:
            kwargs[k] = tuple(kwargs[k])
    return WorldConfig(**kwargs)
