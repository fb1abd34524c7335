"""Core data model for the county mobility network.

Counties carry weekly health metrics and policy tiers; census block groups
(CBGs) and points of interest (POIs) form a bipartite visit network with
weekly sparse edges. Zero-visit edges are implicit: only positive visit
counts are stored, and the dense space is enumerated on demand.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0
LARGE_POPULATION_CUTOFF = 106_000


class ValidationError(ValueError):
    """Raised when input data violates a structural invariant."""


class Tier(Enum):
    PURPLE = "purple"
    RED = "red"
    ORANGE = "orange"
    YELLOW = "yellow"

    @property
    def is_treatment(self) -> bool:
        return self in (Tier.PURPLE, Tier.RED)


#: Tier codes used for treatment cells: purple=0, red=1.
TREATMENT_TIERS = (Tier.PURPLE, Tier.RED)
TIER_CODE = {Tier.PURPLE: 0, Tier.RED: 1}

#: Ordered pair conditions, indexed by cbg_tier_code * 2 + poi_tier_code.
CONDITIONS = ("PP", "PR", "RP", "RR")


@dataclass(frozen=True)
class County:
    id: str
    population: int
    name: str = ""

    def __post_init__(self):
        if self.population <= 0:
            raise ValidationError(f"county {self.id}: population must be positive")

    @property
    def is_large(self) -> bool:
        return self.population > LARGE_POPULATION_CUTOFF

    @property
    def size_class(self) -> str:
        return "large" if self.is_large else "small"


@dataclass(frozen=True)
class CountyWeekMetrics:
    """Weekly health metrics for one county (week = its Monday)."""

    county: str
    week: date
    case_rate: float          # adjusted cases per 100k
    test_positivity: float    # percent
    health_equity: float | None = None  # percent; may be absent for small counties

    def __post_init__(self):
        if self.case_rate < 0:
            raise ValidationError(f"{self.county}/{self.week}: case rate < 0")
        if not 0 <= self.test_positivity <= 100:
            raise ValidationError(f"{self.county}/{self.week}: test positivity out of range")
        if self.health_equity is not None and not 0 <= self.health_equity <= 100:
            raise ValidationError(f"{self.county}/{self.week}: health equity out of range")


@dataclass(frozen=True)
class ThresholdRegime:
    """Tier thresholds in force from a given date."""

    cr_red: float
    tp_red: float
    he_red: float
    tp_orange: float
    he_orange: float
    effective_from: date

    def __post_init__(self):
        if min(self.cr_red, self.tp_red, self.he_red, self.tp_orange, self.he_orange) <= 0:
            raise ValidationError("all thresholds must be positive")
        if self.tp_orange >= self.tp_red or self.he_orange >= self.he_red:
            raise ValidationError("orange thresholds must be below red thresholds")


def haversine_km(lat1, lon1, lat2, lon2) -> np.ndarray | float:
    """Great-circle distance in kilometers (vectorized, symmetric, >= 0)."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(x, dtype=np.float64))
                              for x in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    out = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(out) if out.ndim == 0 else out


@dataclass
class MobilityDataset:
    """Immutable-after-load container for one study window.

    Counties, CBGs, POIs and weeks each get a dense integer index; all
    array-valued fields are aligned to those indices. `edges` holds only
    positive visit counts, sorted by (week, cbg, poi).
    """

    counties: list[County]
    adjacency: set[tuple[int, int]]            # unordered index pairs, a < b
    weeks: list[date]                          # sorted Mondays
    metrics: dict[tuple[int, date], CountyWeekMetrics]   # (county_idx, week)
    observed_tiers: dict[tuple[int, int], Tier]          # (county_idx, week_idx)
    cbg_ids: list[str]
    cbg_county: np.ndarray
    cbg_lat: np.ndarray
    cbg_lon: np.ndarray
    cbg_demographics: np.ndarray               # (n_cbg, D)
    demographic_names: list[str]
    poi_ids: list[str]
    poi_county: np.ndarray
    poi_lat: np.ndarray
    poi_lon: np.ndarray
    poi_group: np.ndarray                      # int codes into `groups`
    poi_area: np.ndarray
    groups: list[str]
    devices: np.ndarray                        # (n_cbg, n_weeks), positive
    edge_week: np.ndarray
    edge_cbg: np.ndarray
    edge_poi: np.ndarray
    edge_visits: np.ndarray

    county_index: dict[str, int] = field(init=False)
    week_index: dict[date, int] = field(init=False)
    _cbgs_by_county: list[np.ndarray] = field(init=False, repr=False)
    _pois_by_county: list[np.ndarray] = field(init=False, repr=False)
    _edge_block_index: dict[tuple[int, int, int], slice] = field(init=False, repr=False)
    _dist_cache: dict[tuple[int, int], np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.county_index = {c.id: i for i, c in enumerate(self.counties)}
        self.week_index = {w: i for i, w in enumerate(self.weeks)}
        self._validate()
        n = len(self.counties)
        self._cbgs_by_county = [np.flatnonzero(self.cbg_county == c) for c in range(n)]
        self._pois_by_county = [np.flatnonzero(self.poi_county == c) for c in range(n)]
        self._sort_edges()
        self._dist_cache = {}

    # -- construction helpers -------------------------------------------------

    def _validate(self):
        n = len(self.counties)
        if len(self.county_index) != n:
            raise ValidationError("duplicate county ids")
        for a, b in self.adjacency:
            if a == b:
                raise ValidationError("adjacency contains a self-pair")
            if not (0 <= a < n and 0 <= b < n):
                raise ValidationError("adjacency references unknown county")
        if sorted(self.weeks) != self.weeks or len(set(self.weeks)) != len(self.weeks):
            raise ValidationError("weeks must be sorted and unique")
        for arr, kind in ((self.cbg_county, "cbg"), (self.poi_county, "poi")):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValidationError(f"{kind} references unknown county")
        for (ci, _), m in self.metrics.items():
            if self.counties[ci].is_large and m.health_equity is None:
                raise ValidationError(
                    f"{m.county}/{m.week}: health equity required for large county")
        if self.devices.shape != (len(self.cbg_ids), len(self.weeks)):
            raise ValidationError("device counts must cover every (cbg, week)")
        if self.devices.size and self.devices.min() <= 0:
            raise ValidationError("device counts must be positive")
        if self.edge_visits.size and self.edge_visits.min() < 1:
            raise ValidationError("stored edges must have visits >= 1")
        if self.edge_week.size:
            if self.edge_week.max() >= len(self.weeks) or self.edge_week.min() < 0:
                raise ValidationError("edge references unknown week")
            if self.edge_cbg.max() >= len(self.cbg_ids) or self.edge_poi.max() >= len(self.poi_ids):
                raise ValidationError("edge references unknown cbg/poi")
        triples = set(zip(self.edge_week.tolist(), self.edge_cbg.tolist(), self.edge_poi.tolist()))
        if len(triples) != self.edge_week.size:
            raise ValidationError("duplicate visit edges")

    def _sort_edges(self):
        ec = self.cbg_county[self.edge_cbg] if self.edge_cbg.size else np.empty(0, int)
        ep = self.poi_county[self.edge_poi] if self.edge_poi.size else np.empty(0, int)
        order = np.lexsort((self.edge_poi, self.edge_cbg, ep, ec, self.edge_week))
        for name in ("edge_week", "edge_cbg", "edge_poi", "edge_visits"):
            setattr(self, name, getattr(self, name)[order])
        # block index: (week, cbg_county, poi_county) -> slice into edge arrays
        self._edge_block_index = {}
        if self.edge_week.size:
            ec, ep = ec[order], ep[order]
            keys = np.stack([self.edge_week, ec, ep], axis=1)
            change = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
            starts = np.concatenate([[0], change])
            stops = np.concatenate([change, [len(keys)]])
            for s, e in zip(starts, stops):
                w, ca, cb = keys[s]
                self._edge_block_index[(int(w), int(ca), int(cb))] = slice(int(s), int(e))

    # -- queries ---------------------------------------------------------------

    @property
    def n_counties(self) -> int:
        return len(self.counties)

    def neighbors(self, county_idx: int) -> list[int]:
        out = [b if a == county_idx else a
               for a, b in self.adjacency if county_idx in (a, b)]
        return sorted(out)

    def adjacent(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.adjacency

    def cbgs_of(self, county_idx: int) -> np.ndarray:
        return self._cbgs_by_county[county_idx]

    def pois_of(self, county_idx: int) -> np.ndarray:
        return self._pois_by_county[county_idx]

    def edge_block(self, week_idx: int, cbg_county: int, poi_county: int) -> slice:
        """Slice of the edge arrays holding this (week, county pair) block."""
        return self._edge_block_index.get((week_idx, cbg_county, poi_county),
                                          slice(0, 0))

    def distance_matrix(self, cbg_county: int, poi_county: int) -> np.ndarray:
        """Haversine km between every CBG of one county and POI of another,
        shaped (n_cbgs, n_pois). Cached; week-independent."""
        key = (cbg_county, poi_county)
        if key not in self._dist_cache:
            ci = self._cbgs_by_county[cbg_county]
            pj = self._pois_by_county[poi_county]
            self._dist_cache[key] = haversine_km(
                self.cbg_lat[ci][:, None], self.cbg_lon[ci][:, None],
                self.poi_lat[pj][None, :], self.poi_lon[pj][None, :])
        return self._dist_cache[key]

    def device_means(self) -> np.ndarray:
        """Per-CBG mean device count over the full study window."""
        return self.devices.mean(axis=1)

    def total_visits(self) -> int:
        return int(self.edge_visits.sum())


def dense_index(dataset: MobilityDataset) -> Iterator[tuple[date, str, str, int]]:
    """Stream every (week, cbg, poi) triple with its visit count, resolving
    implicit zeros against the sparse edge store. O(1) memory beyond the
    per-week edge lookup."""
    for wi, week in enumerate(dataset.weeks):
        in_week = dataset.edge_week == wi
        stored = {(int(c), int(p)): int(v)
                  for c, p, v in zip(dataset.edge_cbg[in_week],
                                     dataset.edge_poi[in_week],
                                     dataset.edge_visits[in_week])}
        for ci, pi in itertools.product(range(len(dataset.cbg_ids)),
                                        range(len(dataset.poi_ids))):
            yield week, dataset.cbg_ids[ci], dataset.poi_ids[pi], stored.get((ci, pi), 0)


def build_dataset(
    counties: Sequence[County],
    adjacency_ids: Sequence[tuple[str, str]],
    weeks: Sequence[date],
    metrics: Sequence[CountyWeekMetrics],
    tiers: dict[tuple[str, date], Tier],
    cbgs: Sequence[tuple[str, str, float, float, Sequence[float]]],
    pois: Sequence[tuple[str, str, float, float, str, float]],
    devices: dict[tuple[str, date], float],
    edges: Sequence[tuple[date, str, str, int]],
    demographic_names: Sequence[str] | None = None,
) -> MobilityDataset:
    """Assemble a dataset from row-level records, resolving ids to indices.

    cbgs rows: (id, county, lat, lon, demographics);
    pois rows: (id, county, lat, lon, group, area_sqft);
    edges rows: (week, cbg, poi, visits).
    """
    counties = sorted(counties, key=lambda c: c.id)
    cidx = {c.id: i for i, c in enumerate(counties)}

    def county_of(cid: str, what: str) -> int:
        if cid not in cidx:
            raise ValidationError(f"{what} references unknown county {cid!r}")
        return cidx[cid]

    adjacency = set()
    for a, b in adjacency_ids:
        ia, ib = county_of(a, "adjacency"), county_of(b, "adjacency")
        if ia == ib:
            raise ValidationError(f"adjacency self-pair {a!r}")
        adjacency.add((min(ia, ib), max(ia, ib)))

    weeks = sorted(set(weeks))
    widx = {w: i for i, w in enumerate(weeks)}

    cbgs = sorted(cbgs, key=lambda r: r[0])
    pois = sorted(pois, key=lambda r: r[0])
    cbg_ids = [r[0] for r in cbgs]
    poi_ids = [r[0] for r in pois]
    if len(set(cbg_ids)) != len(cbg_ids) or len(set(poi_ids)) != len(poi_ids):
        raise ValidationError("duplicate cbg/poi ids")
    cbg_index = {c: i for i, c in enumerate(cbg_ids)}
    poi_index = {p: i for i, p in enumerate(poi_ids)}

    demo_dim = len(cbgs[0][4]) if cbgs else 0
    demo = np.zeros((len(cbgs), demo_dim))
    for i, r in enumerate(cbgs):
        if len(r[4]) != demo_dim:
            raise ValidationError("inconsistent demographics vector length")
        demo[i] = r[4]
    groups = sorted({r[4] for r in pois})
    gidx = {g: i for i, g in enumerate(groups)}
    for r in pois:
        if r[5] <= 0:
            raise ValidationError(f"poi {r[0]}: area must be positive")

    dev = np.zeros((len(cbgs), len(weeks)))
    seen = set()
    for (cid, w), v in devices.items():
        if cid not in cbg_index or w not in widx:
            raise ValidationError(f"device record for unknown ({cid}, {w})")
        if (cid, w) in seen:
            raise ValidationError(f"duplicate device record ({cid}, {w})")
        seen.add((cid, w))
        dev[cbg_index[cid], widx[w]] = v
    if len(seen) != dev.size:
        raise ValidationError("device counts must cover every (cbg, week)")

    e_w = np.array([widx[w] for w, _, _, _ in edges], dtype=np.int64)
    e_c = np.array([cbg_index[c] for _, c, _, _ in edges], dtype=np.int64)
    e_p = np.array([poi_index[p] for _, _, p, _ in edges], dtype=np.int64)
    e_v = np.array([v for _, _, _, v in edges], dtype=np.int64)

    metric_map = {}
    for m in metrics:
        key = (county_of(m.county, "metrics"), m.week)
        if key in metric_map:
            raise ValidationError(f"duplicate metrics row {m.county}/{m.week}")
        metric_map[key] = m

    tier_map = {}
    for (cid, w), t in tiers.items():
        ci = county_of(cid, "tiers")
        if w not in widx:
            raise ValidationError(f"tier row for out-of-window week {w}")
        tier_map[(ci, widx[w])] = t

    return MobilityDataset(
        counties=list(counties),
        adjacency=adjacency,
        weeks=list(weeks),
        metrics=metric_map,
        observed_tiers=tier_map,
        cbg_ids=cbg_ids,
        cbg_county=np.array([county_of(r[1], f"cbg {r[0]}") for r in cbgs], dtype=np.int64),
        cbg_lat=np.array([r[2] for r in cbgs], dtype=np.float64),
        cbg_lon=np.array([r[3] for r in cbgs], dtype=np.float64),
        cbg_demographics=demo,
        demographic_names=list(demographic_names) if demographic_names
        else [f"demo_{i+1}" for i in range(demo_dim)],
        poi_ids=poi_ids,
        poi_county=np.array([county_of(r[1], f"poi {r[0]}") for r in pois], dtype=np.int64),
        poi_lat=np.array([r[2] for r in pois], dtype=np.float64),
        poi_lon=np.array([r[3] for r in pois], dtype=np.float64),
        poi_group=np.array([gidx[r[4]] for r in pois], dtype=np.int64),
        poi_area=np.array([r[5] for r in pois], dtype=np.float64),
        groups=groups,
        devices=dev,
        edge_week=e_w, edge_cbg=e_c, edge_poi=e_p, edge_visits=e_v,
    )
