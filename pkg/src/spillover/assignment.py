"""Tier assignment scores and the analysis-sample filter.

Each county-week gets a single continuous score ``z`` built by centering its
health metrics at the tier thresholds in force that week and aggregating with
max/min. The sign rule is strict: a county belongs in the red tier exactly
when z < 0. The filter keeps cross-county (cbg, poi, week) triples whose two
counties are adjacent, treatment-tiered, compliant with the sign rule, and
within a bandwidth of the threshold.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .domain import (
    CONDITIONS,
    TIER_CODE,
    CountyWeekMetrics,
    MobilityDataset,
    ThresholdRegime,
    Tier,
    ValidationError,
)

#: Threshold history used for the real program: case-rate red cutoff rose
#: from 7 to 10 per 100k on 2021-03-12; positivity/equity cutoffs were 8%
#: (red) and 5% (orange) throughout.
DEFAULT_REGIMES = (
    ThresholdRegime(cr_red=7.0, tp_red=8.0, he_red=8.0, tp_orange=5.0,
                    he_orange=5.0, effective_from=date(2020, 8, 31)),
    ThresholdRegime(cr_red=10.0, tp_red=8.0, he_red=8.0, tp_orange=5.0,
                    he_orange=5.0, effective_from=date(2021, 3, 12)),
)

VARIANT_NAMES = ("large_pre", "large_post", "small_pre", "small_post")

Z1_LABELS = ("CR@w", "TP@w", "HE@w", "CR@w-1", "TP@w-1", "HE@w-1")
Z2_LABELS = ("TP@w", "HE@w", "TP@w-1", "HE@w-1")
SMALL_LABELS = ("CR@w", "TP@w", "CR@w-1", "TP@w-1")


def regime_for_week(week: date, regimes=DEFAULT_REGIMES) -> ThresholdRegime:
    """The regime whose effective date is the latest one <= the week's Monday."""
    live = [r for r in regimes if r.effective_from <= week]
    if not live:
        raise ValidationError(f"no threshold regime in force for week {week}")
    return max(live, key=lambda r: r.effective_from)


def regime_index_for_week(week: date, regimes=DEFAULT_REGIMES) -> int:
    ordered = sorted(regimes, key=lambda r: r.effective_from)
    if len(ordered) > 2:
        raise ValidationError("at most two threshold regimes are modeled")
    idx = 0
    for i, r in enumerate(ordered):
        if r.effective_from <= week:
            idx = i
    return idx


def variant_index(is_large: bool, regime_idx: int) -> int:
    """Slope-variant index over size class x regime: large_pre, large_post,
    small_pre, small_post."""
    return (0 if is_large else 2) + regime_idx


def center_metric(value: float, threshold: float) -> float:
    """Metric centered at its threshold (signed excess)."""
    return value - threshold


@dataclass(frozen=True)
class TriggerPattern:
    """Which centered input attained each aggregation (first-listed wins ties)."""

    z1_argmax: str
    z2_argmax: str | None = None
    min_branch: str | None = None


@dataclass(frozen=True)
class ZScore:
    z: float
    z1: float | None
    z2: float | None
    trigger: TriggerPattern


def _argmax_label(values, labels) -> tuple[float, str]:
    i = int(np.argmax(values))
    return float(values[i]), labels[i]


def compute_z(curr: CountyWeekMetrics, prev: CountyWeekMetrics, is_large: bool,
              regime_curr: ThresholdRegime, regime_prev: ThresholdRegime) -> ZScore:
    """Aggregate two weeks of centered metrics into the assignment score.

    Large counties: z1 = max of six red-centered inputs, z2 = max of four
    orange-centered inputs, z = min(z1, z2). Small counties: z = max of four
    red-centered case-rate/positivity inputs. Each metric is centered at the
    thresholds in force for its own week.
    """
    if is_large:
        if curr.health_equity is None or prev.health_equity is None:
            raise ValidationError(
                f"{curr.county}/{curr.week}: health equity required for large county")
        z1_vals = (
            center_metric(curr.case_rate, regime_curr.cr_red),
            center_metric(curr.test_positivity, regime_curr.tp_red),
            center_metric(curr.health_equity, regime_curr.he_red),
            center_metric(prev.case_rate, regime_prev.cr_red),
            center_metric(prev.test_positivity, regime_prev.tp_red),
            center_metric(prev.health_equity, regime_prev.he_red),
        )
        z2_vals = (
            center_metric(curr.test_positivity, regime_curr.tp_orange),
            center_metric(curr.health_equity, regime_curr.he_orange),
            center_metric(prev.test_positivity, regime_prev.tp_orange),
            center_metric(prev.health_equity, regime_prev.he_orange),
        )
        z1, lab1 = _argmax_label(z1_vals, Z1_LABELS)
        z2, lab2 = _argmax_label(z2_vals, Z2_LABELS)
        branch = "Z1" if z1 <= z2 else "Z2"
        return ZScore(min(z1, z2), z1, z2, TriggerPattern(lab1, lab2, branch))
    vals = (
        center_metric(curr.case_rate, regime_curr.cr_red),
        center_metric(curr.test_positivity, regime_curr.tp_red),
        center_metric(prev.case_rate, regime_prev.cr_red),
        center_metric(prev.test_positivity, regime_prev.tp_red),
    )
    z, lab = _argmax_label(vals, SMALL_LABELS)
    return ZScore(z, None, None, TriggerPattern(lab))


def assign_tier_from_z(z: float) -> Tier:
    """Red strictly below zero; purple at and above."""
    return Tier.RED if z < 0 else Tier.PURPLE


def check_compliance(observed: Tier, z: float) -> bool:
    """True iff the observed tier matches the tier implied by the score."""
    return observed == assign_tier_from_z(z)


@dataclass(frozen=True)
class AssignmentRecord:
    county: str
    week: date
    z: float
    z1: float | None
    z2: float | None
    tier: Tier                      # observed tier
    compliant: bool
    trigger: TriggerPattern
    regime_idx: int = 0             # which threshold regime was in force


def compute_assignments(dataset: MobilityDataset,
                        regimes=DEFAULT_REGIMES) -> dict[tuple[int, int], AssignmentRecord]:
    """Assignment records for every county-week with metrics for both weeks
    and an observed tier, keyed by (county_idx, week_idx)."""
    ordered = tuple(sorted(regimes, key=lambda r: r.effective_from))
    out: dict[tuple[int, int], AssignmentRecord] = {}
    for wi, week in enumerate(dataset.weeks):
        prev_week = week - timedelta(days=7)
        r_curr = regime_for_week(week, ordered)
        r_prev = regime_for_week(prev_week, ordered)
        for ci, county in enumerate(dataset.counties):
            curr = dataset.metrics.get((ci, week))
            prev = dataset.metrics.get((ci, prev_week))
            tier = dataset.observed_tiers.get((ci, wi))
            if curr is None or prev is None or tier is None:
                continue
            score = compute_z(curr, prev, county.is_large, r_curr, r_prev)
            out[(ci, wi)] = AssignmentRecord(
                county=county.id, week=week, z=score.z, z1=score.z1, z2=score.z2,
                tier=tier, compliant=check_compliance(tier, score.z),
                trigger=score.trigger,
                regime_idx=regime_index_for_week(week, ordered))
    return out


@dataclass(frozen=True)
class FilterConfig:
    """Sample-restriction settings for the local analysis around z = 0."""

    bandwidth: float = 5.0
    conditions: frozenset[str] = frozenset(CONDITIONS)
    excluded_weeks: frozenset[date] = frozenset()
    regime_change: date | None = None   # mid-week change excludes the whole week

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValidationError("bandwidth must be positive")
        if not self.conditions <= set(CONDITIONS):
            raise ValidationError(f"conditions must be among {CONDITIONS}")

    def all_excluded_weeks(self) -> frozenset[date]:
        extra = set(self.excluded_weeks)
        if self.regime_change is not None and self.regime_change.weekday() != 0:
            extra.add(self.regime_change - timedelta(days=self.regime_change.weekday()))
        return frozenset(extra)


@dataclass(frozen=True)
class PairBlock:
    """One retained (week, cbg-county, poi-county) block of the dense space."""

    week_idx: int
    cbg_county: int
    poi_county: int
    zi: float
    zj: float
    vi: int        # slope-variant index of the cbg county-week
    vj: int
    ti: int        # tier codes: purple=0, red=1
    tj: int

    @property
    def condition(self) -> str:
        return CONDITIONS[self.ti * 2 + self.tj]


@dataclass
class FilteredDataset:
    """The analysis sample: retained blocks plus per-county-week bookkeeping."""

    dataset: MobilityDataset
    config: FilterConfig
    scope: str                                        # "cross" or "within"
    records: dict[tuple[int, int], AssignmentRecord]
    kept_county_weeks: set[tuple[int, int]]
    drop_reasons: dict[tuple[int, int], str]
    blocks: list[PairBlock]
    condition_counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def block_shape(self, block: PairBlock) -> tuple[int, int]:
        return (len(self.dataset.cbgs_of(block.cbg_county)),
                len(self.dataset.pois_of(block.poi_county)))

    def block_edges(self, block: PairBlock) -> slice:
        return self.dataset.edge_block(block.week_idx, block.cbg_county,
                                       block.poi_county)

    def dense_triple_count(self) -> int:
        return sum(int(np.prod(self.block_shape(b))) for b in self.blocks)

    def nonzero_triple_count(self) -> int:
        ds = self.dataset
        return sum(ds.edge_visits[self.block_edges(b)].size for b in self.blocks)

    def contains(self, week_idx: int, cbg_idx: int, poi_idx: int) -> bool:
        """Retained-triple predicate."""
        ca = int(self.dataset.cbg_county[cbg_idx])
        cb = int(self.dataset.poi_county[poi_idx])
        return any(b.week_idx == week_idx and b.cbg_county == ca
                   and b.poi_county == cb for b in self.blocks)

    def summary(self) -> dict:
        return {
            "scope": self.scope,
            "bandwidth": self.config.bandwidth,
            "excluded_weeks": sorted(str(w) for w in self.config.all_excluded_weeks()),
            "dense_triples": self.dense_triple_count(),
            "nonzero_triples": self.nonzero_triple_count(),
            "conditions": self.condition_counts,
            "dropped_county_weeks": {
                f"{self.dataset.counties[c].id}/{self.dataset.weeks[w]}": reason
                for (c, w), reason in sorted(self.drop_reasons.items())},
        }


def _county_week_status(record: AssignmentRecord | None, h: float) -> str | None:
    """None if usable, else the first failing criterion."""
    if record is None:
        return "no_assignment"
    if not record.tier.is_treatment:
        return "tier_not_treatment"
    if not record.compliant:
        return "non_compliant"
    if abs(record.z) > h:
        return "outside_bandwidth"
    return None


def filter_dataset(dataset: MobilityDataset,
                   assignments: dict[tuple[int, int], AssignmentRecord],
                   config: FilterConfig,
                   scope: str = "cross") -> FilteredDataset:
    """Apply the sample restrictions and enumerate retained dense blocks.

    Cross scope keeps (cbg, poi) pairs in adjacent counties; within scope
    keeps same-county pairs (used by the within-county companion model).
    Both county-weeks must be treatment-tiered, compliant, and within the
    bandwidth; excluded weeks are dropped entirely.
    """
    if scope not in ("cross", "within"):
        raise ValidationError(f"unknown filter scope {scope!r}")
    excluded = config.all_excluded_weeks()
    kept: set[tuple[int, int]] = set()
    reasons: dict[tuple[int, int], str] = {}
    for wi, week in enumerate(dataset.weeks):
        if week in excluded:
            continue
        for ci in range(dataset.n_counties):
            status = _county_week_status(assignments.get((ci, wi)), config.bandwidth)
            if status is None:
                kept.add((ci, wi))
            else:
                reasons[(ci, wi)] = status

    if scope == "cross":
        pairs = sorted({(a, b) for a, b in dataset.adjacency}
                       | {(b, a) for a, b in dataset.adjacency})
    else:
        pairs = [(c, c) for c in range(dataset.n_counties)]

    blocks: list[PairBlock] = []
    counts = {c: {"dense_triples": 0, "nonzero_triples": 0, "pairs": set()}
              for c in CONDITIONS}
    for wi, week in enumerate(dataset.weeks):
        if week in excluded:
            continue
        for ca, cb in pairs:
            if (ca, wi) not in kept or (cb, wi) not in kept:
                continue
            ra, rb = assignments[(ca, wi)], assignments[(cb, wi)]
            cond = CONDITIONS[TIER_CODE[ra.tier] * 2 + TIER_CODE[rb.tier]]
            if cond not in config.conditions:
                continue
            block = PairBlock(
                week_idx=wi, cbg_county=ca, poi_county=cb,
                zi=ra.z, zj=rb.z,
                vi=variant_index(dataset.counties[ca].is_large, ra.regime_idx),
                vj=variant_index(dataset.counties[cb].is_large, rb.regime_idx),
                ti=TIER_CODE[ra.tier], tj=TIER_CODE[rb.tier])
            n_cells = len(dataset.cbgs_of(ca)) * len(dataset.pois_of(cb))
            if n_cells == 0:
                continue
            blocks.append(block)
            counts[cond]["dense_triples"] += n_cells
            sl = dataset.edge_block(wi, ca, cb)
            counts[cond]["nonzero_triples"] += sl.stop - sl.start
            counts[cond]["pairs"].add((ca, cb))

    condition_counts = {
        c: {"dense_triples": v["dense_triples"],
            "nonzero_triples": v["nonzero_triples"],
            "unique_pairs": len(v["pairs"])}
        for c, v in counts.items()}
    return FilteredDataset(dataset=dataset, config=config, scope=scope,
                           records=assignments, kept_county_weeks=kept,
                           drop_reasons=reasons, blocks=blocks,
                           condition_counts=condition_counts)


def trigger_histogram(assignments: dict[tuple[int, int], AssignmentRecord],
                      dataset: MobilityDataset) -> dict[str, Counter]:
    """Frequency of each aggregation's attaining input among compliant large
    counties: one counter per aggregation."""
    z1, z2, branch = Counter(), Counter(), Counter()
    for (ci, _), rec in sorted(assignments.items()):
        if not dataset.counties[ci].is_large or not rec.compliant:
            continue
        z1[rec.trigger.z1_argmax] += 1
        if rec.trigger.z2_argmax is not None:
            z2[rec.trigger.z2_argmax] += 1
        if rec.trigger.min_branch is not None:
            branch[rec.trigger.min_branch] += 1
    return {"z1_argmax": z1, "z2_argmax": z2, "min_branch": branch}
