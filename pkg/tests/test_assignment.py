from datetime import date, timedelta

import pytest
from hypothesis import given, strategies as st

from spillover.assignment import (
    DEFAULT_REGIMES,
    AssignmentRecord,
    FilterConfig,
    TriggerPattern,
    assign_tier_from_z,
    check_compliance,
    center_metric,
    compute_assignments,
    compute_z,
    filter_dataset,
    regime_for_week,
    trigger_histogram,
)
from spillover.domain import CountyWeekMetrics, Tier
from conftest import TOY_REGIME, WEEK0, build_toy


def mk(county, week, cr, tp, he=None):
    return CountyWeekMetrics(county, week, cr, tp, he)


def test_center_metric():
    assert center_metric(7.0, 7.0) == 0.0
    assert center_metric(6.0, 7.0) == -1.0
    # positivity at 7% against the 5% orange threshold
    assert center_metric(7.0, 5.0) == 2.0


def test_compute_z_large_hand_example():
    curr = mk("A", WEEK0, cr=6.0, tp=7.0, he=7.5)
    prev = mk("A", WEEK0 - timedelta(days=7), cr=6.0, tp=7.0, he=7.5)
    s = compute_z(curr, prev, True, TOY_REGIME, TOY_REGIME)
    assert s.z1 == pytest.approx(-0.5)
    assert s.z2 == pytest.approx(2.5)
    assert s.z == pytest.approx(-0.5)
    assert s.trigger == TriggerPattern("HE@w", "HE@w", "Z1")
    assert assign_tier_from_z(s.z) is Tier.RED


def test_compute_z_small_hand_example():
    curr = mk("B", WEEK0, cr=9.0, tp=6.0)
    prev = mk("B", WEEK0 - timedelta(days=7), cr=9.0, tp=6.0)
    s = compute_z(curr, prev, False, TOY_REGIME, TOY_REGIME)
    assert s.z == pytest.approx(2.0)
    assert s.z1 is None and s.z2 is None
    assert s.trigger == TriggerPattern("CR@w")


def test_compute_z_at_thresholds_is_purple():
    curr = mk("A", WEEK0, cr=7.0, tp=8.0, he=8.0)
    prev = mk("A", WEEK0 - timedelta(days=7), cr=7.0, tp=8.0, he=8.0)
    s = compute_z(curr, prev, True, TOY_REGIME, TOY_REGIME)
    assert s.z1 == 0.0 and s.z2 == 3.0 and s.z == 0.0
    assert assign_tier_from_z(s.z) is Tier.PURPLE


def test_compute_z_small_ignores_health_equity():
    prev_w = WEEK0 - timedelta(days=7)
    base = compute_z(mk("B", WEEK0, 8.0, 6.0), mk("B", prev_w, 8.0, 6.0),
                     False, TOY_REGIME, TOY_REGIME)
    with_he = compute_z(mk("B", WEEK0, 8.0, 6.0, he=99.0),
                        mk("B", prev_w, 8.0, 6.0, he=99.0),
                        False, TOY_REGIME, TOY_REGIME)
    assert base.z == with_he.z


def test_compute_z_large_requires_health_equity():
    prev_w = WEEK0 - timedelta(days=7)
    with pytest.raises(Exception, match="health equity"):
        compute_z(mk("A", WEEK0, 8.0, 6.0), mk("A", prev_w, 8.0, 6.0),
                  True, TOY_REGIME, TOY_REGIME)


@given(st.floats(0, 30), st.floats(0, 30), st.floats(0.1, 20))
def test_monotone_in_case_rate(cr, tp, bump):
    prev_w = WEEK0 - timedelta(days=7)
    lo = compute_z(mk("B", WEEK0, cr, tp), mk("B", prev_w, cr, tp),
                   False, TOY_REGIME, TOY_REGIME)
    hi = compute_z(mk("B", WEEK0, cr + bump, tp), mk("B", prev_w, cr, tp),
                   False, TOY_REGIME, TOY_REGIME)
    assert hi.z >= lo.z


def test_tier_sign_rule():
    assert assign_tier_from_z(-0.001) is Tier.RED
    assert assign_tier_from_z(0.0) is Tier.PURPLE
    assert assign_tier_from_z(2.0) is Tier.PURPLE


def test_check_compliance():
    assert check_compliance(Tier.RED, -1.2)
    assert not check_compliance(Tier.RED, 0.5)   # special-request holdout
    assert check_compliance(Tier.PURPLE, 0.0)


def test_regime_selection_by_week():
    assert regime_for_week(date(2021, 3, 8)).cr_red == 7.0
    assert regime_for_week(date(2021, 3, 15)).cr_red == 10.0
    assert regime_for_week(date(2021, 3, 12)).cr_red == 10.0


def test_regime_change_week_excluded():
    cfg = FilterConfig(bandwidth=5.0, regime_change=date(2021, 3, 12))
    assert date(2021, 3, 8) in cfg.all_excluded_weeks()
    # a Monday change needs no exclusion
    cfg2 = FilterConfig(bandwidth=5.0, regime_change=date(2021, 3, 15))
    assert not cfg2.all_excluded_weeks()


def test_filter_keeps_adjacent_compliant_in_band():
    edges = [(WEEK0, "A-b1", "B-p1", 3), (WEEK0, "C-b1", "B-p2", 2),
             (WEEK0, "A-b1", "A-p1", 5)]
    ds = build_toy({"A": 1.0, "B": -1.0, "C": 2.0}, edges=edges)
    recs = compute_assignments(ds, (TOY_REGIME,))
    f = filter_dataset(ds, recs, FilterConfig(bandwidth=5.0))
    # A->B and C->B are PR; B->A and B->C are RP
    conds = {b.condition for b in f.blocks}
    assert conds == {"PR", "RP"}
    assert f.nonzero_triple_count() == 2           # the within-A edge is out of scope
    assert f.condition_counts["PR"]["nonzero_triples"] == 2
    assert f.condition_counts["RP"]["nonzero_triples"] == 0
    assert f.condition_counts["PR"]["unique_pairs"] == 2
    # dense counts: A->B 2x2, B->A 1x1, B->C 1x1, C->B 1x2
    assert f.dense_triple_count() == 4 + 1 + 1 + 2


def test_filter_bandwidth_nesting():
    ds = build_toy({"A": 1.0, "B": -1.0, "C": 4.5})
    recs = compute_assignments(ds, (TOY_REGIME,))
    narrow = filter_dataset(ds, recs, FilterConfig(bandwidth=2.0))
    wide = filter_dataset(ds, recs, FilterConfig(bandwidth=5.0))
    key = lambda f: {(b.week_idx, b.cbg_county, b.poi_county) for b in f.blocks}
    assert key(narrow) <= key(wide)
    c_idx = ds.county_index["C"]
    assert narrow.drop_reasons[(c_idx, 0)] == "outside_bandwidth"
    assert (c_idx, 0) in wide.kept_county_weeks


def test_filter_drops_noncompliant_county():
    override = {("B", WEEK0): Tier.PURPLE}       # z < 0 but stayed purple
    ds = build_toy({"A": 1.0, "B": -1.0, "C": 2.0}, tier_override=override)
    recs = compute_assignments(ds, (TOY_REGIME,))
    f = filter_dataset(ds, recs, FilterConfig(bandwidth=5.0))
    b_idx = ds.county_index["B"]
    assert all(b.cbg_county != b_idx and b.poi_county != b_idx for b in f.blocks)
    assert f.drop_reasons[(b_idx, 0)] == "non_compliant"
    assert not f.blocks                           # every adjacency involves B


def test_filter_out_of_band_dropped():
    ds = build_toy({"A": 6.0, "B": -1.0, "C": 2.0})
    recs = compute_assignments(ds, (TOY_REGIME,))
    f = filter_dataset(ds, recs, FilterConfig(bandwidth=5.0))
    a_idx = ds.county_index["A"]
    assert f.drop_reasons[(a_idx, 0)] == "outside_bandwidth"


def test_filter_excluded_week():
    ds = build_toy({"A": 1.0, "B": -1.0, "C": 2.0}, n_weeks=2)
    recs = compute_assignments(ds, (TOY_REGIME,))
    f = filter_dataset(ds, recs, FilterConfig(
        bandwidth=5.0, excluded_weeks=frozenset([WEEK0])))
    assert all(b.week_idx != 0 for b in f.blocks)


def test_filter_within_scope():
    edges = [(WEEK0, "A-b1", "A-p1", 5), (WEEK0, "A-b1", "B-p1", 3)]
    ds = build_toy({"A": 1.0, "B": -1.0, "C": 2.0}, edges=edges)
    recs = compute_assignments(ds, (TOY_REGIME,))
    f = filter_dataset(ds, recs, FilterConfig(bandwidth=5.0), scope="within")
    assert all(b.cbg_county == b.poi_county for b in f.blocks)
    assert f.nonzero_triple_count() == 1
    assert {b.condition for b in f.blocks} == {"PP", "RR"}


def test_trigger_histogram_counts():
    ds = build_toy({"A": 1.0, "B": -1.0, "C": 2.0}, n_weeks=2)
    recs = compute_assignments(ds, (TOY_REGIME,))
    hist = trigger_histogram(recs, ds)
    # only A is large; 2 weeks, same metrics each week
    assert sum(hist["z1_argmax"].values()) == 2
    assert sum(hist["min_branch"].values()) == 2
    empty = trigger_histogram({}, ds)
    assert not empty["z1_argmax"]


def test_trigger_worse_previous_week():
    # previous week strictly worse: argmax must be a @w-1 input
    prev_w = WEEK0 - timedelta(days=7)
    s = compute_z(mk("A", WEEK0, 5.0, 4.0, 4.0), mk("A", prev_w, 9.0, 7.0, 7.0),
                  True, TOY_REGIME, TOY_REGIME)
    assert s.trigger.z1_argmax.endswith("@w-1")
    assert s.trigger.z2_argmax.endswith("@w-1")
