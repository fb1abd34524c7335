"""Command-line pipeline: synth | assign | filter | fit | bootstrap |
effects | phi | efficacy | graph | partition | tradeoff | report.

Each subcommand is a thin shell over one library operation: it loads its
inputs, runs, writes outputs atomically along with a manifest (resolved
config, input hashes, tool version), and exits 0 on success, 1 on validation
errors, 2 on numerical failures, with a machine-readable error JSON on
stderr. Set SPILLOVER_LOG to control logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import date
from pathlib import Path

import numpy as np

from . import counterfactual as cf
from . import dataio, partition, synth
from .assignment import (
    DEFAULT_REGIMES,
    FilterConfig,
    compute_assignments,
    filter_dataset,
    trigger_histogram,
)
from .domain import MobilityDataset, ValidationError
from .estimator import (
    BootstrapError,
    BootstrapResult,
    FitConfig,
    FitDivergedError,
    bootstrap,
    effects_csv_rows,
    fit,
    spillover_effects,
)
from .partition import DegenerateEdgeError
from .zipmodel import params_to_jsonable, save_params

log = logging.getLogger(__name__)

VALIDATION_ERRORS = (ValidationError, ValueError, KeyError, FileNotFoundError,
                     json.JSONDecodeError)
NUMERICAL_ERRORS = (FitDivergedError, BootstrapError, DegenerateEdgeError,
                    FloatingPointError, ZeroDivisionError)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _world_regimes(world_dir: Path, config: dict):
    """Threshold regimes: explicit config wins, then the world's own ground
    truth (synthetic worlds), then the real program history."""
    if "regimes" in config:
        return synth.regimes_from_jsonable(config["regimes"])
    gt = world_dir / "ground-truth.json"
    if gt.exists():
        with open(gt, encoding="utf-8") as fh:
            return synth.regimes_from_jsonable(
                json.load(fh)["config"]["regimes"])
    return DEFAULT_REGIMES


def _load_world_and_assignments(args, config):
    world_dir = Path(args.world)
    ds = dataio.load_world(world_dir)
    regimes = _world_regimes(world_dir, config)
    if getattr(args, "assignments", None):
        records = dataio.read_assignments_csv(args.assignments, ds, regimes)
        inputs = list(world_files(world_dir)) + [args.assignments]
    else:
        records = compute_assignments(ds, regimes)
        inputs = list(world_files(world_dir))
    return ds, records, regimes, inputs


def world_files(world_dir: Path) -> list[Path]:
    return [world_dir / f for f in dataio.WORLD_FILES if (world_dir / f).exists()]


def _filter_config(args, config) -> FilterConfig:
    excluded = frozenset(date.fromisoformat(w)
                         for w in config.get("excluded_weeks", []))
    regime_change = config.get("regime_change")
    return FilterConfig(
        bandwidth=args.bandwidth,
        excluded_weeks=excluded,
        regime_change=date.fromisoformat(regime_change) if regime_change else None)


def _fit_config(args, config, include_z=True) -> FitConfig:
    return FitConfig(
        epochs=args.epochs, lr=args.lr, sample_frac=args.sample_frac,
        weighting=args.weighting, seed=args.seed, workers=args.workers,
        optimizer=config.get("optimizer", "adam"),
        redraw_per_epoch=not args.fixed_sample,
        include_z=include_z)


def _filtered(ds, records, args, config, scope="cross"):
    return filter_dataset(ds, records, _filter_config(args, config), scope=scope)


def _run_bootstrap(ds, records, args, config, scope):
    filtered = _filtered(ds, records, args, config, scope=scope)
    cfg = _fit_config(args, config, include_z=(scope == "cross"))
    return bootstrap(filtered, cfg, trials=args.trials,
                     resample_nonzeros=not getattr(args, "sampling_only", False))


def _load_bootstrap(path) -> BootstrapResult:
    with open(path, encoding="utf-8") as fh:
        return BootstrapResult.from_jsonable(json.load(fh))


def _paired_engines(ds: MobilityDataset, main: BootstrapResult,
                    within: BootstrapResult):
    """Per-trial counterfactual engines (trials paired by index) plus the
    mean-parameter engine used for graph construction."""
    device_means = ds.device_means()
    n = min(main.n_trials, within.n_trials)
    engines = [cf.engine_from_params(ds, main.trial_params(t), main.encoding,
                                     within.trial_params(t), within.encoding,
                                     device_means)
               for t in range(n)]
    mean_engine = cf.engine_from_params(ds, main.mean_params(), main.encoding,
                                        within.mean_params(), within.encoding,
                                        device_means)
    return engines, mean_engine


def _efficacy_rows(report: cf.EfficacyReport) -> list[dict]:
    return [{"scenario": r.scenario, "county": r.county, "week": r.week,
             "r_mean": r.mean, "r_lo": r.lo, "r_hi": r.hi,
             "n_trials": r.n_trials} for r in report.rows]


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args):
    config = _load_config(args.config)
    world_cfg = synth.config_from_jsonable(config.get("world", {}))
    if args.seed is not None:
        from dataclasses import replace
        world_cfg = replace(world_cfg, seed=args.seed)
    world = synth.generate_world(world_cfg)
    out = Path(args.out)
    outputs = dataio.write_world(out, world.dataset)
    dataio.write_json_atomic(out / "ground-truth.json",
                             synth.ground_truth_jsonable(world))
    dataio.write_manifest(out, "synth",
                          {"world": synth.config_to_jsonable(world.config)},
                          [], outputs + ["ground-truth.json"])
    log.info("wrote world with %d counties, %d visits to %s",
             world.dataset.n_counties, world.dataset.total_visits(), out)


def cmd_assign(args):
    config = _load_config(args.config)
    world_dir = Path(args.world)
    ds = dataio.load_world(world_dir)
    regimes = _world_regimes(world_dir, config)
    records = compute_assignments(ds, regimes)
    out = Path(args.out)
    dataio.write_assignments_csv(out / "assignments.csv", records, ds)
    hist = trigger_histogram(records, ds)
    dataio.write_json_atomic(out / "triggers.json",
                             {k: dict(sorted(v.items())) for k, v in hist.items()})
    dataio.write_manifest(out, "assign", {"regimes": [asdict(r) | {
        "effective_from": str(r.effective_from)} for r in regimes]},
        world_files(world_dir), ["assignments.csv", "triggers.json"])


def cmd_filter(args):
    config = _load_config(args.config)
    ds, records, _, inputs = _load_world_and_assignments(args, config)
    filtered = _filtered(ds, records, args, config, scope=args.scope)
    out = Path(args.out)
    dataio.write_json_atomic(out / "filter-report.json", filtered.summary())
    dataio.write_manifest(out, "filter",
                          {"bandwidth": args.bandwidth, "scope": args.scope,
                           **config},
                          inputs, ["filter-report.json"])


def cmd_fit(args):
    config = _load_config(args.config)
    ds, records, _, inputs = _load_world_and_assignments(args, config)
    filtered = _filtered(ds, records, args, config, scope=args.scope)
    cfg = _fit_config(args, config, include_z=(args.scope == "cross"))
    result = fit(filtered, cfg)
    out = Path(args.out)
    save_params(out / "model.json", result.params, result.encoding)
    dataio.write_json_atomic(out / "fit-report.json", result.trace_jsonable())
    dataio.write_manifest(out, "fit", {**asdict(cfg), "scope": args.scope,
                                       "bandwidth": args.bandwidth},
                          inputs, ["model.json", "fit-report.json"])


def cmd_bootstrap(args):
    config = _load_config(args.config)
    ds, records, _, inputs = _load_world_and_assignments(args, config)
    result = _run_bootstrap(ds, records, args, config, args.scope)
    out = Path(args.out)
    name = "bootstrap.json" if args.scope == "cross" else "bootstrap-within.json"
    dataio.write_json_atomic(out / name, result.to_jsonable())
    dataio.write_manifest(out, "bootstrap",
                          {**asdict(result.config), "trials": args.trials,
                           "scope": args.scope,
                           "sampling_only": args.sampling_only,
                           "bandwidth": args.bandwidth},
                          inputs, [name])


def cmd_effects(args):
    result = _load_bootstrap(args.bootstrap)
    rows = spillover_effects(result)
    out = Path(args.out)
    dataio.write_csv_atomic(out / "effects.csv",
                            ["group", "condition", "mean", "lo", "hi",
                             "significant", "bonferroni_significant",
                             "available"],
                            effects_csv_rows(rows))
    dataio.write_manifest(out, "effects", {}, [args.bootstrap], ["effects.csv"])


def cmd_phi(args):
    from .zipmodel import load_params
    ds = dataio.load_world(Path(args.world))
    params, encoding = load_params(args.model)
    table = cf.precompute_phi(params, encoding, ds)
    out = Path(args.out)
    dataio.write_json_atomic(out / "phi.json", table.to_jsonable())
    dataio.write_manifest(out, "phi", {}, world_files(Path(args.world))
                          + [args.model], ["phi.json"])


def cmd_efficacy(args):
    ds = dataio.load_world(Path(args.world))
    main = _load_bootstrap(args.bootstrap)
    within = _load_bootstrap(args.within_bootstrap)
    engines, _ = _paired_engines(ds, main, within)
    part = None
    if args.scenario == "macro":
        with open(args.partition, encoding="utf-8") as fh:
            obj = json.load(fh)
        part = np.array([obj["assignment"][c.id] for c in ds.counties])
    report = cf.efficacy_report(engines, args.scenario, partition=part)
    out = Path(args.out)
    dataio.write_csv_atomic(out / "efficacy.csv",
                            ["scenario", "county", "week", "r_mean", "r_lo",
                             "r_hi", "n_trials"], _efficacy_rows(report))
    dataio.write_json_atomic(out / "subset-averages.json",
                             {"scenario": report.scenario,
                              "subsets": report.subset_averages,
                              "excluded": report.excluded_counties})
    inputs = world_files(Path(args.world)) + [args.bootstrap, args.within_bootstrap]
    if args.partition:
        inputs.append(args.partition)
    dataio.write_manifest(out, "efficacy", {"scenario": args.scenario},
                          inputs, ["efficacy.csv", "subset-averages.json"])


def cmd_graph(args):
    ds = dataio.load_world(Path(args.world))
    main = _load_bootstrap(args.bootstrap)
    within = _load_bootstrap(args.within_bootstrap)
    _, mean_engine = _paired_engines(ds, main, within)
    graph = partition.build_county_graph(mean_engine,
                                         allow_degenerate=args.allow_degenerate)
    out = Path(args.out)
    dataio.write_csv_atomic(out / "graph.csv",
                            ["county_a", "county_b", "weight", "raw_weight"],
                            graph.to_csv_rows())
    dataio.write_json_atomic(out / "graph-meta.json",
                             {"clamped_edges": graph.clamped_edges,
                              "degenerate_edges": graph.degenerate_edges})
    dataio.write_manifest(out, "graph", {"allow_degenerate": args.allow_degenerate},
                          world_files(Path(args.world))
                          + [args.bootstrap, args.within_bootstrap],
                          ["graph.csv", "graph-meta.json"])


def _graph_from_inputs(args):
    ds = dataio.load_world(Path(args.world))
    main = _load_bootstrap(args.bootstrap)
    within = _load_bootstrap(args.within_bootstrap)
    engines, mean_engine = _paired_engines(ds, main, within)
    graph = partition.build_county_graph(
        mean_engine, allow_degenerate=getattr(args, "allow_degenerate", False))
    return ds, engines, mean_engine, graph


def cmd_partition(args):
    ds, engines, mean_engine, graph = _graph_from_inputs(args)
    part = partition.min_kcut(graph, args.k, epsilon=args.epsilon,
                              seed=args.seed)
    evaluated = partition.evaluate_partition(part, mean_engine, graph)
    out = Path(args.out)
    dataio.write_json_atomic(out / "partition.json", evaluated.to_jsonable())
    dataio.write_manifest(out, "partition",
                          {"k": args.k, "epsilon": args.epsilon,
                           "seed": args.seed},
                          world_files(Path(args.world))
                          + [args.bootstrap, args.within_bootstrap],
                          ["partition.json"])


def cmd_tradeoff(args):
    ds, engines, mean_engine, graph = _graph_from_inputs(args)
    ks = list(range(args.k_min, args.k_max + 1))
    rows = partition.tradeoff_curve(graph, engines, ks, epsilon=args.epsilon,
                                    seed=args.seed)
    out = Path(args.out)
    dataio.write_csv_atomic(out / "tradeoff.csv",
                            ["k", "avg_part_size", "cut_weight", "avg_rm_mean",
                             "avg_rm_lo", "avg_rm_hi", "max_part_size"], rows)
    dataio.write_manifest(out, "tradeoff",
                          {"k_min": args.k_min, "k_max": args.k_max,
                           "epsilon": args.epsilon, "seed": args.seed},
                          world_files(Path(args.world))
                          + [args.bootstrap, args.within_bootstrap],
                          ["tradeoff.csv"])


def _binned_scatter(filtered, bin_width: float):
    """Dense mean visits per target-score bin among purple-source blocks,
    plus one least-squares line per side of zero (exact on block sums)."""
    blocks = [b for b in filtered.blocks if b.ti == 0]
    ds = filtered.dataset
    agg = []
    for b in blocks:
        n_cells = int(np.prod(filtered.block_shape(b)))
        sl = filtered.block_edges(b)
        agg.append((b.zj, n_cells, float(ds.edge_visits[sl].sum())))
    h = filtered.config.bandwidth
    edges = np.arange(-h, h + bin_width / 2, bin_width)
    bins = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        n = sum(a[1] for a in agg if lo <= a[0] < hi)
        s = sum(a[2] for a in agg if lo <= a[0] < hi)
        if n:
            bins.append({"bin_lo": float(lo), "bin_hi": float(hi),
                         "bin_center": float((lo + hi) / 2),
                         "mean_visits": s / n, "dense_points": n})
    fits = []
    for side, pred in (("left", lambda z: z < 0), ("right", lambda z: z >= 0)):
        sub = [a for a in agg if pred(a[0])]
        n_tot = sum(a[1] for a in sub)
        if n_tot == 0:
            continue
        zbar = sum(a[1] * a[0] for a in sub) / n_tot
        ybar = sum(a[2] for a in sub) / n_tot
        sxx = sum(a[1] * (a[0] - zbar) ** 2 for a in sub)
        sxy = sum((a[0] - zbar) * (a[2] - a[1] * ybar) for a in sub)
        slope = sxy / sxx if sxx > 0 else 0.0
        fits.append({"side": side, "slope": slope,
                     "intercept": ybar - slope * zbar, "dense_points": n_tot})
    return bins, fits


def cmd_report(args):
    config = _load_config(args.config)
    ds, records, _, inputs = _load_world_and_assignments(args, config)
    filtered = _filtered(ds, records, args, config)
    out = Path(args.out)
    outputs = []

    bins, fits = _binned_scatter(filtered, args.bin_width)
    dataio.write_csv_atomic(out / "threshold_bins.csv",
                            ["bin_lo", "bin_hi", "bin_center", "mean_visits",
                             "dense_points"], bins)
    dataio.write_csv_atomic(out / "threshold_fits.csv",
                            ["side", "slope", "intercept", "dense_points"], fits)
    outputs += ["threshold_bins.csv", "threshold_fits.csv"]

    if args.bootstrap and args.within_bootstrap:
        main = _load_bootstrap(args.bootstrap)
        within = _load_bootstrap(args.within_bootstrap)
        rows = spillover_effects(main)
        dataio.write_csv_atomic(out / "effects.csv",
                                ["group", "condition", "mean", "lo", "hi",
                                 "significant", "bonferroni_significant",
                                 "available"], effects_csv_rows(rows))
        engines, mean_engine = _paired_engines(ds, main, within)
        graph = partition.build_county_graph(mean_engine, allow_degenerate=True)
        ks = sorted({k for k in (1, 2, ds.n_counties // 8, ds.n_counties // 4,
                                 ds.n_counties // 2) if 1 <= k <= ds.n_counties})
        dataio.write_csv_atomic(out / "tradeoff.csv",
                                ["k", "avg_part_size", "cut_weight",
                                 "avg_rm_mean", "avg_rm_lo", "avg_rm_hi",
                                 "max_part_size"],
                                partition.tradeoff_curve(graph, engines, ks,
                                                         seed=args.seed))
        weekly = cf.efficacy_report(engines, "realistic")
        dataio.write_csv_atomic(out / "weekly_efficacy.csv",
                                ["scenario", "county", "week", "r_mean",
                                 "r_lo", "r_hi", "n_trials"],
                                _efficacy_rows(weekly))
        outputs += ["effects.csv", "tradeoff.csv", "weekly_efficacy.csv"]
        inputs += [args.bootstrap, args.within_bootstrap]
    dataio.write_manifest(out, "report",
                          {"bandwidth": args.bandwidth,
                           "bin_width": args.bin_width, "seed": args.seed},
                          inputs, outputs)


# -- argument plumbing --------------------------------------------------------------


def _add_common(p, world=True, out=True):
    p.add_argument("--config", help="JSON config file")
    if world:
        p.add_argument("--world", required=True, help="world CSV directory")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def _add_filter_args(p):
    p.add_argument("--assignments", help="assignments.csv (recomputed if omitted)")
    p.add_argument("--bandwidth", type=float, default=5.0)
    p.add_argument("--scope", choices=["cross", "within"], default="cross")


def _add_fit_args(p):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--sample-frac", type=float, default=0.02, dest="sample_frac")
    p.add_argument("--weighting", choices=["uniform", "inv-distance"],
                   default="inv-distance")
    p.add_argument("--fixed-sample", action="store_true",
                   help="one negative sample per fit instead of per epoch")


def _add_boot_inputs(p):
    p.add_argument("--bootstrap", required=True, help="bootstrap.json (cross)")
    p.add_argument("--within-bootstrap", required=True,
                   dest="within_bootstrap", help="bootstrap-within.json")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="spillover",
        description="policy spillover estimation on mobility networks")
    ap.add_argument("--version", action="version", version=f"%(prog)s "
                    f"{__import__('spillover').__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    _add_common(p, world=False)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("assign", help="compute assignment scores and tiers")
    _add_common(p)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("filter", help="apply the analysis-sample filter")
    _add_common(p)
    _add_filter_args(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("fit", help="fit the visit model once")
    _add_common(p)
    _add_filter_args(p)
    _add_fit_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bootstrap", help="bootstrap the fit")
    _add_common(p)
    _add_filter_args(p)
    _add_fit_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--sampling-only", action="store_true", dest="sampling_only",
                   help="fresh negatives only; do not resample non-zeros")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("effects", help="tier-pair effect table from a bootstrap")
    _add_common(p, world=False)
    p.add_argument("--bootstrap", required=True)
    p.set_defaults(func=cmd_effects)

    p = sub.add_parser("phi", help="precompute pair weights from a model")
    _add_common(p)
    p.add_argument("--model", required=True, help="model.json")
    p.set_defaults(func=cmd_phi)

    p = sub.add_parser("efficacy", help="counterfactual efficacy report")
    _add_common(p)
    _add_boot_inputs(p)
    p.add_argument("--scenario", choices=["lone", "realistic", "macro"],
                   default="lone")
    p.add_argument("--partition", help="partition.json (macro scenario)")
    p.set_defaults(func=cmd_efficacy)

    p = sub.add_parser("graph", help="build the spillover county graph")
    _add_common(p)
    _add_boot_inputs(p)
    p.add_argument("--allow-degenerate", action="store_true",
                   dest="allow_degenerate")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("partition", help="balanced minimum k-cut")
    _add_common(p)
    _add_boot_inputs(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-degenerate", action="store_true",
                   dest="allow_degenerate")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("tradeoff", help="efficacy vs flexibility curve")
    _add_common(p)
    _add_boot_inputs(p)
    p.add_argument("--k-min", type=int, default=1, dest="k_min")
    p.add_argument("--k-max", type=int, default=8, dest="k_max")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-degenerate", action="store_true",
                   dest="allow_degenerate")
    p.set_defaults(func=cmd_tradeoff)

    p = sub.add_parser("report", help="plot-data CSVs for the figures")
    _add_common(p)
    p.add_argument("--assignments")
    p.add_argument("--bandwidth", type=float, default=5.0)
    p.add_argument("--bin-width", type=float, default=0.5, dest="bin_width")
    p.add_argument("--bootstrap")
    p.add_argument("--within-bootstrap", dest="within_bootstrap")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPILLOVER_LOG", "WARNING"))
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "out", None):
            Path(args.out).mkdir(parents=True, exist_ok=True)
        args.func(args)
    except NUMERICAL_ERRORS as exc:
        json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}},
                  sys.stderr)
        sys.stderr.write("\n")
        return 2
    except VALIDATION_ERRORS as exc:
        json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}},
                  sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
