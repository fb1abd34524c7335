"""CSV/JSON input and output.

All writes are atomic (temp file + rename) and deterministic: floats are
serialized with shortest round-trip repr, rows in a fixed sort order. Every
pipeline run directory gets a manifest with the resolved config, input file
hashes and the tool version, so runs can be reproduced bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from datetime import date
from pathlib import Path

from . import __version__
from .assignment import AssignmentRecord
from .domain import (
    County,
    CountyWeekMetrics,
    MobilityDataset,
    Tier,
    ValidationError,
    build_dataset,
)

WORLD_FILES = ("counties.csv", "adjacency.csv", "metrics.csv", "tiers.csv",
               "cbgs.csv", "pois.csv", "edges.csv", "devices.csv")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    return str(v)


def write_text_atomic(path: str | Path, content: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv_atomic(path: str | Path, fieldnames: list[str],
                     rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})
    write_text_atomic(path, buf.getvalue())


def write_json_atomic(path: str | Path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=1, sort_keys=False) + "\n")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str | Path, subcommand: str, config: dict,
                   inputs: list[str | Path], outputs: list[str]) -> None:
    manifest = {
        "tool": "spillover",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "config_sha256": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        "outputs": sorted(outputs),
    }
    write_json_atomic(Path(out_dir) / "manifest.json", manifest)


# -- world round trip --------------------------------------------------------------


def write_world(out_dir: str | Path, dataset: MobilityDataset) -> list[str]:
    """Write the eight world CSVs; returns the file names written."""
    out = Path(out_dir)
    ds = dataset
    write_csv_atomic(out / "counties.csv", ["id", "name", "population"],
                     [{"id": c.id, "name": c.name, "population": c.population}
                      for c in ds.counties])
    write_csv_atomic(out / "adjacency.csv", ["id_a", "id_b"],
                     [{"id_a": ds.counties[a].id, "id_b": ds.counties[b].id}
                      for a, b in sorted(ds.adjacency)])
    write_csv_atomic(
        out / "metrics.csv", ["county", "week", "cr", "tp", "he"],
        [{"county": m.county, "week": m.week, "cr": m.case_rate,
          "tp": m.test_positivity, "he": m.health_equity}
         for (ci, wk), m in sorted(ds.metrics.items(),
                                   key=lambda kv: (kv[0][0], kv[0][1]))])
    write_csv_atomic(
        out / "tiers.csv", ["county", "week", "tier"],
        [{"county": ds.counties[ci].id, "week": ds.weeks[wi], "tier": t.value}
         for (ci, wi), t in sorted(ds.observed_tiers.items())])
    demo_cols = [f"demo_{i+1}" for i in range(ds.cbg_demographics.shape[1])]
    write_csv_atomic(
        out / "cbgs.csv", ["id", "county", "lat", "lon", *demo_cols],
        [{"id": ds.cbg_ids[i], "county": ds.counties[ds.cbg_county[i]].id,
          "lat": float(ds.cbg_lat[i]), "lon": float(ds.cbg_lon[i]),
          **{c: float(ds.cbg_demographics[i, k])
             for k, c in enumerate(demo_cols)}}
         for i in range(len(ds.cbg_ids))])
    write_csv_atomic(
        out / "pois.csv", ["id", "county", "lat", "lon", "group", "area_sqft"],
        [{"id": ds.poi_ids[j], "county": ds.counties[ds.poi_county[j]].id,
          "lat": float(ds.poi_lat[j]), "lon": float(ds.poi_lon[j]),
          "group": ds.groups[ds.poi_group[j]], "area_sqft": float(ds.poi_area[j])}
         for j in range(len(ds.poi_ids))])
    write_csv_atomic(
        out / "edges.csv", ["week", "cbg", "poi", "visits"],
        [{"week": ds.weeks[ds.edge_week[e]], "cbg": ds.cbg_ids[ds.edge_cbg[e]],
          "poi": ds.poi_ids[ds.edge_poi[e]], "visits": int(ds.edge_visits[e])}
         for e in range(len(ds.edge_week))])
    write_csv_atomic(
        out / "devices.csv", ["cbg", "week", "devices"],
        [{"cbg": ds.cbg_ids[i], "week": w, "devices": float(ds.devices[i, wi])}
         for i in range(len(ds.cbg_ids))
         for wi, w in enumerate(ds.weeks)])
    return list(WORLD_FILES)


def _read_rows(path: Path) -> list[dict]:
    if not path.exists():
        raise ValidationError(f"missing input file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_world(in_dir: str | Path) -> MobilityDataset:
    """Read the eight world CSVs back into a validated dataset."""
    d = Path(in_dir)
    counties = [County(id=r["id"], population=int(r["population"]),
                       name=r.get("name", ""))
                for r in _read_rows(d / "counties.csv")]
    adjacency = [(r["id_a"], r["id_b"]) for r in _read_rows(d / "adjacency.csv")]
    metrics = []
    for r in _read_rows(d / "metrics.csv"):
        he = r.get("he", "")
        metrics.append(CountyWeekMetrics(
            county=r["county"], week=date.fromisoformat(r["week"]),
            case_rate=float(r["cr"]), test_positivity=float(r["tp"]),
            health_equity=float(he) if he not in ("", None) else None))
    tiers = {}
    for r in _read_rows(d / "tiers.csv"):
        try:
            tier = Tier(r["tier"].strip().lower())
        except ValueError as exc:
            raise ValidationError(f"unknown tier {r['tier']!r}") from exc
        tiers[(r["county"], date.fromisoformat(r["week"]))] = tier
    cbg_rows = _read_rows(d / "cbgs.csv")
    demo_cols = [c for c in (cbg_rows[0].keys() if cbg_rows else [])
                 if c.startswith("demo_")]
    cbgs = [(r["id"], r["county"], float(r["lat"]), float(r["lon"]),
             tuple(float(r[c]) for c in demo_cols)) for r in cbg_rows]
    pois = [(r["id"], r["county"], float(r["lat"]), float(r["lon"]),
             r["group"], float(r["area_sqft"]))
            for r in _read_rows(d / "pois.csv")]
    devices = {(r["cbg"], date.fromisoformat(r["week"])): float(r["devices"])
               for r in _read_rows(d / "devices.csv")}
    weeks = sorted({w for _, w in devices})
    edges = [(date.fromisoformat(r["week"]), r["cbg"], r["poi"],
              int(r["visits"])) for r in _read_rows(d / "edges.csv")]
    return build_dataset(counties, adjacency, weeks, metrics, tiers, cbgs,
                         pois, devices, edges, demographic_names=demo_cols)


def write_assignments_csv(path: str | Path,
                          records: dict, dataset: MobilityDataset) -> None:
    rows = []
    for (ci, wi), rec in sorted(records.items()):
        rows.append({
            "county": rec.county, "week": rec.week, "z": rec.z,
            "z1": rec.z1, "z2": rec.z2, "tier": rec.tier.value,
            "compliant": rec.compliant,
            "trigger_z1": rec.trigger.z1_argmax,
            "trigger_z2": rec.trigger.z2_argmax,
            "trigger_branch": rec.trigger.min_branch,
        })
    write_csv_atomic(path, ["county", "week", "z", "z1", "z2", "tier",
                            "compliant", "trigger_z1", "trigger_z2",
                            "trigger_branch"], rows)


def read_assignments_csv(path: str | Path, dataset: MobilityDataset,
                         regimes=None) -> dict:
    """Assignment records keyed by (county_idx, week_idx); inverse of
    write_assignments_csv for weeks in the dataset window."""
    from .assignment import DEFAULT_REGIMES, TriggerPattern, regime_index_for_week
    regimes = DEFAULT_REGIMES if regimes is None else regimes
    out = {}
    for r in _read_rows(Path(path)):
        week = date.fromisoformat(r["week"])
        if week not in dataset.week_index:
            continue
        ci = dataset.county_index[r["county"]]
        out[(ci, dataset.week_index[week])] = AssignmentRecord(
            county=r["county"], week=week, z=float(r["z"]),
            z1=float(r["z1"]) if r["z1"] else None,
            z2=float(r["z2"]) if r["z2"] else None,
            tier=Tier(r["tier"]), compliant=r["compliant"] == "true",
            trigger=TriggerPattern(r["trigger_z1"], r["trigger_z2"] or None,
                                   r["trigger_branch"] or None),
            regime_idx=regime_index_for_week(week, regimes))
    return out
