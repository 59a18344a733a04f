"""CSV report emission.

Four files per run, deterministic row order and formatting so re-running
report generation over the same raw artifacts is byte-identical:

* roundtrips.csv  - every completed round trip
* shares.csv      - per-request trip counts and share percentages
* resources.csv   - CPU/memory/storage/connection samples per node
* summary.csv     - headline key/value statistics
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .metrics import (
    MetricsReport,
    latency_stats,
    round_trip_share,
    share_cov,
    time_per_request,
)

RESOURCE_COLUMNS = [
    "t_ms",
    "node_id",
    "role",
    "pid",
    "cpu_ms",
    "rss_bytes",
    "appended_total",
    "footprint_bytes",
    "connections_open",
    "connections_accepted",
    "samples_total",
    "gap",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _writer(path: Path):
    handle = path.open("w", encoding="utf-8", newline="")
    return handle, csv.writer(handle, lineterminator="\n")


def write_roundtrips_csv(report: MetricsReport, path: Path) -> None:
    handle, writer = _writer(path)
    with handle:
        writer.writerow(["request_id", "sensor", "issue_ms", "response_ms", "latency_ms"])
        rows = [
            (t.issue_ms, t.request_id, t.response_ms, t.sensor, t.latency_ms)
            for rid in report.requests
            for t in report.trips_by_request.get(rid, [])
        ]
        for issue, rid, response, sensor, latency in sorted(rows):
            writer.writerow([rid, sensor, _fmt(issue), _fmt(response), _fmt(latency)])


def write_shares_csv(report: MetricsReport, path: Path) -> None:
    handle, writer = _writer(path)
    with handle:
        writer.writerow(["request_id", "trips", "share_pct"])
        if report.total_round_trips > 0:
            for rid, pct in round_trip_share(report):
                writer.writerow([rid, _fmt(report.counts[rid]), _fmt(pct)])


def write_resources_csv(report: MetricsReport, path: Path) -> None:
    handle, writer = _writer(path)
    with handle:
        writer.writerow(RESOURCE_COLUMNS)
        for row in report.resources:
            writer.writerow([_fmt(row.get(col)) for col in RESOURCE_COLUMNS])


def summary_rows(report: MetricsReport, against: MetricsReport | None = None) -> list[tuple[str, str]]:
    scenario = report.scenario
    stats = latency_stats(report.all_latencies())
    rows: list[tuple[str, str]] = [
        ("scenario", scenario.get("name", "")),
        ("mode", scenario.get("mode", "")),
        ("topology", scenario.get("topology", "")),
        ("status", report.status),
        ("requests", _fmt(len(report.requests))),
        ("duration_ms", _fmt(report.duration_ms)),
        ("total_round_trips", _fmt(report.total_round_trips)),
        ("sub_requests", _fmt(report.sub_request_count)),
    ]
    if report.total_round_trips > 0:
        starved = report.starved_requests()
        per_min = report.total_round_trips / (report.duration_ms / 60000.0)
        rows += [
            ("time_per_request_ms", _fmt(time_per_request(report))),
            ("round_trips_per_min", _fmt(per_min)),
            ("mean_latency_ms", _fmt(stats["mean_ms"])),
            ("median_latency_ms", _fmt(stats["median_ms"])),
            ("min_latency_ms", _fmt(stats["min_ms"])),
            ("max_latency_ms", _fmt(stats["max_ms"])),
            ("share_cov", _fmt(share_cov(report))),
            ("starved_requests", _fmt(len(starved))),
            ("starved_request_ids", ";".join(starved)),
        ]
    if scenario.get("name", "").startswith("realworld"):
        # Target band for live deployments of this class of engine.
        rows += [("reference_band_low_ms", "400"), ("reference_band_high_ms", "1500")]
    if against is not None:
        rows.append(("against_scenario", against.scenario.get("name", "")))
        rows.append(("against_mode", against.scenario.get("mode", "")))
        if report.total_round_trips > 0 and against.total_round_trips > 0:
            own = latency_stats(report.all_latencies())["mean_ms"]
            other = latency_stats(against.all_latencies())["mean_ms"]
            if other > 0:
                rows.append(("mean_latency_ratio", _fmt(own / other)))
    return rows


def write_summary_csv(
    report: MetricsReport, path: Path, against: MetricsReport | None = None
) -> None:
    handle, writer = _writer(path)
    with handle:
        writer.writerow(["key", "value"])
        for key, value in summary_rows(report, against):
            writer.writerow([key, value])


def write_report(
    report: MetricsReport, out_dir: str | Path, against: MetricsReport | None = None
) -> list[Path]:
    """Write report.json plus the four CSVs; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    report_json = out / "report.json"
    report_json.write_text(
        json.dumps(report.to_obj(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    paths.append(report_json)
    for name, fn in (
        ("roundtrips.csv", write_roundtrips_csv),
        ("shares.csv", write_shares_csv),
        ("resources.csv", write_resources_csv),
    ):
        path = out / name
        fn(report, path)
        paths.append(path)
    summary = out / "summary.csv"
    write_summary_csv(report, summary, against)
    paths.append(summary)
    return paths
