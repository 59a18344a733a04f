"""Benchmark statistics derived from the raw event log.

Two headline statistics drive every comparison:

* time per request: experiment duration divided by the total number of
  completed round trips;
* round-trip share: one request's completed round trips as a percentage of
  all completed round trips, share_i = 100 * S_i / sum(S).

Both are recomputable from the raw event log alone, which is what the
recount oracle in the test suite does.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from ..core import invalid_query


@dataclass(frozen=True)
class RoundTrip:
    request_id: str
    sensor: str
    issue_ms: int
    response_ms: int
    latency_ms: int

    def __post_init__(self):
        if self.latency_ms < 0 or self.response_ms < self.issue_ms:
            raise invalid_query(
                f"round trip for {self.request_id}: response precedes issue"
            )


@dataclass
class MetricsReport:
    scenario: dict
    status: str
    duration_ms: int
    requests: list[str]
    trips_by_request: dict[str, list[RoundTrip]]
    sub_request_count: int
    resources: list[dict] = field(default_factory=list)
    connections: dict = field(default_factory=dict)
    storage: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def total_round_trips(self) -> int:
        return sum(len(v) for v in self.trips_by_request.values())

    @property
    def counts(self) -> dict[str, int]:
        return {rid: len(self.trips_by_request.get(rid, [])) for rid in self.requests}

    def all_latencies(self) -> list[int]:
        return [
            trip.latency_ms
            for rid in self.requests
            for trip in self.trips_by_request.get(rid, [])
        ]

    def starved_requests(self) -> list[str]:
        return [rid for rid, count in self.counts.items() if count == 0]

    def to_obj(self) -> dict:
        latencies = self.all_latencies()
        obj = {
            "scenario": self.scenario,
            "status": self.status,
            "duration_ms": self.duration_ms,
            "requests": list(self.requests),
            "total_round_trips": self.total_round_trips,
            "sub_request_count": self.sub_request_count,
            "trips": {
                rid: [
                    {
                        "sensor": t.sensor,
                        "issue_ms": t.issue_ms,
                        "response_ms": t.response_ms,
                        "latency_ms": t.latency_ms,
                    }
                    for t in self.trips_by_request.get(rid, [])
                ]
                for rid in self.requests
            },
            "latency": latency_stats(latencies),
            "resources": self.resources,
            "connections": self.connections,
            "storage": self.storage,
            "metadata": self.metadata,
        }
        if self.total_round_trips > 0:
            obj["time_per_request_ms"] = time_per_request(self)
            obj["shares"] = [
                {"request_id": rid, "trips": self.counts[rid], "share_pct": pct}
                for rid, pct in round_trip_share(self)
            ]
            obj["share_cov"] = share_cov(self)
            obj["starved_requests"] = self.starved_requests()
        return obj


def latency_stats(latencies: list[int]) -> dict:
    if not latencies:
        return {"count": 0}
    return {
        "count": len(latencies),
        "mean_ms": statistics.fmean(latencies),
        "median_ms": statistics.median(latencies),
        "min_ms": min(latencies),
        "max_ms": max(latencies),
    }


def time_per_request(report: MetricsReport) -> float:
    """Experiment duration split evenly across completed round trips (ms)."""
    total = report.total_round_trips
    if total <= 0:
        raise invalid_query("time_per_request needs at least one completed round trip")
    return report.duration_ms / total


def round_trip_share(report: MetricsReport) -> list[tuple[str, float]]:
    """share_i = 100 * S_i / sum(S), in request-id order."""
    total = report.total_round_trips
    if total <= 0:
        raise invalid_query("round_trip_share needs at least one completed round trip")
    return [(rid, 100.0 * count / total) for rid, count in sorted(report.counts.items())]


def share_cov(report: MetricsReport) -> float:
    """Coefficient of variation of the shares (population stdev / mean).

    The fairness comparison statistic: equal shares give 0.
    """
    shares = [pct for _, pct in round_trip_share(report)]
    mean = statistics.fmean(shares)
    if mean == 0:
        raise invalid_query("share_cov undefined for zero mean share")
    return statistics.pstdev(shares) / mean


def build_report(
    scenario_obj: dict,
    meta: dict,
    events: list[dict],
    resources: list[dict],
) -> MetricsReport:
    """Assemble the report from raw run artifacts.

    ``events`` is the polled event log of the workload-driving node;
    ``meta`` carries the request universe (so a request with zero completed
    trips still appears, which starvation detection depends on).
    """
    requests = sorted(meta.get("requests", {}))
    trips: dict[str, list[RoundTrip]] = {rid: [] for rid in requests}
    sub_requests = 0
    started_ms = None
    finished_ms = None
    for event in events:
        etype = event.get("type")
        if etype == "round_trip":
            rid = event["request_id"]
            trips.setdefault(rid, []).append(
                RoundTrip(
                    request_id=rid,
                    sensor=event.get("sensor", ""),
                    issue_ms=int(event["issue_ms"]),
                    response_ms=int(event["response_ms"]),
                    latency_ms=int(event["latency_ms"]),
                )
            )
        elif etype == "sub_request":
            sub_requests += 1
        elif etype == "workload_started":
            started_ms = event["t_ms"]
        elif etype == "workload_finished":
            finished_ms = event["t_ms"]
    if started_ms is not None and finished_ms is not None:
        duration_ms = finished_ms - started_ms
    else:
        duration_ms = int(meta.get("observed_duration_ms", 0))
    all_requests = sorted(trips)
    return MetricsReport(
        scenario=dict(scenario_obj),
        status=meta.get("status", "ok"),
        duration_ms=duration_ms,
        requests=all_requests,
        trips_by_request=trips,
        sub_request_count=sub_requests,
        resources=sorted(
            resources, key=lambda r: (r.get("t_ms", 0), r.get("node_id", ""))
        ),
        connections=meta.get("connections", {}),
        storage=meta.get("storage", {}),
        metadata={
            k: meta[k]
            for k in ("seed", "requests", "notes", "nodes", "workload_id", "status")
            if k in meta
        },
    )
