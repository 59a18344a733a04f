"""One node process: engine + storage + sharing behind an HTTP listener.

A node can play three roles, alone or combined:

* sensor host: loads plugin descriptors and virtual-sensor configs from
  watched directories, samples, stores, answers queries, serves streams;
* registry: keeps peer registrations with ttl liveness (``serve_registry``);
* workload driver: given a request list (POST /v1/requests) it subscribes to
  peer sensors in restful or push mode and records every completed round
  trip in its event log, which is what the benchmark harness collects.
"""
from __future__ import annotations

import json
import logging
import threading
import uuid
from pathlib import Path

from .api import wire
from .api.client import PeerSession, push_batch
from .api.registry import NodeRegistration, RegistryState
from .api.server import NodeHTTPServer
from .config import NodeConfig
from .core import (
    Clock,
    EngineError,
    ErrorKind,
    StreamElement,
    SYSTEM_CLOCK,
    conflict,
    invalid_query,
    not_found,
)
from .engine import Engine, VSENSOR_SUFFIX, VirtualSensorConfig
from .plugins import scan_plugins
from .sharing import DeliveryMode, SubscriptionManager
from .storage import HistoryStore

log = logging.getLogger(__name__)

EVENT_LOG_CAPACITY = 500_000
STREAM_HEARTBEAT_MS = 30_000

# Workload requests are started this many ms apart, in request order. This
# spreads subscription setup and delivery phases across the sampling
# interval instead of synchronizing every request on the same tick.
REQUEST_STAGGER_MS = 25
SUBSCRIBE_ATTEMPTS = 4
SUBSCRIBE_RETRY_DELAY_S = 0.3


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise invalid_query(f"address must be host:port, got {address!r}")
    try:
        return host, int(port)
    except ValueError:
        raise invalid_query(f"address port must be an integer, got {address!r}")


class EventLog:
    """Append-only in-memory event sequence, polled over HTTP by seq cursor."""

    def __init__(self, clock: Clock, capacity: int = EVENT_LOG_CAPACITY):
        self._clock = clock
        self._events: list[dict] = []
        self._lock = threading.Lock()
        self._seq = 0
        self._capacity = capacity
        self.discarded = 0

    def emit(self, event_type: str, **fields) -> dict:
        with self._lock:
            self._seq += 1
            event = {"seq": self._seq, "t_ms": self._clock.now_ms(), "type": event_type}
            event.update(fields)
            self._events.append(event)
            if len(self._events) > self._capacity:
                overflow = len(self._events) - self._capacity
                del self._events[:overflow]
                self.discarded += overflow
            return event

    def after(self, seq: int, limit: int) -> tuple[list[dict], int]:
        """Events with seq > ``seq``, oldest first, at most ``limit``."""
        with self._lock:
            if not self._events:
                return [], self._seq
            base = self._events[0]["seq"]
            start = max(0, seq - base + 1)
            return list(self._events[start : start + limit]), self._seq

    def size(self) -> int:
        with self._lock:
            return len(self._events)


class _RequestRunner:
    """Per-request state of a running workload."""

    def __init__(self, request_id: str, node_id: str, sensor: str):
        self.request_id = request_id
        self.node_id = node_id
        self.sensor = sensor
        self.address: str | None = None
        self.sub_id: str | None = None
        self.trips = 0
        self.errors = 0
        self.connects = 0


class Workload:
    """One benchmark workload: a batch of requests driven until a deadline."""

    def __init__(self, workload_id: str, mode: str, interval_ms: int, duration_s: int):
        self.id = workload_id
        self.mode = mode
        self.interval_ms = interval_ms
        self.duration_s = duration_s
        self.requests: dict[str, _RequestRunner] = {}
        self.sub_index: dict[str, _RequestRunner] = {}
        self.push_seen: dict[str, int] = {}
        self.duplicates_rejected = 0
        self.started_ms = 0
        self.deadline_ms = 0
        self.finished = False
        self.stop = threading.Event()
        self.lock = threading.Lock()
        self.threads: list[threading.Thread] = []

    def summary_obj(self) -> dict:
        with self.lock:
            per_request = {
                r.request_id: {
                    "node_id": r.node_id,
                    "sensor": r.sensor,
                    "trips": r.trips,
                    "errors": r.errors,
                    "connects": r.connects,
                    "sub_id": r.sub_id,
                }
                for r in self.requests.values()
            }
            return {
                "id": self.id,
                "mode": self.mode,
                "interval_ms": self.interval_ms,
                "duration_s": self.duration_s,
                "started_ms": self.started_ms,
                "deadline_ms": self.deadline_ms,
                "finished": self.finished,
                "total_trips": sum(r.trips for r in self.requests.values()),
                "duplicates_rejected": self.duplicates_rejected,
                "per_request": per_request,
            }


class Node:
    def __init__(
        self,
        cfg: NodeConfig,
        clock: Clock | None = None,
        serve_registry: bool = False,
    ):
        self.cfg = cfg
        self.clock = clock or SYSTEM_CLOCK
        self.node_id = cfg.node_id
        self.events = EventLog(self.clock)
        self.store = HistoryStore(Path(cfg.data_dir) / "store")
        self.engine = Engine(self.store, self.clock)
        self.subs = SubscriptionManager(
            sensor_exists=lambda name: name in self.engine.sensor_names(),
            push_transport=self._push_transport,
            clock=self.clock,
            buffer_capacity=cfg.buffer_capacity,
        )
        self.engine.add_append_listener(self.subs.on_append)
        self.registry_state = RegistryState(self.clock) if serve_registry else None
        self.server = NodeHTTPServer(
            cfg.host,
            cfg.port,
            app=self,
            admission_workers=cfg.admission_workers,
            admission_delay_ms=cfg.admission_delay_ms,
            admission_timeout_ms=cfg.admission_timeout_ms,
        )
        self._workload: Workload | None = None
        self._workload_lock = threading.Lock()
        self._registry_stop = threading.Event()
        self._registry_thread: threading.Thread | None = None
        self._started_ms: int | None = None
        self._stopped = False
        self.scan_problems: list[dict] = []

    # -- lifecycle ---------------------------------------------------------

    @property
    def address(self) -> str:
        return f"{self.cfg.host}:{self.server.port}"

    def start(self) -> None:
        self._started_ms = self.clock.now_ms()
        if self.cfg.plugins_dir:
            self.rescan_plugins()
        if self.cfg.vsensors_dir:
            self._load_vsensors()
        self.server.start()
        if self.cfg.registry:
            self._registry_thread = threading.Thread(
                target=self._registration_loop, name="registry-refresh", daemon=True
            )
            self._registry_thread.start()
        self.events.emit("node_started", node_id=self.node_id, address=self.address)
        log.info("node %s listening on %s", self.node_id, self.address)

    def announce(self) -> str:
        """Machine-readable startup line (parents parse this for the port)."""
        return json.dumps(
            {
                "event": "listening",
                "node_id": self.node_id,
                "host": self.cfg.host,
                "port": self.server.port,
            },
            sort_keys=True,
        )

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        workload = self._workload
        if workload is not None and not workload.finished:
            workload.stop.set()
            for thread in workload.threads:
                thread.join(timeout=5.0)
        self._registry_stop.set()
        if self._registry_thread is not None:
            self._registry_thread.join(timeout=5.0)
        self.subs.close()
        self.engine.close()
        self.server.stop(drain_s=5.0)
        self.store.close()
        log.info("node %s stopped", self.node_id)

    def rescan_plugins(self) -> dict:
        result = scan_plugins(self.cfg.plugins_dir)
        self.engine.register_plugins(result.descriptors)
        self.scan_problems = [
            {"path": p.path, "error": p.error} for p in result.problems
        ]
        for problem in self.scan_problems:
            log.warning("plugin descriptor rejected: %(path)s: %(error)s", problem)
        return {
            "plugins": sorted(d.plugin_id for d in result.descriptors),
            "problems": self.scan_problems,
        }

    def _load_vsensors(self) -> None:
        root = Path(self.cfg.vsensors_dir)
        if not root.is_dir():
            log.warning("virtual-sensor directory %s does not exist", root)
            return
        for path in sorted(root.glob(f"*{VSENSOR_SUFFIX}")):
            try:
                obj = json.loads(path.read_text(encoding="utf-8"))
                config = VirtualSensorConfig.from_obj(obj)
                self.engine.instantiate(config)
            except (OSError, json.JSONDecodeError, EngineError) as exc:
                detail = exc.detail if isinstance(exc, EngineError) else str(exc)
                log.warning("virtual sensor %s rejected: %s", path, detail)
                self.events.emit("vsensor_rejected", path=str(path), error=detail)

    # -- registration with the registry service -----------------------------

    def _registration(self) -> NodeRegistration:
        sensors = tuple(
            {
                "name": state.config.name,
                "output": [f.to_obj() for f in state.output],
            }
            for state in self.engine.states()
        )
        return NodeRegistration(
            node_id=self.node_id,
            address=self.address,
            sensors=sensors,
            group_tag=self.cfg.group_tag,
            ttl_s=self.cfg.ttl_s,
        )

    def _registration_loop(self) -> None:
        host, port = split_address(self.cfg.registry)
        session = PeerSession(host, port, timeout_s=10.0)
        failures = 0
        while True:
            try:
                session.register_node(self._registration().to_obj())
                failures = 0
            except EngineError as exc:
                failures += 1
                if failures <= 3 or failures % 10 == 0:
                    log.warning("registry refresh failed: %s", exc.detail)
            if self._registry_stop.wait(self.cfg.refresh_s):
                break
        try:
            session.deregister_node(self.node_id)
        except EngineError:
            pass
        session.close()

    # -- push transport (client side of push subscriptions) -----------------

    def _push_transport(self, peer: str, sub_id: str, elements: list[StreamElement]) -> None:
        host, port = split_address(peer)
        push_batch(host, port, sub_id, elements)

    # -- HTTP application API ------------------------------------------------

    def api_health(self) -> dict:
        return {
            "status": "ok",
            "node_id": self.node_id,
            "now_ms": self.clock.now_ms(),
            "roles": {
                "registry": self.registry_state is not None,
                "sensors": bool(self.engine.sensor_names()),
            },
        }

    def api_metrics(self) -> dict:
        workload = self._workload
        stats = self.store.stats()
        return {
            "node_id": self.node_id,
            "now_ms": self.clock.now_ms(),
            "uptime_ms": (
                self.clock.now_ms() - self._started_ms if self._started_ms else 0
            ),
            "sensors": [
                {
                    "name": s.config.name,
                    "plugin_id": s.config.plugin_id,
                    "lifecycle": s.lifecycle.value,
                    "sampling_interval_ms": s.config.sampling_interval_ms,
                    "samples_taken": s.samples_taken,
                    "processor_drops": s.processor_drops,
                    "plugin_failures": s.plugin_failures,
                    "latest_ts": s.last_element.timestamp if s.last_element else None,
                }
                for s in self.engine.states()
            ],
            "storage": {
                "footprint_bytes": self.store.footprint(),
                "appended_total": sum(t.appended_total for t in stats),
                "retained_total": sum(t.retained for t in stats),
                "tables": [
                    {
                        "sensor": t.sensor,
                        "history_size": t.history_size,
                        "retained": t.retained,
                        "appended_total": t.appended_total,
                        "evicted_total": t.evicted_total,
                        "footprint_bytes": t.footprint_bytes,
                    }
                    for t in stats
                ],
            },
            "subscriptions": [s.to_obj() for s in self.subs.list()],
            "connections": self.server.connection_stats(),
            "workload": workload.summary_obj() if workload else None,
            "events": {"count": self.events.size(), "discarded": self.events.discarded},
        }

    def api_sensors(self) -> list[dict]:
        return [
            {
                "name": s.config.name,
                "plugin_id": s.config.plugin_id,
                "sampling_interval_ms": s.config.sampling_interval_ms,
                "history_size": s.config.history_size,
                "lifecycle": s.lifecycle.value,
                "output": [f.to_obj() for f in s.output],
            }
            for s in self.engine.states()
        ]

    def api_sensor_detail(self, name: str) -> dict:
        s = self.engine.state(name)
        return {
            "name": s.config.name,
            "plugin_id": s.config.plugin_id,
            "sampling_interval_ms": s.config.sampling_interval_ms,
            "history_size": s.config.history_size,
            "lifecycle": s.lifecycle.value,
            "output": [f.to_obj() for f in s.output],
            "samples_taken": s.samples_taken,
            "processor_drops": s.processor_drops,
            "plugin_failures": s.plugin_failures,
            "plugin_state": s.plugin_state,
            "last_error": s.last_error,
            "last_element": s.last_element.to_obj() if s.last_element else None,
        }

    def api_latest(self, name: str) -> StreamElement | None:
        return self.store.latest(name)

    def api_range(self, name: str, from_ts: int, to_ts: int) -> list[StreamElement]:
        return self.store.range(name, from_ts, to_ts)

    def api_subscriptions(self) -> list[dict]:
        return [s.to_obj() for s in self.subs.list()]

    def api_subscription_detail(self, sub_id: str) -> dict:
        return self.subs.get(sub_id).to_obj()

    def api_create_subscription(self, payload: dict) -> dict:
        if not isinstance(payload, dict):
            raise invalid_query("subscription body must be a JSON object")
        sensor = payload.get("sensor")
        if not sensor:
            raise invalid_query("subscription needs a 'sensor'")
        mode_name = payload.get("mode")
        try:
            mode = DeliveryMode(mode_name)
        except ValueError:
            raise invalid_query(f"mode must be 'restful' or 'push', got {mode_name!r}")
        interval = payload.get("interval_ms", 1000)
        if not isinstance(interval, int):
            raise invalid_query("interval_ms must be an integer")
        if mode is DeliveryMode.PUSH:
            callback = payload.get("callback")
            if not callback:
                raise invalid_query("push subscriptions need a 'callback' (host:port)")
            split_address(callback)  # validate shape
            peer = callback
        else:
            peer = payload.get("peer") or f"peer-{uuid.uuid4().hex[:8]}"
        sub = self.subs.subscribe(
            peer=peer, sensor=sensor, mode=mode, delivery_interval_ms=interval
        )
        self.events.emit(
            "subscription_created", sub_id=sub.id, sensor=sensor, mode=mode.value, peer=peer
        )
        return sub.to_obj()

    def api_cancel_subscription(self, sub_id: str) -> None:
        self.subs.cancel(sub_id)
        self.events.emit("subscription_cancelled", sub_id=sub_id)

    def api_stream_pull(self, sub_id: str, timeout_ms: int) -> tuple[StreamElement | None, int]:
        timeout_ms = max(1, min(timeout_ms, STREAM_HEARTBEAT_MS))
        return self.subs.pull(sub_id, timeout_ms)

    def api_push_inbound(self, sub_id: str, payload) -> dict:
        elements = wire.elements_from_obj(payload)
        workload = self._workload
        if workload is None or sub_id not in workload.sub_index:
            raise not_found(f"no push target {sub_id!r} here")
        runner = workload.sub_index[sub_id]
        now = self.clock.now_ms()
        with workload.lock:
            last = workload.push_seen.get(sub_id, -1)
            fresh = [el for el in elements if el.timestamp > last]
            workload.duplicates_rejected += len(elements) - len(fresh)
            if fresh:
                workload.push_seen[sub_id] = fresh[-1].timestamp
        for el in fresh:
            self._record_round_trip(workload, runner, issue_ms=el.timestamp, response_ms=now, element=el)
        return {
            "accepted": len(fresh),
            "last_ts": workload.push_seen.get(sub_id, -1),
        }

    def api_registry_register(self, payload: dict) -> dict:
        if self.registry_state is None:
            raise not_found("this node does not serve the registry")
        entry = self.registry_state.register(NodeRegistration.from_obj(payload))
        return entry.to_obj()

    def api_registry_nodes(self, tag: str | None) -> list[dict]:
        if self.registry_state is None:
            raise not_found("this node does not serve the registry")
        return [e.to_obj() for e in self.registry_state.lookup(tag)]

    def api_registry_deregister(self, node_id: str) -> None:
        if self.registry_state is None:
            raise not_found("this node does not serve the registry")
        self.registry_state.deregister(node_id)

    def api_events(self, after: int, limit: int) -> dict:
        limit = max(1, min(limit, 50_000))
        events, last = self.events.after(after, limit)
        return {"node_id": self.node_id, "events": events, "last": last}

    # -- workload driving ------------------------------------------------------

    def api_start_requests(self, payload: dict) -> dict:
        if not isinstance(payload, dict):
            raise invalid_query("workload body must be a JSON object")
        mode = payload.get("mode")
        if mode not in ("restful", "push"):
            raise invalid_query(f"mode must be 'restful' or 'push', got {mode!r}")
        interval_ms = payload.get("interval_ms", 1000)
        duration_s = payload.get("duration_s")
        requests = payload.get("requests")
        if not isinstance(interval_ms, int) or interval_ms < 1:
            raise invalid_query("interval_ms must be a positive integer")
        if not isinstance(duration_s, int) or duration_s < 1:
            raise invalid_query("duration_s must be a positive integer")
        if not isinstance(requests, list) or not requests:
            raise invalid_query("requests must be a non-empty array")
        workload = Workload(
            workload_id=payload.get("workload_id") or f"w-{uuid.uuid4().hex[:8]}",
            mode=mode,
            interval_ms=interval_ms,
            duration_s=duration_s,
        )
        for entry in requests:
            if not isinstance(entry, dict):
                raise invalid_query("each request must be an object")
            missing = [k for k in ("request_id", "node_id", "sensor") if not entry.get(k)]
            if missing:
                raise invalid_query(f"request missing fields: {', '.join(missing)}")
            rid = entry["request_id"]
            if rid in workload.requests:
                raise invalid_query(f"duplicate request_id {rid!r}")
            runner = _RequestRunner(rid, entry["node_id"], entry["sensor"])
            runner.address = entry.get("address")
            workload.requests[rid] = runner
        with self._workload_lock:
            if self._workload is not None and not self._workload.finished:
                raise conflict(f"workload {self._workload.id} is still running")
            self._resolve_addresses(workload)
            now = self.clock.now_ms()
            workload.started_ms = now
            workload.deadline_ms = now + duration_s * 1000
            self._workload = workload
        self.events.emit(
            "workload_started",
            workload_id=workload.id,
            mode=mode,
            interval_ms=interval_ms,
            duration_s=duration_s,
            requests=len(workload.requests),
        )
        if mode == "restful":
            for index, runner in enumerate(workload.requests.values()):
                thread = threading.Thread(
                    target=self._run_restful_request,
                    args=(workload, runner, index * REQUEST_STAGGER_MS),
                    name=f"pull-{runner.request_id}",
                    daemon=True,
                )
                workload.threads.append(thread)
        else:
            thread = threading.Thread(
                target=self._run_push_workload,
                args=(workload,),
                name="push-workload",
                daemon=True,
            )
            workload.threads.append(thread)
        for thread in workload.threads:
            thread.start()
        monitor = threading.Thread(
            target=self._finish_workload, args=(workload,), name="workload-monitor", daemon=True
        )
        monitor.start()
        return {
            "workload_id": workload.id,
            "mode": mode,
            "requests": len(workload.requests),
            "started_ms": workload.started_ms,
        }

    def _resolve_addresses(self, workload: Workload) -> None:
        """Fill in peer addresses from the registry (the discovery path);
        explicit per-request addresses are honored as an override."""
        unresolved = [r for r in workload.requests.values() if not r.address]
        if not unresolved:
            return
        if not self.cfg.registry:
            raise invalid_query(
                "requests without addresses need a configured registry"
            )
        host, port = split_address(self.cfg.registry)
        session = PeerSession(host, port, timeout_s=10.0)
        try:
            nodes = session.registry_nodes(self.cfg.group_tag or None)
        finally:
            session.close()
        by_id = {n["node_id"]: n["address"] for n in nodes}
        missing = sorted({r.node_id for r in unresolved if r.node_id not in by_id})
        if missing:
            raise not_found(f"nodes not in registry: {', '.join(missing)}")
        for runner in unresolved:
            runner.address = by_id[runner.node_id]

    def _record_round_trip(
        self,
        workload: Workload,
        runner: _RequestRunner,
        issue_ms: int,
        response_ms: int,
        element: StreamElement,
    ) -> None:
        latency = max(0, response_ms - issue_ms)
        with workload.lock:
            runner.trips += 1
        self.events.emit(
            "sub_request",
            leg="fetch",
            request_id=runner.request_id,
            mode=workload.mode,
            t_request_ms=issue_ms,
        )
        self.events.emit(
            "sub_request",
            leg="ack",
            request_id=runner.request_id,
            mode=workload.mode,
            t_request_ms=response_ms,
        )
        self.events.emit(
            "round_trip",
            request_id=runner.request_id,
            sensor=runner.sensor,
            mode=workload.mode,
            issue_ms=issue_ms,
            response_ms=response_ms,
            latency_ms=latency,
            element_ts=element.timestamp,
        )

    def _note_request_error(self, workload: Workload, runner: _RequestRunner, stage: str, exc: EngineError) -> None:
        with workload.lock:
            runner.errors += 1
        self.events.emit(
            "request_error",
            request_id=runner.request_id,
            stage=stage,
            kind=exc.kind.value,
            detail=exc.detail,
        )

    def _subscribe_with_retry(
        self, workload: Workload, session: PeerSession, payload: dict
    ) -> dict:
        """Transient peer failures (startup races, connection storms) get a
        few paced retries; definite rejections propagate immediately."""
        last: EngineError | None = None
        for attempt in range(SUBSCRIBE_ATTEMPTS):
            try:
                return session.create_subscription(payload)
            except EngineError as exc:
                if exc.kind is not ErrorKind.PEER_UNREACHABLE:
                    raise
                last = exc
                if workload.stop.wait(SUBSCRIBE_RETRY_DELAY_S * (attempt + 1)):
                    break
        assert last is not None
        raise last

    def _run_restful_request(
        self, workload: Workload, runner: _RequestRunner, stagger_ms: int
    ) -> None:
        """One request = one held session pulling at the workload interval."""
        if stagger_ms > 0 and workload.stop.wait(stagger_ms / 1000.0):
            return
        host, port = split_address(runner.address)
        session = PeerSession(host, port, timeout_s=STREAM_HEARTBEAT_MS / 1000 + 15)
        interval = workload.interval_ms
        sub_id = None
        try:
            sub = self._subscribe_with_retry(
                workload,
                session,
                {
                    "sensor": runner.sensor,
                    "mode": "restful",
                    "interval_ms": interval,
                    "peer": f"{self.node_id}/{runner.request_id}",
                },
            )
            sub_id = sub["id"]
            runner.sub_id = sub_id
        except EngineError as exc:
            self._note_request_error(workload, runner, "subscribe", exc)
        if sub_id is not None:
            start = self.clock.now_ms()
            tick = 0
            while not workload.stop.is_set():
                target = start + tick * interval
                if target >= workload.deadline_ms:
                    break
                now = self.clock.now_ms()
                if target > now and workload.stop.wait((target - now) / 1000.0):
                    break
                issue = self.clock.now_ms()
                budget = min(STREAM_HEARTBEAT_MS, workload.deadline_ms - issue)
                if budget <= 0:
                    break
                try:
                    element, _pending = session.stream_next(sub_id, timeout_ms=budget)
                    if element is not None:
                        self._record_round_trip(
                            workload,
                            runner,
                            issue_ms=issue,
                            response_ms=self.clock.now_ms(),
                            element=element,
                        )
                except EngineError as exc:
                    self._note_request_error(workload, runner, "pull", exc)
                    workload.stop.wait(0.2)
                now = self.clock.now_ms()
                tick = max(tick + 1, (now - start) // interval + 1)
            try:
                session.cancel_subscription(sub_id)
            except EngineError:
                pass
        with workload.lock:
            runner.connects = session.connects
        session.close()

    def _run_push_workload(self, workload: Workload) -> None:
        """Register push subscriptions on the peers, then wait out the run."""
        sessions: dict[str, PeerSession] = {}

        def session_for(address: str) -> PeerSession:
            if address not in sessions:
                host, port = split_address(address)
                sessions[address] = PeerSession(host, port, timeout_s=15.0)
            return sessions[address]

        for index, runner in enumerate(workload.requests.values()):
            if index and workload.stop.wait(REQUEST_STAGGER_MS / 1000.0):
                break
            try:
                sub = self._subscribe_with_retry(
                    workload,
                    session_for(runner.address),
                    {
                        "sensor": runner.sensor,
                        "mode": "push",
                        "interval_ms": workload.interval_ms,
                        "callback": self.address,
                    },
                )
                with workload.lock:
                    runner.sub_id = sub["id"]
                    runner.connects = 1
                    workload.sub_index[sub["id"]] = runner
            except EngineError as exc:
                self._note_request_error(workload, runner, "subscribe", exc)
        remaining = (workload.deadline_ms - self.clock.now_ms()) / 1000.0
        if remaining > 0:
            workload.stop.wait(remaining)
        for runner in workload.requests.values():
            if runner.sub_id is None:
                continue
            try:
                session_for(runner.address).cancel_subscription(runner.sub_id)
            except EngineError as exc:
                self._note_request_error(workload, runner, "cancel", exc)
        for session in sessions.values():
            session.close()

    def _finish_workload(self, workload: Workload) -> None:
        for thread in workload.threads:
            thread.join()
        workload.finished = True
        summary = workload.summary_obj()
        self.events.emit(
            "workload_finished",
            workload_id=workload.id,
            mode=workload.mode,
            total_trips=summary["total_trips"],
            duration_ms=self.clock.now_ms() - workload.started_ms,
        )
