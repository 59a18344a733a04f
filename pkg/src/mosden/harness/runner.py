"""Multi-process benchmark orchestration.

One run spawns a registry, one server-role node (the requester), and N
client nodes (the sensor hosts) as subprocesses of one binary, wires them
through the registry, drives the request workload over HTTP, samples
resources, polls the server's event log, and renders the report.

The orchestrator is the only writer of the run directory: events.jsonl and
resources.jsonl are appended here from polled data, never by the children.
"""
from __future__ import annotations

import json
import logging
import os
import random
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from ..api.client import PeerSession
from ..core import EngineError
from ..plugins import builtin_descriptor
from .metrics import MetricsReport, build_report
from .report import write_report
from .resources import ProcessSampler
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

ANNOUNCE_TIMEOUT_S = 20.0
READY_TIMEOUT_S = 30.0
FINISH_GRACE_S = 45.0
STOP_GRACE_S = 10.0

# The simulated on-board sensor set; virtual sensors cycle through it.
PLUGIN_CYCLE = (
    "accelerometer_sim",
    "microphone_sim",
    "light_sim",
    "pressure_sim",
    "gaussian_noise",
    "random_walk",
    "sine_wave",
    "constant",
)


@dataclass
class ChildNode:
    node_id: str
    role: str  # registry | client | server
    proc: subprocess.Popen
    port: int
    stderr_path: Path

    @property
    def address(self) -> str:
        return f"127.0.0.1:{self.port}"


@dataclass
class RunResult:
    report: MetricsReport
    run_dir: Path
    status: str

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class RunError(RuntimeError):
    pass


def _plugin_params(builtin: str, seed: int) -> dict:
    if builtin == "constant":
        return {"value": 1.0}
    if builtin == "sine_wave":
        return {"amplitude": 1.0, "period_ms": 60_000.0}
    if builtin == "light_sim":
        return {"seed": seed, "period_ms": 600_000.0}
    return {"seed": seed}


def _write_client_workspace(
    nodes_dir: Path, node_id: str, client_index: int, cfg: ScenarioConfig
) -> tuple[Path, Path, Path, list[str]]:
    base = nodes_dir / node_id
    plugins_dir = base / "plugins"
    vsensors_dir = base / "vsensors"
    data_dir = base / "data"
    for d in (plugins_dir, vsensors_dir, data_dir):
        d.mkdir(parents=True, exist_ok=True)
    used = {PLUGIN_CYCLE[i % len(PLUGIN_CYCLE)] for i in range(cfg.sensors_per_client)}
    for builtin in sorted(used):
        seed = cfg.seed * 1000 + client_index * 10 + PLUGIN_CYCLE.index(builtin)
        descriptor = builtin_descriptor(
            plugin_id=f"{builtin}-src",
            builtin=builtin,
            parameters=_plugin_params(builtin, seed),
        )
        path = plugins_dir / f"{builtin}.plugin"
        path.write_text(
            json.dumps(descriptor.to_obj(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    sensors = []
    for i in range(cfg.sensors_per_client):
        builtin = PLUGIN_CYCLE[i % len(PLUGIN_CYCLE)]
        name = f"vs-{i:02d}"
        sensors.append(name)
        config_obj = {
            "format_version": 1,
            "name": name,
            "plugin_id": f"{builtin}-src",
            "sampling_interval_ms": cfg.sampling_interval_ms,
            "history_size": cfg.history_size,
            "processors": [],
        }
        (vsensors_dir / f"{name}.vsensor").write_text(
            json.dumps(config_obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return plugins_dir, vsensors_dir, data_dir, sensors


def _child_env() -> dict:
    """Children get a config-clean environment: settings travel via flags."""
    env = {k: v for k, v in os.environ.items() if not k.startswith("MOSDEN_")}
    return env


def _spawn(
    run_dir: Path, node_id: str, role: str, args: list[str], log_level: str
) -> ChildNode:
    stderr_path = run_dir / "logs" / f"{node_id}.stderr.log"
    stderr_path.parent.mkdir(parents=True, exist_ok=True)
    stderr_handle = stderr_path.open("w", encoding="utf-8")
    cmd = [sys.executable, "-m", "mosden", *args, "--log-level", log_level]
    proc = subprocess.Popen(
        cmd,
        stdout=subprocess.PIPE,
        stderr=stderr_handle,
        text=True,
        bufsize=1,
        env=_child_env(),
    )
    stderr_handle.close()  # child holds the fd

    line_holder: list[str] = []

    def _read():
        line_holder.append(proc.stdout.readline())

    reader = threading.Thread(target=_read, daemon=True)
    reader.start()
    reader.join(ANNOUNCE_TIMEOUT_S)
    if not line_holder or not line_holder[0]:
        proc.kill()
        tail = stderr_path.read_text(encoding="utf-8", errors="replace")[-2000:]
        raise RunError(f"{node_id} did not announce a port; stderr tail:\n{tail}")
    try:
        announcement = json.loads(line_holder[0])
        port = int(announcement["port"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        proc.kill()
        raise RunError(f"{node_id} announce line unparseable: {line_holder[0]!r} ({exc})")
    return ChildNode(node_id=node_id, role=role, proc=proc, port=port, stderr_path=stderr_path)


def _stop_children(children: list[ChildNode]) -> dict[str, int | None]:
    """SIGTERM in reverse dependency order (server, clients, registry)."""
    exit_codes: dict[str, int | None] = {}
    order = {"server": 0, "client": 1, "registry": 2}
    for child in sorted(children, key=lambda c: order.get(c.role, 3)):
        if child.proc.poll() is None:
            try:
                child.proc.send_signal(signal.SIGTERM)
            except OSError:
                pass
    deadline = time.monotonic() + STOP_GRACE_S
    for child in children:
        remaining = max(0.1, deadline - time.monotonic())
        try:
            child.proc.wait(timeout=remaining)
        except subprocess.TimeoutExpired:
            child.proc.kill()
            try:
                child.proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                pass
        exit_codes[child.node_id] = child.proc.poll()
    return exit_codes


def _wait_until(predicate, timeout_s: float, interval_s: float = 0.25) -> bool:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval_s)
    return predicate()


def _assign_requests(cfg: ScenarioConfig, clients: list[tuple[str, list[str]]]) -> dict[str, dict]:
    """Deterministic seeded assignment of requests to (client, sensor) pairs."""
    pairs = [
        (node_id, sensor)
        for node_id, sensors in clients
        for sensor in sensors
    ]
    rng = random.Random(cfg.seed)
    rng.shuffle(pairs)
    return {
        f"r{k:03d}": {"node_id": node_id, "sensor": sensor}
        for k, (node_id, sensor) in enumerate(pairs[: cfg.request_count])
    }


class _Orchestrator:
    def __init__(self, cfg: ScenarioConfig, run_dir: Path, log_level: str):
        self.cfg = cfg
        self.run_dir = run_dir
        self.log_level = log_level
        self.children: list[ChildNode] = []
        self.sessions: dict[str, PeerSession] = {}
        self.events: list[dict] = []
        self.resources: list[dict] = []
        self.meta: dict = {"status": "ok", "seed": cfg.seed}
        self.failure: str | None = None
        self.epoch_ms = 0

    def session(self, child: ChildNode) -> PeerSession:
        if child.node_id not in self.sessions:
            self.sessions[child.node_id] = PeerSession("127.0.0.1", child.port, timeout_s=10.0)
        return self.sessions[child.node_id]

    def fail(self, why: str) -> None:
        if self.failure is None:
            self.failure = why
            self.meta["status"] = f"failed: {why}"
            log.error("run failed: %s", why)

    # -- topology ---------------------------------------------------------

    def spawn_topology(self) -> None:
        cfg = self.cfg
        nodes_dir = self.run_dir / "nodes"
        registry_data = nodes_dir / "registry" / "data"
        registry_data.mkdir(parents=True, exist_ok=True)
        registry = _spawn(
            self.run_dir,
            "registry",
            "registry",
            [
                "registry", "serve",
                "--host", "127.0.0.1", "--port", "0",
                "--node-id", "registry",
                "--data-dir", str(registry_data),
            ],
            self.log_level,
        )
        self.children.append(registry)
        client_specs: list[tuple[str, list[str]]] = []
        for i in range(cfg.client_count):
            node_id = f"client-{i}"
            plugins_dir, vsensors_dir, data_dir, sensors = _write_client_workspace(
                nodes_dir, node_id, i, cfg
            )
            child = _spawn(
                self.run_dir,
                node_id,
                "client",
                [
                    "node", "serve",
                    "--host", "127.0.0.1", "--port", "0",
                    "--node-id", node_id,
                    "--plugins-dir", str(plugins_dir),
                    "--vsensors-dir", str(vsensors_dir),
                    "--data-dir", str(data_dir),
                    "--registry", registry.address,
                    "--history-size", str(cfg.history_size),
                ],
                self.log_level,
            )
            self.children.append(child)
            client_specs.append((node_id, sensors))
        server_data = nodes_dir / "server" / "data"
        server_data.mkdir(parents=True, exist_ok=True)
        server_args = [
            "node", "serve",
            "--host", "127.0.0.1", "--port", "0",
            "--node-id", "server",
            "--data-dir", str(server_data),
            "--registry", registry.address,
        ]
        workers, delay_ms, timeout_ms = cfg.server_admission
        if workers:
            server_args += [
                "--admission-workers", str(workers),
                "--admission-delay-ms", str(delay_ms),
                "--admission-timeout-ms", str(timeout_ms),
            ]
        server = _spawn(self.run_dir, "server", "server", server_args, self.log_level)
        self.children.append(server)
        self.client_specs = client_specs
        self.meta["nodes"] = {
            c.node_id: {"role": c.role, "address": c.address, "pid": c.proc.pid}
            for c in self.children
        }

    @property
    def registry_node(self) -> ChildNode:
        return next(c for c in self.children if c.role == "registry")

    @property
    def server_node(self) -> ChildNode:
        return next(c for c in self.children if c.role == "server")

    @property
    def client_nodes(self) -> list[ChildNode]:
        return [c for c in self.children if c.role == "client"]

    def wait_ready(self) -> None:
        """All clients registered and every sensor has produced a sample."""
        expected = {c.node_id for c in self.client_nodes} | {"server"}

        def registered() -> bool:
            try:
                nodes = self.session(self.registry_node).registry_nodes()
            except EngineError:
                return False
            return expected.issubset({n["node_id"] for n in nodes})

        if not _wait_until(registered, READY_TIMEOUT_S):
            raise RunError("nodes did not all register within the ready timeout")

        def producing() -> bool:
            for child in self.client_nodes:
                try:
                    metrics = self.session(child).metrics()
                except EngineError:
                    return False
                sensors = metrics["sensors"]
                if len(sensors) < self.cfg.sensors_per_client:
                    return False
                if any(s["samples_taken"] < 1 for s in sensors):
                    return False
            return True

        if not _wait_until(producing, READY_TIMEOUT_S + self.cfg.sampling_interval_ms / 1000.0):
            raise RunError("client sensors did not start producing in time")

    # -- workload -----------------------------------------------------------

    def start_workload(self) -> None:
        cfg = self.cfg
        requests = _assign_requests(cfg, self.client_specs)
        self.meta["requests"] = requests
        if not requests:
            return
        payload = {
            "workload_id": f"{cfg.name}-seed{cfg.seed}",
            "mode": cfg.mode,
            "interval_ms": cfg.sampling_interval_ms,
            "duration_s": cfg.duration_s,
            "requests": [
                {"request_id": rid, **spec} for rid, spec in sorted(requests.items())
            ],
        }
        response = self.session(self.server_node).start_requests(payload)
        self.meta["workload_id"] = response["workload_id"]

    # -- observation loop ---------------------------------------------------

    def observe(self) -> None:
        cfg = self.cfg
        sampler = ProcessSampler(
            [(c.node_id, c.role, c.proc.pid) for c in self.children]
        )
        events_path = self.run_dir / "events.jsonl"
        resources_path = self.run_dir / "resources.jsonl"
        events_file = events_path.open("w", encoding="utf-8")
        resources_file = resources_path.open("w", encoding="utf-8")
        cursor = 0
        finished = False
        start = time.monotonic()
        self.epoch_ms = int(time.time() * 1000)
        observe_deadline = start + cfg.duration_s + (
            FINISH_GRACE_S if cfg.request_count else 2.0
        )
        try:
            while time.monotonic() < observe_deadline:
                tick_start = time.monotonic()
                t_ms = int(time.time() * 1000)
                for row in sampler.sample(t_ms):
                    merged = dict(row)
                    child = next(c for c in self.children if c.node_id == row["node_id"])
                    try:
                        metrics = self.session(child).metrics()
                        storage = metrics.get("storage", {})
                        connections = metrics.get("connections", {})
                        merged["appended_total"] = storage.get("appended_total")
                        merged["footprint_bytes"] = storage.get("footprint_bytes")
                        merged["connections_open"] = connections.get("connections_open")
                        merged["connections_accepted"] = connections.get("connections_accepted")
                        merged["samples_total"] = sum(
                            s["samples_taken"] for s in metrics.get("sensors", [])
                        )
                    except EngineError as exc:
                        merged["metrics_error"] = exc.detail
                    self.resources.append(merged)
                    resources_file.write(json.dumps(merged, sort_keys=True) + "\n")
                resources_file.flush()
                try:
                    page = self.session(self.server_node).events(after=cursor)
                    for event in page["events"]:
                        self.events.append(event)
                        events_file.write(json.dumps(event, sort_keys=True) + "\n")
                        if event["type"] == "workload_finished":
                            finished = True
                    cursor = max(cursor, page["last"])
                    events_file.flush()
                except EngineError as exc:
                    log.warning("event poll failed: %s", exc.detail)
                alive = sampler.alive()
                dead = [nid for nid, ok in alive.items() if not ok]
                if dead:
                    self.fail(f"process died mid-run: {', '.join(sorted(dead))}")
                    break
                if finished:
                    break
                if not self.cfg.request_count and time.monotonic() - start >= cfg.duration_s:
                    break
                elapsed = time.monotonic() - tick_start
                time.sleep(max(0.0, cfg.sample_period_s - elapsed))
            if cfg.request_count and not finished and self.failure is None:
                self.fail("workload did not finish within the grace window")
            # Final event drain so late round trips are not lost.
            try:
                while True:
                    page = self.session(self.server_node).events(after=cursor)
                    if not page["events"]:
                        break
                    for event in page["events"]:
                        self.events.append(event)
                        events_file.write(json.dumps(event, sort_keys=True) + "\n")
                    cursor = max(cursor, page["last"])
                events_file.flush()
            except EngineError as exc:
                log.warning("final event drain failed: %s", exc.detail)
        finally:
            events_file.close()
            resources_file.close()
        self.meta["observed_duration_ms"] = int((time.monotonic() - start) * 1000)

    def collect_final_metrics(self) -> None:
        connections: dict = {}
        storage: dict = {}
        final: dict = {}
        for child in self.children:
            try:
                metrics = self.session(child).metrics()
            except EngineError as exc:
                final[child.node_id] = {"error": exc.detail}
                continue
            final[child.node_id] = metrics
            connections[child.node_id] = metrics.get("connections", {})
            storage[child.node_id] = metrics.get("storage", {})
        self.meta["final_metrics"] = final
        self.meta["connections"] = connections
        self.meta["storage"] = storage

    def teardown(self) -> None:
        for session in self.sessions.values():
            session.close()
        self.sessions.clear()
        if self.children:
            self.meta["exit_codes"] = _stop_children(self.children)


def run_scenario(
    cfg: ScenarioConfig, run_dir: str | Path, log_level: str = "WARNING"
) -> RunResult:
    """Execute one scenario end to end and render its report into run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "scenario.json").write_text(
        json.dumps(cfg.to_obj(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    orch = _Orchestrator(cfg, run_dir, log_level)
    orch.meta["notes"] = {
        "sub_request_accounting": (
            "each completed round trip logs two sub-request legs: the data "
            "fetch and its acknowledgment"
        ),
        "cpu_unit": "cumulative process CPU milliseconds (user + system)",
    }
    try:
        orch.spawn_topology()
        orch.wait_ready()
        orch.start_workload()
        orch.observe()
        orch.collect_final_metrics()
    except RunError as exc:
        orch.fail(str(exc))
    except EngineError as exc:
        orch.fail(f"{exc.kind.value}: {exc.detail}")
    finally:
        orch.teardown()
    meta_path = run_dir / "meta.json"
    meta_path.write_text(
        json.dumps(orch.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    report = build_report(cfg.to_obj(), orch.meta, orch.events, orch.resources)
    write_report(report, run_dir)
    return RunResult(report=report, run_dir=run_dir, status=orch.meta["status"])


def load_run(run_dir: str | Path) -> MetricsReport:
    """Rebuild a report purely from a run directory's raw artifacts."""
    run_dir = Path(run_dir)
    scenario_obj = json.loads((run_dir / "scenario.json").read_text(encoding="utf-8"))
    meta = json.loads((run_dir / "meta.json").read_text(encoding="utf-8"))
    events = [
        json.loads(line)
        for line in (run_dir / "events.jsonl").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    resources_path = run_dir / "resources.jsonl"
    resources = []
    if resources_path.exists():
        resources = [
            json.loads(line)
            for line in resources_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    return build_report(scenario_obj, meta, events, resources)
