"""HTTP listener of a node: routing, wire mapping, connection accounting.

Persistent connections (HTTP/1.1 keep-alive) are first-class here: the server
assigns every accepted TCP connection an id and tracks which subscription
each stream/push request arrived on, which is how the delivery-mode
connection-count invariants are observed.

The constrained-device role is emulated with two knobs: a cap on concurrent
connection admissions and a fixed admission delay per new connection,
modeling the connection setup cost that dominates weak hardware.
"""
from __future__ import annotations

import logging
import re
import socket
import threading
import time
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..core import EngineError, invalid_query
from . import wire

log = logging.getLogger(__name__)

MAX_BODY_BYTES = 16 * 1024 * 1024
DEFAULT_STREAM_TIMEOUT_MS = 30_000

_ROUTES: list[tuple[str, re.Pattern, str]] = [
    ("GET", re.compile(r"^/v1/health$"), "health"),
    ("GET", re.compile(r"^/v1/metrics$"), "metrics"),
    ("GET", re.compile(r"^/v1/sensors$"), "sensors"),
    ("GET", re.compile(r"^/v1/sensors/([^/]+)$"), "sensor_detail"),
    ("GET", re.compile(r"^/v1/sensors/([^/]+)/latest$"), "latest"),
    ("GET", re.compile(r"^/v1/sensors/([^/]+)/range$"), "range"),
    ("GET", re.compile(r"^/v1/subscriptions$"), "subscriptions"),
    ("GET", re.compile(r"^/v1/subscriptions/([^/]+)$"), "subscription_detail"),
    ("GET", re.compile(r"^/v1/subscriptions/([^/]+)/stream$"), "stream"),
    ("POST", re.compile(r"^/v1/subscriptions$"), "create_subscription"),
    ("DELETE", re.compile(r"^/v1/subscriptions/([^/]+)$"), "cancel_subscription"),
    ("POST", re.compile(r"^/v1/push/([^/]+)$"), "push_inbound"),
    ("POST", re.compile(r"^/v1/registry/register$"), "registry_register"),
    ("GET", re.compile(r"^/v1/registry/nodes$"), "registry_nodes"),
    ("DELETE", re.compile(r"^/v1/registry/nodes/([^/]+)$"), "registry_deregister"),
    ("GET", re.compile(r"^/v1/events$"), "events"),
    ("POST", re.compile(r"^/v1/requests$"), "start_requests"),
]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "NodeHTTPServer"

    # Idle keep-alive connections are reaped after this many seconds.
    timeout = 120

    def setup(self):
        super().setup()
        self.connection_id = self.server.on_connection_open(self.connection)
        self.admitted = self.server.admission_gate()

    def handle(self):
        if not self.admitted:
            # Admission timed out: drop the connection without a response,
            # exactly what an overloaded constrained listener does.
            self.close_connection = True
            return
        super().handle()

    def finish(self):
        try:
            super().finish()
        finally:
            self.server.on_connection_close(self.connection_id)

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0) or 0)
        if length > MAX_BODY_BYTES:
            raise invalid_query(f"body too large ({length} bytes)")
        return self.rfile.read(length) if length else b""

    def _respond(self, status: int, body: bytes = b"", content_type: str = "application/json"):
        self.send_response(status)
        if body:
            self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        if self.server.stopping:
            self.send_header("Connection", "close")
            self.close_connection = True
        self.end_headers()
        if body:
            self.wfile.write(body)

    def _respond_obj(self, obj, status: int = 200, headers: dict | None = None):
        body = wire.encode_obj(obj)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, str(v))
        if self.server.stopping:
            self.send_header("Connection", "close")
            self.close_connection = True
        self.end_headers()
        self.wfile.write(body)

    def _dispatch(self, method: str):
        parsed = urllib.parse.urlsplit(self.path)
        query = {k: v[-1] for k, v in urllib.parse.parse_qs(parsed.query).items()}
        self.server.total_requests += 1
        for m, pattern, name in _ROUTES:
            if m != method:
                continue
            match = pattern.match(parsed.path)
            if match:
                try:
                    handler = getattr(self, f"_route_{name}")
                    handler(*match.groups(), query=query)
                except EngineError as exc:
                    status = wire.STATUS_BY_KIND[exc.kind]
                    self._respond(status, wire.encode_error(exc))
                except BrokenPipeError:
                    self.close_connection = True
                except Exception:
                    log.exception("unhandled error on %s %s", method, parsed.path)
                    self._respond(500, wire.encode_obj(
                        {"error": {"kind": "PluginFailure", "detail": "internal error"}}
                    ))
                return
        self._respond(404, wire.encode_obj(
            {"error": {"kind": "NotFound", "detail": f"no route for {method} {parsed.path}"}}
        ))

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_DELETE(self):
        self._dispatch("DELETE")

    # -- routes ------------------------------------------------------------

    def _route_health(self, query):
        self._respond_obj(self.server.app.api_health())

    def _route_metrics(self, query):
        self._respond_obj(self.server.app.api_metrics())

    def _route_sensors(self, query):
        self._respond_obj({"sensors": self.server.app.api_sensors()})

    def _route_sensor_detail(self, name, query):
        self._respond_obj(self.server.app.api_sensor_detail(name))

    def _route_latest(self, name, query):
        element = self.server.app.api_latest(name)
        if element is None:
            self._respond(204)
        else:
            self._respond_obj(element.to_obj())

    def _route_range(self, name, query):
        try:
            from_ts = int(query["from"])
            to_ts = int(query["to"])
        except (KeyError, ValueError):
            raise invalid_query("range requires integer 'from' and 'to' parameters")
        elements = self.server.app.api_range(name, from_ts, to_ts)
        self._respond_obj(wire.elements_to_obj(elements))

    def _route_subscriptions(self, query):
        self._respond_obj({"subscriptions": self.server.app.api_subscriptions()})

    def _route_subscription_detail(self, sub_id, query):
        self._respond_obj(self.server.app.api_subscription_detail(sub_id))

    def _route_create_subscription(self, query):
        payload = wire.decode_obj(self._read_body())
        self._respond_obj(self.server.app.api_create_subscription(payload), status=201)

    def _route_cancel_subscription(self, sub_id, query):
        self.server.app.api_cancel_subscription(sub_id)
        self._respond_obj({"cancelled": sub_id})

    def _route_stream(self, sub_id, query):
        timeout_ms = int(query.get("timeout_ms", DEFAULT_STREAM_TIMEOUT_MS))
        self.server.note_stream_connection(sub_id, self.connection_id)
        element, pending = self.server.app.api_stream_pull(sub_id, timeout_ms)
        if element is None:
            # Heartbeat: no new data within the window.
            self.send_response(204)
            self.send_header("Content-Length", "0")
            self.send_header("X-Pending", "0")
            self.end_headers()
        else:
            self._respond_obj(element.to_obj(), headers={"X-Pending": pending})

    def _route_push_inbound(self, sub_id, query):
        payload = wire.decode_obj(self._read_body())
        self.server.note_push_connection(sub_id, self.connection_id)
        self._respond_obj(self.server.app.api_push_inbound(sub_id, payload))

    def _route_registry_register(self, query):
        payload = wire.decode_obj(self._read_body())
        self._respond_obj(self.server.app.api_registry_register(payload))

    def _route_registry_nodes(self, query):
        tag = query.get("tag")
        self._respond_obj({"nodes": self.server.app.api_registry_nodes(tag)})

    def _route_registry_deregister(self, node_id, query):
        self.server.app.api_registry_deregister(node_id)
        self._respond_obj({"deregistered": node_id})

    def _route_events(self, query):
        after = int(query.get("after", 0))
        limit = int(query.get("limit", 10000))
        self._respond_obj(self.server.app.api_events(after, limit))

    def _route_start_requests(self, query):
        payload = wire.decode_obj(self._read_body())
        self._respond_obj(self.server.app.api_start_requests(payload), status=201)


class NodeHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    # Deep listen backlog: connection-per-delivery bursts must reach the
    # admission gate (where drops are counted) instead of the kernel queue.
    request_queue_size = 128

    def __init__(
        self,
        host: str,
        port: int,
        app,
        admission_workers: int = 0,
        admission_delay_ms: int = 0,
        admission_timeout_ms: int = 0,
    ):
        super().__init__((host, port), _Handler)
        self.app = app
        self.stopping = False
        self.total_requests = 0
        self._conn_seq = 0
        self._open: dict[int, socket.socket] = {}
        self._conn_lock = threading.Lock()
        self.connections_accepted = 0
        self.connections_refused = 0
        self._stream_conns: dict[str, set[int]] = {}
        self._push_conns: dict[str, set[int]] = {}
        self._admission_delay_s = admission_delay_ms / 1000.0
        self._admission_timeout_s = admission_timeout_ms / 1000.0
        self._admission_sem = (
            threading.Semaphore(admission_workers) if admission_workers > 0 else None
        )

    @property
    def port(self) -> int:
        return self.server_address[1]

    # -- connection accounting ------------------------------------------

    def on_connection_open(self, sock: socket.socket) -> int:
        with self._conn_lock:
            self._conn_seq += 1
            conn_id = self._conn_seq
            self._open[conn_id] = sock
            self.connections_accepted += 1
        return conn_id

    def on_connection_close(self, conn_id: int) -> None:
        with self._conn_lock:
            self._open.pop(conn_id, None)

    def note_stream_connection(self, sub_id: str, conn_id: int) -> None:
        with self._conn_lock:
            self._stream_conns.setdefault(sub_id, set()).add(conn_id)

    def note_push_connection(self, sub_id: str, conn_id: int) -> None:
        with self._conn_lock:
            self._push_conns.setdefault(sub_id, set()).add(conn_id)

    def connection_stats(self) -> dict:
        with self._conn_lock:
            return {
                "connections_accepted": self.connections_accepted,
                "connections_refused": self.connections_refused,
                "connections_open": len(self._open),
                "total_requests": self.total_requests,
                "stream_connections": {k: len(v) for k, v in self._stream_conns.items()},
                "push_connections": {k: len(v) for k, v in self._push_conns.items()},
            }

    def admission_gate(self) -> bool:
        """Constrained-role emulation: every new connection costs one worker
        slot for a fixed setup delay. Returns False when admission timed out,
        in which case the connection is dropped unserved."""
        if self._admission_sem is None:
            if self._admission_delay_s > 0:
                time.sleep(self._admission_delay_s)
            return True
        if self._admission_timeout_s > 0:
            admitted = self._admission_sem.acquire(timeout=self._admission_timeout_s)
        else:
            admitted = self._admission_sem.acquire()
        if not admitted:
            with self._conn_lock:
                self.connections_refused += 1
            return False
        try:
            if self._admission_delay_s > 0:
                time.sleep(self._admission_delay_s)
        finally:
            self._admission_sem.release()
        return True

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        thread = threading.Thread(target=self.serve_forever, name="http-accept", daemon=True)
        thread.start()
        self._accept_thread = thread

    def stop(self, drain_s: float = 5.0) -> None:
        """Stop accepting, give in-flight requests ``drain_s`` to finish, then
        force-close whatever is left."""
        self.stopping = True
        self.shutdown()
        deadline = time.monotonic() + drain_s
        while time.monotonic() < deadline:
            with self._conn_lock:
                if not self._open:
                    break
            time.sleep(0.05)
        with self._conn_lock:
            leftovers = list(self._open.values())
        for sock in leftovers:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        self.server_close()
