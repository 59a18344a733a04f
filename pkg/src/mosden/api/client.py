"""HTTP client helpers for talking to peer nodes.

Two connection disciplines live here on purpose:

* ``PeerSession`` holds one TCP connection open and reuses it for every
  request (the streaming discipline). It counts how many times it had to
  (re)connect, which is the client-side half of the connection accounting.
* ``push_batch`` opens a fresh connection per delivery and closes it after
  the acknowledgement (the push discipline), paying connection setup on
  every delivery by design.
"""
from __future__ import annotations

import http.client
import logging
import socket
import threading

from ..core import EngineError, StreamElement, peer_unreachable
from . import wire

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 75.0


class PeerSession:
    """A persistent HTTP/1.1 session to one peer."""

    def __init__(self, host: str, port: int, timeout_s: float = DEFAULT_TIMEOUT_S):
        self.host = host
        self.port = port
        self.timeout_s = timeout_s
        self.connects = 0
        self._conn: http.client.HTTPConnection | None = None
        self._lock = threading.Lock()

    def _ensure(self) -> http.client.HTTPConnection:
        if self._conn is None:
            conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout_s)
            conn.connect()
            self.connects += 1
            self._conn = conn
        return self._conn

    def _drop(self) -> None:
        if self._conn is not None:
            try:
                self._conn.close()
            except OSError:
                pass
            self._conn = None

    def request(self, method: str, path: str, obj=None) -> tuple[int, dict, object]:
        """Issue one request on the held connection.

        Returns (status, headers, decoded body or None). Retries once on a
        dropped keep-alive connection. Error statuses raise ``EngineError``.
        """
        body = wire.encode_obj(obj) if obj is not None else b""
        headers = {"Content-Type": "application/json"} if body else {}
        with self._lock:
            for attempt in (1, 2):
                conn = None
                try:
                    conn = self._ensure()
                    conn.request(method, path, body=body or None, headers=headers)
                    resp = conn.getresponse()
                    raw = resp.read()
                    status = resp.status
                    resp_headers = dict(resp.getheaders())
                    break
                except (http.client.HTTPException, ConnectionError, socket.timeout, OSError) as exc:
                    self._drop()
                    if attempt == 2:
                        raise peer_unreachable(
                            f"{self.host}:{self.port} {method} {path}: {exc}"
                        ) from exc
        if status >= 400:
            raise wire.error_from_body(status, raw)
        decoded = wire.decode_obj(raw) if raw else None
        return status, resp_headers, decoded

    def close(self) -> None:
        with self._lock:
            self._drop()

    # -- typed helpers ------------------------------------------------------

    def health(self) -> dict:
        return self.request("GET", "/v1/health")[2]

    def metrics(self) -> dict:
        return self.request("GET", "/v1/metrics")[2]

    def sensors(self) -> list:
        return self.request("GET", "/v1/sensors")[2]["sensors"]

    def latest(self, sensor: str) -> StreamElement | None:
        status, _, obj = self.request("GET", f"/v1/sensors/{sensor}/latest")
        if status == 204 or obj is None:
            return None
        return StreamElement.from_obj(obj)

    def range(self, sensor: str, from_ts: int, to_ts: int) -> list[StreamElement]:
        _, _, obj = self.request(
            "GET", f"/v1/sensors/{sensor}/range?from={from_ts}&to={to_ts}"
        )
        return wire.elements_from_obj(obj)

    def create_subscription(self, payload: dict) -> dict:
        return self.request("POST", "/v1/subscriptions", payload)[2]

    def cancel_subscription(self, sub_id: str) -> None:
        self.request("DELETE", f"/v1/subscriptions/{sub_id}")

    def stream_next(
        self, sub_id: str, timeout_ms: int
    ) -> tuple[StreamElement | None, int]:
        """Long-poll the next element; ``(None, 0)`` means heartbeat."""
        status, headers, obj = self.request(
            "GET", f"/v1/subscriptions/{sub_id}/stream?timeout_ms={timeout_ms}"
        )
        if status == 204 or obj is None:
            return None, 0
        pending = int(headers.get("X-Pending", 0))
        return StreamElement.from_obj(obj), pending

    def register_node(self, registration_obj: dict) -> dict:
        return self.request("POST", "/v1/registry/register", registration_obj)[2]

    def registry_nodes(self, tag: str | None = None) -> list[dict]:
        path = "/v1/registry/nodes"
        if tag:
            path += f"?tag={tag}"
        return self.request("GET", path)[2]["nodes"]

    def deregister_node(self, node_id: str) -> None:
        self.request("DELETE", f"/v1/registry/nodes/{node_id}")

    def start_requests(self, payload: dict) -> dict:
        return self.request("POST", "/v1/requests", payload)[2]

    def events(self, after: int = 0, limit: int = 10000) -> dict:
        return self.request("GET", f"/v1/events?after={after}&limit={limit}")[2]


def push_batch(
    host: str,
    port: int,
    sub_id: str,
    elements: list[StreamElement],
    timeout_s: float = 30.0,
) -> dict:
    """Deliver a batch over a brand-new connection, then close it.

    One TCP connect per delivery is the cost model of push mode; do not
    pool or reuse connections here.
    """
    body = wire.encode_obj(wire.elements_to_obj(elements))
    conn = http.client.HTTPConnection(host, port, timeout=timeout_s)
    try:
        conn.request(
            "POST",
            f"/v1/push/{sub_id}",
            body=body,
            headers={"Content-Type": "application/json"},
        )
        resp = conn.getresponse()
        raw = resp.read()
        if resp.status >= 400:
            raise wire.error_from_body(resp.status, raw)
        return wire.decode_obj(raw) if raw else {}
    except EngineError:
        raise
    except (http.client.HTTPException, ConnectionError, socket.timeout, OSError) as exc:
        raise peer_unreachable(f"push to {host}:{port}/{sub_id}: {exc}") from exc
    finally:
        conn.close()


class HttpPushTransport:
    """Adapter giving the subscription manager a way to push to a peer."""

    def __init__(self, host: str, port: int, timeout_s: float = 30.0):
        self.host = host
        self.port = port
        self.timeout_s = timeout_s
        self.deliveries = 0

    def deliver(self, sub_id: str, elements: list[StreamElement]) -> None:
        push_batch(self.host, self.port, sub_id, elements, timeout_s=self.timeout_s)
        self.deliveries += 1
