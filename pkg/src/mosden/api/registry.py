"""Registry role: node registrations with ttl-based liveness.

The registry is the discovery path between nodes (the broker role). Any node
can serve it; expiry is lazy, applied at lookup time.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

from ..core import Clock, SYSTEM_CLOCK, invalid_query, not_found, validate_identifier

DEFAULT_TTL_S = 30
REFRESH_INTERVAL_S = 10


@dataclass(frozen=True)
class NodeRegistration:
    node_id: str
    address: str  # host:port
    sensors: tuple[dict, ...] = ()  # [{"name": ..., "output": [field specs]}]
    group_tag: str = ""
    ttl_s: int = DEFAULT_TTL_S
    registered_at: int = 0

    def __post_init__(self):
        validate_identifier(self.node_id, "node_id")
        if self.ttl_s < 1:
            raise invalid_query("ttl_s must be >= 1")

    def to_obj(self) -> dict:
        return {
            "node_id": self.node_id,
            "address": self.address,
            "sensors": list(self.sensors),
            "group_tag": self.group_tag,
            "ttl_s": self.ttl_s,
            "registered_at": self.registered_at,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "NodeRegistration":
        if not isinstance(obj, dict):
            raise invalid_query("registration must be a JSON object")
        for key in ("node_id", "address"):
            if key not in obj:
                raise invalid_query(f"registration: missing {key!r}")
        sensors = obj.get("sensors", [])
        if not isinstance(sensors, list):
            raise invalid_query("registration: 'sensors' must be an array")
        return cls(
            node_id=obj["node_id"],
            address=obj["address"],
            sensors=tuple(sensors),
            group_tag=obj.get("group_tag", ""),
            ttl_s=int(obj.get("ttl_s", DEFAULT_TTL_S)),
            registered_at=int(obj.get("registered_at", 0)),
        )


class RegistryState:
    """Live registrations; re-registration refreshes the ttl."""

    def __init__(self, clock: Clock | None = None):
        self.clock = clock or SYSTEM_CLOCK
        self._entries: dict[str, NodeRegistration] = {}
        self._expiry_ms: dict[str, int] = {}
        self._lock = threading.Lock()

    def register(self, registration: NodeRegistration) -> NodeRegistration:
        now = self.clock.now_ms()
        entry = NodeRegistration(
            node_id=registration.node_id,
            address=registration.address,
            sensors=registration.sensors,
            group_tag=registration.group_tag,
            ttl_s=registration.ttl_s,
            registered_at=now,
        )
        with self._lock:
            self._entries[entry.node_id] = entry
            self._expiry_ms[entry.node_id] = now + entry.ttl_s * 1000
        return entry

    def deregister(self, node_id: str) -> None:
        with self._lock:
            if node_id not in self._entries:
                raise not_found(f"no registration for {node_id!r}")
            del self._entries[node_id]
            del self._expiry_ms[node_id]

    def lookup(self, tag: str | None = None) -> list[NodeRegistration]:
        now = self.clock.now_ms()
        with self._lock:
            expired = [nid for nid, exp in self._expiry_ms.items() if exp <= now]
            for nid in expired:
                del self._entries[nid]
                del self._expiry_ms[nid]
            entries = sorted(self._entries.values(), key=lambda e: e.node_id)
        if tag:
            entries = [e for e in entries if e.group_tag == tag]
        return entries
