"""Shared domain types: field specs, stream elements, identifiers, errors, clock."""
from __future__ import annotations

import json
import math
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Union

Scalar = Union[float, str]

_FIELD_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")
# Identifiers travel in URL paths, so keep them to a safe charset.
_IDENT_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.:-]*$")


class ErrorKind(Enum):
    NOT_FOUND = "NotFound"
    CONFLICT = "Conflict"
    INVALID_DESCRIPTOR = "InvalidDescriptor"
    INVALID_QUERY = "InvalidQuery"
    PLUGIN_FAILURE = "PluginFailure"
    PEER_UNREACHABLE = "PeerUnreachable"
    BUFFER_OVERFLOW = "BufferOverflow"
    SHUTDOWN = "Shutdown"


class EngineError(Exception):
    """Domain error carrying one of the fixed error kinds."""

    def __init__(self, kind: ErrorKind, detail: str):
        super().__init__(f"{kind.value}: {detail}")
        self.kind = kind
        self.detail = detail


def not_found(detail: str) -> EngineError:
    return EngineError(ErrorKind.NOT_FOUND, detail)


def conflict(detail: str) -> EngineError:
    return EngineError(ErrorKind.CONFLICT, detail)


def invalid_descriptor(detail: str) -> EngineError:
    return EngineError(ErrorKind.INVALID_DESCRIPTOR, detail)


def invalid_query(detail: str) -> EngineError:
    return EngineError(ErrorKind.INVALID_QUERY, detail)


def plugin_failure(detail: str) -> EngineError:
    return EngineError(ErrorKind.PLUGIN_FAILURE, detail)


def peer_unreachable(detail: str) -> EngineError:
    return EngineError(ErrorKind.PEER_UNREACHABLE, detail)


class FieldKind(Enum):
    NUMERIC = "numeric"
    TEXT = "text"


@dataclass(frozen=True)
class FieldSpec:
    """One named data item in a sensor's output record."""

    name: str
    kind: FieldKind = FieldKind.NUMERIC
    unit: str = ""

    def __post_init__(self):
        if not _FIELD_NAME_RE.match(self.name):
            raise invalid_descriptor(
                f"field name {self.name!r} must match [a-z][a-z0-9_]*"
            )

    def to_obj(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "unit": self.unit}

    @classmethod
    def from_obj(cls, obj: dict) -> "FieldSpec":
        if not isinstance(obj, dict) or "name" not in obj:
            raise invalid_descriptor(f"field spec must be an object with 'name': {obj!r}")
        kind_raw = obj.get("kind", "numeric")
        try:
            kind = FieldKind(kind_raw)
        except ValueError:
            raise invalid_descriptor(f"unknown field kind {kind_raw!r}") from None
        return cls(name=obj["name"], kind=kind, unit=obj.get("unit", ""))


def validate_output_structure(fields: list[FieldSpec]) -> None:
    """Check non-emptiness and name uniqueness of an output structure."""
    if not fields:
        raise invalid_descriptor("output structure must not be empty")
    seen = set()
    for f in fields:
        if f.name in seen:
            raise invalid_descriptor(f"duplicate field name {f.name!r}")
        seen.add(f.name)


@dataclass(frozen=True)
class StreamElement:
    """One timestamped sensor record; the unit of storage, query, and delivery.

    ``values`` positionally match the owning sensor's output structure.
    Numeric values must be finite; NaN/Inf are rejected at construction.
    """

    timestamp: int
    values: tuple[Scalar, ...]

    def __post_init__(self):
        if not isinstance(self.timestamp, int):
            raise invalid_query(f"timestamp must be an integer, got {self.timestamp!r}")
        vals = tuple(self.values)
        object.__setattr__(self, "values", vals)
        for v in vals:
            if isinstance(v, bool) or not isinstance(v, (int, float, str)):
                raise invalid_query(f"unsupported value type {type(v).__name__}")
            if isinstance(v, (int, float)) and not math.isfinite(v):
                raise invalid_query(f"non-finite numeric value {v!r}")

    def conforms_to(self, fields: list[FieldSpec]) -> bool:
        if len(self.values) != len(fields):
            return False
        for v, f in zip(self.values, fields):
            if f.kind is FieldKind.NUMERIC and not isinstance(v, (int, float)):
                return False
            if f.kind is FieldKind.TEXT and not isinstance(v, str):
                return False
        return True

    def to_obj(self) -> dict:
        return {"ts": self.timestamp, "values": list(self.values)}

    @classmethod
    def from_obj(cls, obj: dict) -> "StreamElement":
        if not isinstance(obj, dict) or "ts" not in obj or "values" not in obj:
            raise invalid_query(f"element must be an object with 'ts' and 'values': {obj!r}")
        values = obj["values"]
        if not isinstance(values, list):
            raise invalid_query("'values' must be an array")
        return cls(timestamp=obj["ts"], values=tuple(values))


def encode_element(element: StreamElement) -> bytes:
    """Canonical wire encoding: compact JSON, sorted keys, utf-8."""
    return canonical_json(element.to_obj())


def decode_element(data: bytes) -> StreamElement:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise invalid_query(f"malformed element encoding: {exc}") from None
    return StreamElement.from_obj(obj)


def canonical_json(obj) -> bytes:
    """The one JSON shape used on the wire and in journals (stable byte-for-byte)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# --- identifiers ------------------------------------------------------------

def validate_identifier(value: str, what: str = "identifier") -> str:
    """Validate an opaque identifier (node id, sensor name, subscription or
    request id). Returns the value unchanged so parse(format(x)) == x."""
    if not isinstance(value, str) or not _IDENT_RE.match(value):
        raise invalid_descriptor(f"{what} {value!r} must match {_IDENT_RE.pattern}")
    return value


def format_identifier(value: str) -> str:
    return value


def parse_identifier(text: str, what: str = "identifier") -> str:
    return validate_identifier(text, what)


# --- clock ------------------------------------------------------------------

class Clock:
    """Single clock source; subclass or replace for tests.

    now_ms() never goes backwards within a process, so interval measurements
    stay non-negative even if the wall clock is stepped.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._last = 0

    def _read(self) -> int:
        return time.time_ns() // 1_000_000

    def now_ms(self) -> int:
        with self._lock:
            t = self._read()
            if t < self._last:
                t = self._last
            self._last = t
            return t

    def sleep_ms(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)


class FakeClock(Clock):
    """Manually advanced clock for deterministic tests."""

    def __init__(self, start_ms: int = 0):
        super().__init__()
        self._now = start_ms

    def _read(self) -> int:
        return self._now

    def set(self, ms: int) -> None:
        with self._lock:
            self._now = ms

    def advance(self, ms: int) -> None:
        with self._lock:
            self._now += ms

    def sleep_ms(self, ms: float) -> None:
        self.advance(int(ms))


SYSTEM_CLOCK = Clock()


def now_ms() -> int:
    """Milliseconds since the Unix epoch from the process-wide clock."""
    return SYSTEM_CLOCK.now_ms()
