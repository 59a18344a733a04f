"""Bounded per-sensor history: in-memory ring plus an on-disk journal.

Each sensor owns a ring of ``history_size`` newest elements. Appends beyond
capacity evict the oldest (FIFO). The journal is a family of length-prefixed
segment files per sensor (see docs/wire-format.md); old segments are deleted
on rotation so disk usage stays bounded. Recovery after a crash rebuilds the
ring from the surviving segments, discarding a torn tail.
"""
from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from threading import RLock

from .core import (
    FieldSpec,
    StreamElement,
    decode_element,
    encode_element,
    invalid_query,
    not_found,
)

log = logging.getLogger(__name__)

SEGMENT_HEADER = b"MOSDEN-JOURNAL v1\n"
SEGMENT_SUFFIX = ".seg"
_LEN = struct.Struct(">I")

# Segments never hold fewer than this many records, so tiny history sizes do
# not cause a rotation per append.
MIN_SEGMENT_RECORDS = 64

DEFAULT_HISTORY_SIZE = 100


@dataclass(frozen=True)
class TableStats:
    sensor: str
    history_size: int
    retained: int
    appended_total: int
    evicted_total: int
    footprint_bytes: int


class _SegmentWriter:
    def __init__(self, path: Path):
        self.path = path
        self.records = 0
        self._fh = open(path, "ab")
        if self._fh.tell() == 0:
            self._fh.write(SEGMENT_HEADER)
            self._fh.flush()

    def write(self, payload: bytes) -> None:
        self._fh.write(_LEN.pack(len(payload)))
        self._fh.write(payload)
        self._fh.flush()
        self.records += 1

    def close(self) -> None:
        self._fh.close()


def _read_segment(path: Path) -> tuple[list[bytes], int]:
    """Return (payloads, byte offset of first torn/invalid byte)."""
    payloads: list[bytes] = []
    with open(path, "rb") as fh:
        header = fh.read(len(SEGMENT_HEADER))
        if header != SEGMENT_HEADER:
            return [], 0
        good = fh.tell()
        while True:
            raw = fh.read(_LEN.size)
            if len(raw) < _LEN.size:
                break
            (n,) = _LEN.unpack(raw)
            payload = fh.read(n)
            if len(payload) < n:
                break
            payloads.append(payload)
            good = fh.tell()
    return payloads, good


class _SensorTable:
    def __init__(self, directory: Path, sensor: str, fields: list[FieldSpec], history_size: int):
        if history_size < 1:
            raise invalid_query("history_size must be >= 1")
        self.sensor = sensor
        self.fields = list(fields)
        self.history_size = history_size
        self.segment_capacity = max(history_size, MIN_SEGMENT_RECORDS)
        self.dir = directory
        self.ring: deque[StreamElement] = deque(maxlen=history_size)
        self.record_bytes: deque[int] = deque(maxlen=history_size)
        self.live_bytes = 0
        self.appended_total = 0
        self.evicted_total = 0
        self.lock = RLock()
        self._writer: _SegmentWriter | None = None
        self._next_seq = 1
        self._recover()

    # -- journal -------------------------------------------------------------

    def _segment_path(self, seq: int) -> Path:
        return self.dir / f"{self.sensor}.{seq:08d}{SEGMENT_SUFFIX}"

    def _existing_segments(self) -> list[tuple[int, Path]]:
        out = []
        for path in self.dir.glob(f"{self.sensor}.*{SEGMENT_SUFFIX}"):
            stem = path.name[: -len(SEGMENT_SUFFIX)]
            seq_part = stem.rsplit(".", 1)[-1]
            if stem.rsplit(".", 1)[0] == self.sensor and seq_part.isdigit():
                out.append((int(seq_part), path))
        return sorted(out)

    def _recover(self) -> None:
        segments = self._existing_segments()
        recovered: list[tuple[StreamElement, int]] = []
        for _, path in segments:
            payloads, good = _read_segment(path)
            size = path.stat().st_size
            if good < size:
                log.warning("journal %s: discarding torn tail (%d bytes)", path, size - good)
                with open(path, "r+b") as fh:
                    fh.truncate(good)
            for payload in payloads:
                try:
                    el = decode_element(payload)
                except Exception:
                    continue
                recovered.append((el, len(payload)))
        usable = [
            (el, n) for el, n in recovered if el.conforms_to(self.fields)
        ]
        if len(usable) < len(recovered):
            # Structure changed since these were written; start fresh.
            usable = []
        for el, n in usable[-self.history_size :]:
            self._push(el, n)
        self.appended_total = len(usable)
        self.evicted_total = max(0, len(usable) - len(self.ring))
        if segments:
            last_seq, last_path = segments[-1]
            payloads, _ = _read_segment(last_path)
            if usable and len(payloads) < self.segment_capacity:
                self._writer = _SegmentWriter(last_path)
                self._writer.records = len(payloads)
                self._next_seq = last_seq + 1
            else:
                if not usable:
                    for _, path in segments:
                        path.unlink(missing_ok=True)
                self._next_seq = last_seq + 1

    def _push(self, element: StreamElement, nbytes: int) -> None:
        if len(self.ring) == self.history_size:
            self.live_bytes -= self.record_bytes[0]
            self.evicted_total += 1
        self.ring.append(element)
        self.record_bytes.append(nbytes)
        self.live_bytes += nbytes

    def _journal_append(self, payload: bytes) -> None:
        if self._writer is None:
            self._writer = _SegmentWriter(self._segment_path(self._next_seq))
            self._next_seq += 1
        self._writer.write(payload)
        if self._writer.records >= self.segment_capacity:
            self._rotate()

    def _rotate(self) -> None:
        assert self._writer is not None
        full_path = self._writer.path
        self._writer.close()
        # The just-closed segment covers the whole retained window; anything
        # older holds only evicted records.
        for _, path in self._existing_segments():
            if path != full_path:
                path.unlink(missing_ok=True)
        self._writer = _SegmentWriter(self._segment_path(self._next_seq))
        self._next_seq += 1

    # -- operations ----------------------------------------------------------

    def append(self, element: StreamElement) -> None:
        with self.lock:
            if not element.conforms_to(self.fields):
                raise invalid_query(
                    f"element does not conform to the output structure of {self.sensor!r}"
                )
            if self.ring and element.timestamp < self.ring[-1].timestamp:
                raise invalid_query(
                    f"timestamp regression on {self.sensor!r}: "
                    f"{element.timestamp} < {self.ring[-1].timestamp}"
                )
            payload = encode_element(element)
            self._push(element, len(payload))
            self.appended_total += 1
            self._journal_append(payload)

    def latest(self) -> StreamElement | None:
        with self.lock:
            return self.ring[-1] if self.ring else None

    def range(self, from_ts: int, to_ts: int) -> list[StreamElement]:
        if from_ts > to_ts:
            raise invalid_query(f"range: from ({from_ts}) > to ({to_ts})")
        with self.lock:
            return [el for el in self.ring if from_ts <= el.timestamp <= to_ts]

    def footprint(self) -> int:
        with self.lock:
            return len(SEGMENT_HEADER) + self.live_bytes + len(self.ring) * _LEN.size

    def stats(self) -> TableStats:
        with self.lock:
            return TableStats(
                sensor=self.sensor,
                history_size=self.history_size,
                retained=len(self.ring),
                appended_total=self.appended_total,
                evicted_total=self.evicted_total,
                footprint_bytes=self.footprint(),
            )

    def snapshot(self) -> list[StreamElement]:
        with self.lock:
            return list(self.ring)

    def close(self) -> None:
        with self.lock:
            if self._writer is not None:
                self._writer.close()
                self._writer = None

    def destroy(self) -> None:
        with self.lock:
            self.close()
            for _, path in self._existing_segments():
                path.unlink(missing_ok=True)


class HistoryStore:
    """All sensor tables of one node, rooted at a journal directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._tables: dict[str, _SensorTable] = {}
        self._lock = RLock()

    def create_table(
        self,
        sensor: str,
        fields: list[FieldSpec],
        history_size: int = DEFAULT_HISTORY_SIZE,
        reset: bool = False,
    ) -> None:
        """Create (or recover) the table for ``sensor``. ``reset`` wipes any
        persisted history first."""
        with self._lock:
            existing = self._tables.pop(sensor, None)
            if existing is not None:
                if reset:
                    existing.destroy()
                else:
                    existing.close()
            elif reset:
                _SensorTable(self.root, sensor, fields, history_size).destroy()
            self._tables[sensor] = _SensorTable(self.root, sensor, fields, history_size)

    def has_table(self, sensor: str) -> bool:
        with self._lock:
            return sensor in self._tables

    def table_names(self) -> list[str]:
        with self._lock:
            return sorted(self._tables)

    def output_fields(self, sensor: str) -> list[FieldSpec]:
        return list(self._table(sensor).fields)

    def _table(self, sensor: str) -> _SensorTable:
        with self._lock:
            table = self._tables.get(sensor)
        if table is None:
            raise not_found(f"no storage table for sensor {sensor!r}")
        return table

    def append(self, sensor: str, element: StreamElement) -> None:
        self._table(sensor).append(element)

    def latest(self, sensor: str) -> StreamElement | None:
        return self._table(sensor).latest()

    def range(self, sensor: str, from_ts: int, to_ts: int) -> list[StreamElement]:
        return self._table(sensor).range(from_ts, to_ts)

    def footprint(self, sensor: str | None = None) -> int:
        """Persisted bytes attributable to one sensor, or to the whole store."""
        if sensor is not None:
            return self._table(sensor).footprint()
        with self._lock:
            tables = list(self._tables.values())
        return sum(t.footprint() for t in tables)

    def stats(self, sensor: str | None = None) -> list[TableStats]:
        if sensor is not None:
            return [self._table(sensor).stats()]
        with self._lock:
            tables = list(self._tables.values())
        return sorted((t.stats() for t in tables), key=lambda s: s.sensor)

    def snapshot(self, sensor: str) -> list[StreamElement]:
        return self._table(sensor).snapshot()

    def drop_table(self, sensor: str) -> None:
        with self._lock:
            table = self._tables.pop(sensor, None)
        if table is None:
            raise not_found(f"no storage table for sensor {sensor!r}")
        table.destroy()

    def close(self) -> None:
        with self._lock:
            tables = list(self._tables.values())
            self._tables.clear()
        for t in tables:
            t.close()
