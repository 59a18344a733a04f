"""Peer data sharing: query resolution, subscriptions, buffered delivery.

Two delivery modes exist. Restful subscriptions buffer elements until the
peer pulls them over a held session (the API layer owns the socket). Push
subscriptions run a delivery loop that sends batched elements to the peer's
callback endpoint on a fresh connection per delivery, buffering across
disconnections and retrying with capped exponential backoff.
"""
from __future__ import annotations

import logging
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Protocol

from .core import (
    Clock,
    EngineError,
    SYSTEM_CLOCK,
    StreamElement,
    conflict,
    invalid_query,
    not_found,
)

log = logging.getLogger(__name__)

DEFAULT_BUFFER_CAPACITY = 1000

BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 32.0
BACKOFF_JITTER = 0.25  # +/- fraction applied to each delay


class DeliveryMode(Enum):
    RESTFUL = "restful"
    PUSH = "push"


class SubscriptionState(Enum):
    ACTIVE = "Active"
    DISCONNECTED = "Disconnected"
    CANCELLED = "Cancelled"


@dataclass(frozen=True)
class DeliveryOutcome:
    """Result of one delivery tick: elements delivered now, elements still
    pending, and total elements dropped to overflow so far."""

    delivered: int
    buffered: int
    dropped: int


class PushTransport(Protocol):
    def __call__(self, peer: str, subscription_id: str, elements: list[StreamElement]) -> None:
        """Deliver a batch to ``peer``; raise EngineError(PeerUnreachable) on failure."""


class _PendingQueue:
    """Bounded FIFO with blocking pop; overflow drops the oldest."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque[StreamElement] = deque()
        self._cond = threading.Condition()
        self.enqueued = 0
        self.dropped = 0
        self.closed = False

    def push(self, element: StreamElement) -> None:
        with self._cond:
            if self.closed:
                return
            self._items.append(element)
            self.enqueued += 1
            while len(self._items) > self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._cond.notify_all()

    def pop(self, timeout_s: float) -> StreamElement | None:
        end = time.monotonic() + timeout_s
        with self._cond:
            while not self._items and not self.closed:
                remaining = end - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(timeout=remaining)
            if self._items:
                return self._items.popleft()
            return None

    def peek_all(self) -> list[StreamElement]:
        with self._cond:
            return list(self._items)

    def remove_through(self, timestamp: int) -> int:
        """Drop head elements with ts <= timestamp (already delivered)."""
        n = 0
        with self._cond:
            while self._items and self._items[0].timestamp <= timestamp:
                self._items.popleft()
                n += 1
        return n

    def size(self) -> int:
        with self._cond:
            return len(self._items)

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._items.clear()
            self._cond.notify_all()


class Subscription:
    """One peer's registered interest in one sensor."""

    def __init__(
        self,
        sub_id: str,
        peer: str,
        sensor: str,
        mode: DeliveryMode,
        delivery_interval_ms: int,
        buffer_capacity: int,
    ):
        self.id = sub_id
        self.peer = peer
        self.sensor = sensor
        self.mode = mode
        self.delivery_interval_ms = delivery_interval_ms
        self.state = SubscriptionState.ACTIVE
        self.pending = _PendingQueue(buffer_capacity)
        self.delivered = 0
        self.reconnects = 0
        self.last_delivered_ts = -1
        self.next_attempt_ms = 0  # push-mode backoff gate
        self.consecutive_failures = 0
        self.lock = threading.Lock()

    @property
    def dropped(self) -> int:
        return self.pending.dropped

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "peer": self.peer,
            "sensor": self.sensor,
            "mode": self.mode.value,
            "delivery_interval_ms": self.delivery_interval_ms,
            "state": self.state.value,
            "delivered": self.delivered,
            "dropped": self.dropped,
            "enqueued": self.pending.enqueued,
            "pending": self.pending.size(),
            "reconnects": self.reconnects,
        }


# --- queries ------------------------------------------------------------


@dataclass(frozen=True)
class Latest:
    pass


@dataclass(frozen=True)
class Range:
    from_ts: int
    to_ts: int

    def __post_init__(self):
        if self.from_ts > self.to_ts:
            raise invalid_query(f"range: from ({self.from_ts}) > to ({self.to_ts})")


@dataclass(frozen=True)
class SensorList:
    pass


QueryKind = Latest | Range | SensorList


@dataclass(frozen=True)
class QueryRequest:
    id: str
    kind: QueryKind
    sensor: str | None = None
    origin: str | None = None


def resolve_query(engine, store, query: QueryRequest):
    """Answer an external query against the local engine and storage.

    Latest/Range need a target sensor; SensorList returns every non-removed
    sensor name with its output structure.
    """
    kind = query.kind
    if isinstance(kind, SensorList):
        return [
            {"name": st.config.name, "output": [f.to_obj() for f in st.output]}
            for st in engine.states()
        ]
    if not query.sensor:
        raise invalid_query("query needs a target sensor")
    if isinstance(kind, Latest):
        return store.latest(query.sensor)
    if isinstance(kind, Range):
        return store.range(query.sensor, kind.from_ts, kind.to_ts)
    raise invalid_query(f"unknown query kind {kind!r}")


# --- subscription manager -------------------------------------------------


class SubscriptionManager:
    """Service-manager side of sharing: registers subscriptions, feeds them
    from storage appends, and drives push deliveries."""

    def __init__(
        self,
        sensor_exists: Callable[[str], bool],
        push_transport: PushTransport | None = None,
        clock: Clock | None = None,
        buffer_capacity: int = DEFAULT_BUFFER_CAPACITY,
        auto_deliver: bool = True,
        rng: random.Random | None = None,
    ):
        self._sensor_exists = sensor_exists
        self._transport = push_transport
        self.clock = clock or SYSTEM_CLOCK
        self.buffer_capacity = buffer_capacity
        self.auto_deliver = auto_deliver
        self._rng = rng or random.Random()
        self._subs: dict[str, Subscription] = {}
        self._by_sensor: dict[str, list[Subscription]] = {}
        self._threads: dict[str, threading.Thread] = {}
        self._stops: dict[str, threading.Event] = {}
        self._lock = threading.RLock()
        self._seq = 0
        self._closed = False

    # -- feed (engine append listener) ----------------------------------

    def on_append(self, sensor: str, element: StreamElement) -> None:
        with self._lock:
            subs = list(self._by_sensor.get(sensor, ()))
        for sub in subs:
            if sub.state is not SubscriptionState.CANCELLED:
                sub.pending.push(element)

    # -- lifecycle ---------------------------------------------------------

    def subscribe(
        self,
        peer: str,
        sensor: str,
        mode: DeliveryMode,
        delivery_interval_ms: int,
        buffer_capacity: int | None = None,
    ) -> Subscription:
        if delivery_interval_ms < 1:
            raise invalid_query("delivery_interval_ms must be >= 1")
        if not self._sensor_exists(sensor):
            raise not_found(f"no sensor named {sensor!r}")
        with self._lock:
            if self._closed:
                raise not_found("subscription manager is closed")
            for sub in self._subs.values():
                if (
                    sub.state is not SubscriptionState.CANCELLED
                    and sub.peer == peer
                    and sub.sensor == sensor
                    and sub.mode == mode
                ):
                    raise conflict(
                        f"duplicate subscription: {peer} -> {sensor} ({mode.value})"
                    )
            self._seq += 1
            sub_id = f"sub-{self._seq:05d}-{self._rng.randrange(16**4):04x}"
            sub = Subscription(
                sub_id,
                peer,
                sensor,
                mode,
                delivery_interval_ms,
                buffer_capacity or self.buffer_capacity,
            )
            self._subs[sub_id] = sub
            self._by_sensor.setdefault(sensor, []).append(sub)
            if mode is DeliveryMode.PUSH and self.auto_deliver:
                self._start_push_loop(sub)
            return sub

    def get(self, sub_id: str) -> Subscription:
        with self._lock:
            sub = self._subs.get(sub_id)
        if sub is None:
            raise not_found(f"no subscription {sub_id!r}")
        return sub

    def list(self) -> list[Subscription]:
        with self._lock:
            return sorted(self._subs.values(), key=lambda s: s.id)

    def cancel(self, sub_id: str) -> None:
        """Cancelled subscriptions never deliver: the pending buffer is
        discarded, held pulls wake up, and the push loop stops."""
        with self._lock:
            sub = self._subs.pop(sub_id, None)
            if sub is None:
                raise not_found(f"no subscription {sub_id!r}")
            peers = self._by_sensor.get(sub.sensor)
            if peers and sub in peers:
                peers.remove(sub)
            stop = self._stops.pop(sub_id, None)
            thread = self._threads.pop(sub_id, None)
        sub.state = SubscriptionState.CANCELLED
        sub.pending.close()
        if stop is not None:
            stop.set()
        if thread is not None and thread is not threading.current_thread():
            thread.join(timeout=5.0)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            ids = list(self._subs)
        for sub_id in ids:
            try:
                self.cancel(sub_id)
            except EngineError:
                pass

    # -- restful pull ------------------------------------------------------

    def pull(self, sub_id: str, timeout_ms: int) -> tuple[StreamElement | None, int]:
        """Blocking pull of the next undelivered element; returns
        (element_or_None, still_pending). None means heartbeat."""
        sub = self.get(sub_id)
        if sub.mode is not DeliveryMode.RESTFUL:
            raise invalid_query(f"subscription {sub_id!r} is not restful")
        deadline = self.clock.now_ms() + timeout_ms
        while True:
            remaining = deadline - self.clock.now_ms()
            if remaining <= 0:
                return None, sub.pending.size()
            element = sub.pending.pop(timeout_s=remaining / 1000.0)
            if element is None:
                return None, sub.pending.size()
            with sub.lock:
                if element.timestamp <= sub.last_delivered_ts:
                    continue  # stale duplicate
                sub.last_delivered_ts = element.timestamp
                sub.delivered += 1
            return element, sub.pending.size()

    # -- push delivery -----------------------------------------------------

    def deliver_tick(self, sub_id: str, at: int | None = None) -> DeliveryOutcome:
        """One push delivery attempt: pending buffer first, newest last, all
        in one batch on one connection. Failures buffer instead of raising."""
        sub = self.get(sub_id)
        if sub.state is SubscriptionState.CANCELLED:
            raise not_found(f"subscription {sub_id!r} is cancelled")
        if sub.mode is not DeliveryMode.PUSH:
            raise invalid_query(f"subscription {sub_id!r} is not push-mode")
        now = self.clock.now_ms() if at is None else at
        with sub.lock:
            last_ts = sub.last_delivered_ts
        batch = [el for el in sub.pending.peek_all() if el.timestamp > last_ts]
        if not batch:
            return DeliveryOutcome(0, sub.pending.size(), sub.dropped)
        if sub.state is SubscriptionState.DISCONNECTED and now < sub.next_attempt_ms:
            return DeliveryOutcome(0, sub.pending.size(), sub.dropped)
        if self._transport is None:
            raise invalid_query("no push transport configured")
        try:
            self._transport(sub.peer, sub.id, batch)
        except EngineError as exc:
            with sub.lock:
                sub.state = SubscriptionState.DISCONNECTED
                sub.consecutive_failures += 1
                delay_s = min(
                    BACKOFF_CAP_S, BACKOFF_BASE_S * 2 ** (sub.consecutive_failures - 1)
                )
                delay_s *= 1.0 + self._rng.uniform(-BACKOFF_JITTER, BACKOFF_JITTER)
                sub.next_attempt_ms = now + int(delay_s * 1000)
            log.debug("push to %s failed (%s); backing off", sub.peer, exc.detail)
            return DeliveryOutcome(0, sub.pending.size(), sub.dropped)
        with sub.lock:
            if sub.state is SubscriptionState.DISCONNECTED:
                sub.reconnects += 1
            sub.state = SubscriptionState.ACTIVE
            sub.consecutive_failures = 0
            sub.next_attempt_ms = 0
            sub.last_delivered_ts = batch[-1].timestamp
            sub.delivered += len(batch)
        sub.pending.remove_through(batch[-1].timestamp)
        return DeliveryOutcome(len(batch), sub.pending.size(), sub.dropped)

    def _start_push_loop(self, sub: Subscription) -> None:
        stop = threading.Event()
        thread = threading.Thread(
            target=self._push_loop, args=(sub, stop), name=f"push-{sub.id}", daemon=True
        )
        self._stops[sub.id] = stop
        self._threads[sub.id] = thread
        thread.start()

    def _push_loop(self, sub: Subscription, stop: threading.Event) -> None:
        interval = sub.delivery_interval_ms
        start = self.clock.now_ms()
        tick = 0
        while not stop.is_set():
            target = start + tick * interval
            now = self.clock.now_ms()
            if target > now:
                if stop.wait((target - now) / 1000.0):
                    break
            try:
                self.deliver_tick(sub.id)
            except EngineError:
                break  # cancelled under us
            now = self.clock.now_ms()
            tick = max(tick + 1, (now - start) // interval + 1)
