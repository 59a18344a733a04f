"""Virtual sensors: configuration, lifecycle, and the per-sensor sampling loop.

A virtual sensor binds one plugin to a processor chain, a sampling interval,
and a bounded history. Its loop runs on its own thread with fixed-rate ticks
anchored to the loop start; missed ticks are skipped, never bunched.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .core import (
    Clock,
    EngineError,
    ErrorKind,
    FieldSpec,
    SYSTEM_CLOCK,
    StreamElement,
    conflict,
    invalid_descriptor,
    not_found,
    plugin_failure,
    validate_identifier,
)
from .plugins import PluginDescriptor, PluginHandle, open_plugin, sample
from .processors import (
    ProcessorSpec,
    chain_output_fields,
    process,
    processor_from_obj,
    required_window,
)
from .storage import DEFAULT_HISTORY_SIZE, HistoryStore

log = logging.getLogger(__name__)

VSENSOR_SUFFIX = ".vsensor"
VSENSOR_FORMAT_VERSION = 1

AppendListener = Callable[[str, StreamElement], None]


@dataclass(frozen=True)
class VirtualSensorConfig:
    name: str
    plugin_id: str
    sampling_interval_ms: int = 1000
    processors: tuple[ProcessorSpec, ...] = ()
    history_size: int = DEFAULT_HISTORY_SIZE

    def __post_init__(self):
        validate_identifier(self.name, "sensor name")
        if self.sampling_interval_ms < 1:
            raise invalid_descriptor("sampling_interval_ms must be >= 1")
        if self.history_size < 1:
            raise invalid_descriptor("history_size must be >= 1")

    def to_obj(self) -> dict:
        return {
            "format_version": VSENSOR_FORMAT_VERSION,
            "name": self.name,
            "plugin_id": self.plugin_id,
            "sampling_interval_ms": self.sampling_interval_ms,
            "history_size": self.history_size,
            "processors": [p.to_obj() for p in self.processors],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "VirtualSensorConfig":
        if not isinstance(obj, dict):
            raise invalid_descriptor("virtual sensor config must be a JSON object")
        version = obj.get("format_version")
        if version != VSENSOR_FORMAT_VERSION:
            raise invalid_descriptor(
                f"format_version: expected {VSENSOR_FORMAT_VERSION}, got {version!r}"
            )
        for key in ("name", "plugin_id"):
            if key not in obj:
                raise invalid_descriptor(f"missing required field {key!r}")
        processors = obj.get("processors", [])
        if not isinstance(processors, list):
            raise invalid_descriptor("processors: must be an array")
        chain = tuple(processor_from_obj(p) for p in processors)
        try:
            interval = int(obj.get("sampling_interval_ms", 1000))
            history = int(obj.get("history_size", DEFAULT_HISTORY_SIZE))
        except (TypeError, ValueError) as exc:
            raise invalid_descriptor(str(exc)) from None
        return cls(
            name=obj["name"],
            plugin_id=obj["plugin_id"],
            sampling_interval_ms=interval,
            processors=chain,
            history_size=history,
        )


class Lifecycle(Enum):
    INSTANTIATED = "Instantiated"
    RUNNING = "Running"
    UPDATING = "Updating"
    REMOVED = "Removed"


@dataclass
class SensorCounters:
    samples_taken: int = 0
    processor_drops: int = 0
    plugin_failures: int = 0


@dataclass(frozen=True)
class VirtualSensorState:
    """Point-in-time snapshot of one virtual sensor."""

    config: VirtualSensorConfig
    output: tuple[FieldSpec, ...]
    lifecycle: Lifecycle
    last_element: StreamElement | None
    samples_taken: int
    processor_drops: int
    plugin_failures: int
    plugin_state: str
    last_error: str | None


class _SensorRuntime:
    def __init__(
        self,
        config: VirtualSensorConfig,
        handle: PluginHandle,
        output: list[FieldSpec],
        generation: int,
        counters: SensorCounters,
    ):
        self.config = config
        self.handle = handle
        self.output = output
        self.generation = generation
        self.counters = counters
        self.lifecycle = Lifecycle.INSTANTIATED
        self.last_element: StreamElement | None = None
        self.last_error: str | None = None
        self.stop = threading.Event()
        self.thread: threading.Thread | None = None
        self.raw_window: list[StreamElement] = []
        self.warmup = required_window(list(config.processors))


class Engine:
    """Owns every virtual sensor of a node and its storage writes."""

    def __init__(self, store: HistoryStore, clock: Clock | None = None):
        self.store = store
        self.clock = clock or SYSTEM_CLOCK
        self._plugins: dict[str, PluginDescriptor] = {}
        self._sensors: dict[str, _SensorRuntime] = {}
        self._removed: set[str] = set()
        self._listeners: list[AppendListener] = []
        self._lock = threading.RLock()
        self._generation = 0
        self._closed = False

    # -- plugin catalog --------------------------------------------------

    def register_plugins(self, descriptors) -> None:
        with self._lock:
            for d in descriptors:
                self._plugins[d.plugin_id] = d

    def plugin_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._plugins)

    def plugin(self, plugin_id: str) -> PluginDescriptor:
        with self._lock:
            d = self._plugins.get(plugin_id)
        if d is None:
            raise plugin_failure(f"unknown plugin {plugin_id!r}")
        return d

    def add_append_listener(self, listener: AppendListener) -> None:
        with self._lock:
            self._listeners.append(listener)

    # -- lifecycle ---------------------------------------------------------

    def validate_config(self, config: VirtualSensorConfig) -> list[FieldSpec]:
        """Resolve a config against the plugin catalog; returns the sensor's
        output structure."""
        descriptor = self.plugin(config.plugin_id)
        if config.sampling_interval_ms < descriptor.min_sampling_interval_ms:
            raise invalid_descriptor(
                f"sampling_interval_ms {config.sampling_interval_ms} below plugin "
                f"minimum {descriptor.min_sampling_interval_ms}"
            )
        try:
            return chain_output_fields(list(descriptor.output), list(config.processors))
        except EngineError as exc:
            raise invalid_descriptor(f"processor chain: {exc.detail}") from None

    def instantiate(self, config: VirtualSensorConfig) -> VirtualSensorState:
        with self._lock:
            if self._closed:
                raise EngineError(ErrorKind.SHUTDOWN, "engine is shut down")
            if config.name in self._sensors:
                raise conflict(f"sensor {config.name!r} already exists")
            output = self.validate_config(config)
            handle = open_plugin(self.plugin(config.plugin_id))
            self._generation += 1
            rt = _SensorRuntime(
                config, handle, output, self._generation, SensorCounters()
            )
            self.store.create_table(config.name, output, config.history_size)
            self._sensors[config.name] = rt
            self._removed.discard(config.name)
            self._start(rt)
            return self._snapshot(rt)

    def update(self, name: str, new_config: VirtualSensorConfig) -> VirtualSensorState:
        """Stop-then-start under the new config. History is retained when the
        output structure is unchanged, cleared (with counters) otherwise."""
        if new_config.name != name:
            raise invalid_descriptor(
                f"config name {new_config.name!r} does not match sensor {name!r}"
            )
        with self._lock:
            old = self._sensors.get(name)
            if old is None:
                raise not_found(f"no sensor named {name!r}")
            output = self.validate_config(new_config)
            old.lifecycle = Lifecycle.UPDATING
            self._halt(old)
            structure_changed = output != old.output
            handle = open_plugin(self.plugin(new_config.plugin_id))
            counters = SensorCounters() if structure_changed else old.counters
            self._generation += 1
            rt = _SensorRuntime(new_config, handle, output, self._generation, counters)
            if not structure_changed:
                rt.last_element = old.last_element
            self.store.create_table(
                name, output, new_config.history_size, reset=structure_changed
            )
            self._sensors[name] = rt
            self._start(rt)
            return self._snapshot(rt)

    def remove(self, name: str) -> None:
        """Stop the loop and mark the sensor Removed. Its storage table stays
        queryable until dropped explicitly."""
        with self._lock:
            rt = self._sensors.pop(name, None)
            if rt is None:
                raise not_found(f"no sensor named {name!r}")
            self._removed.add(name)
        self._halt(rt)
        rt.lifecycle = Lifecycle.REMOVED

    def sensor_names(self) -> list[str]:
        with self._lock:
            return sorted(self._sensors)

    def state(self, name: str) -> VirtualSensorState:
        with self._lock:
            rt = self._sensors.get(name)
            if rt is None:
                raise not_found(f"no sensor named {name!r}")
            return self._snapshot(rt)

    def states(self) -> list[VirtualSensorState]:
        with self._lock:
            return [self._snapshot(rt) for _, rt in sorted(self._sensors.items())]

    def output_fields(self, name: str) -> list[FieldSpec]:
        with self._lock:
            rt = self._sensors.get(name)
            if rt is None:
                raise not_found(f"no sensor named {name!r}")
            return list(rt.output)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            runtimes = list(self._sensors.values())
            self._sensors.clear()
        for rt in runtimes:
            self._halt(rt)

    # -- sampling loop -------------------------------------------------------

    def _start(self, rt: _SensorRuntime) -> None:
        rt.lifecycle = Lifecycle.RUNNING
        rt.thread = threading.Thread(
            target=self._loop, args=(rt,), name=f"vsensor-{rt.config.name}", daemon=True
        )
        rt.thread.start()

    def _halt(self, rt: _SensorRuntime) -> None:
        rt.stop.set()
        if rt.thread is not None and rt.thread is not threading.current_thread():
            rt.thread.join(timeout=5.0)

    def _loop(self, rt: _SensorRuntime) -> None:
        interval = rt.config.sampling_interval_ms
        start = self.clock.now_ms()
        tick = 0
        while not rt.stop.is_set():
            target = start + tick * interval
            now = self.clock.now_ms()
            if target > now:
                if rt.stop.wait((target - now) / 1000.0):
                    break
            self._tick(rt)
            now = self.clock.now_ms()
            # Fixed-rate schedule: skip ticks we are too late for.
            tick = max(tick + 1, (now - start) // interval + 1)

    def _tick(self, rt: _SensorRuntime) -> None:
        now = self.clock.now_ms()
        try:
            raw = sample(rt.handle, now)
        except EngineError as exc:
            rt.counters.plugin_failures += 1
            rt.last_error = exc.detail
            return
        rt.counters.samples_taken += 1
        rt.raw_window.append(raw)
        if len(rt.raw_window) > rt.warmup:
            rt.raw_window = rt.raw_window[-rt.warmup :]
        if len(rt.raw_window) < rt.warmup:
            return
        descriptor_fields = list(self.plugin(rt.config.plugin_id).output)
        try:
            out = process(list(rt.config.processors), rt.raw_window, descriptor_fields)
        except EngineError as exc:
            rt.counters.processor_drops += 1
            rt.last_error = exc.detail
            return
        if out is None:
            rt.counters.processor_drops += 1
            return
        if rt.stop.is_set():
            return  # stale tick from a halted generation
        rt.last_element = out
        try:
            self.store.append(rt.config.name, out)
        except EngineError as exc:
            rt.last_error = exc.detail
            return
        for listener in list(self._listeners):
            try:
                listener(rt.config.name, out)
            except Exception:
                log.exception("append listener failed for %s", rt.config.name)

    def _snapshot(self, rt: _SensorRuntime) -> VirtualSensorState:
        return VirtualSensorState(
            config=rt.config,
            output=tuple(rt.output),
            lifecycle=rt.lifecycle,
            last_element=rt.last_element,
            samples_taken=rt.counters.samples_taken,
            processor_drops=rt.counters.processor_drops,
            plugin_failures=rt.counters.plugin_failures,
            plugin_state=rt.handle.state.value,
            last_error=rt.last_error,
        )
