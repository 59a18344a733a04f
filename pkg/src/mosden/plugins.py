"""Sensor sources: descriptor files, runtime discovery, builtin simulators.

A plugin descriptor is one JSON document in a ``*.plugin`` file inside a
watched directory (see docs/plugin-format.md). Rescanning the directory picks
up new files without restarting the engine; already-open handles are never
disturbed by a rescan.
"""
from __future__ import annotations

import http.client
import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from .core import (
    EngineError,
    FieldKind,
    FieldSpec,
    StreamElement,
    decode_element,
    invalid_descriptor,
    not_found,
    plugin_failure,
    validate_identifier,
    validate_output_structure,
)

log = logging.getLogger(__name__)

DESCRIPTOR_SUFFIX = ".plugin"
FORMAT_VERSION = 1

# A source is marked Failed after this many consecutive sample failures.
FAILURE_THRESHOLD = 5


@dataclass(frozen=True)
class BuiltinSource:
    name: str
    parameters: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExternalSource:
    endpoint: str  # host:port speaking GET /sample


@dataclass(frozen=True)
class PluginDescriptor:
    plugin_id: str
    display_name: str
    output: tuple[FieldSpec, ...]
    min_sampling_interval_ms: int
    source: BuiltinSource | ExternalSource

    def __post_init__(self):
        validate_identifier(self.plugin_id, "plugin_id")
        validate_output_structure(list(self.output))
        if self.min_sampling_interval_ms < 1:
            raise invalid_descriptor("min_sampling_interval_ms must be >= 1")

    def to_obj(self) -> dict:
        if isinstance(self.source, BuiltinSource):
            src = {
                "type": "builtin",
                "name": self.source.name,
                "parameters": dict(self.source.parameters),
            }
        else:
            src = {"type": "external", "endpoint": self.source.endpoint}
        return {
            "format_version": FORMAT_VERSION,
            "plugin_id": self.plugin_id,
            "display_name": self.display_name,
            "output": [f.to_obj() for f in self.output],
            "min_sampling_interval_ms": self.min_sampling_interval_ms,
            "source": src,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "PluginDescriptor":
        if not isinstance(obj, dict):
            raise invalid_descriptor("descriptor must be a JSON object")
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise invalid_descriptor(
                f"format_version: expected {FORMAT_VERSION}, got {version!r}"
            )
        for key in ("plugin_id", "output", "source"):
            if key not in obj:
                raise invalid_descriptor(f"missing required field {key!r}")
        output = obj["output"]
        if not isinstance(output, list):
            raise invalid_descriptor("output: must be an array of field specs")
        fields = tuple(FieldSpec.from_obj(f) for f in output)
        src_obj = obj["source"]
        if not isinstance(src_obj, dict) or "type" not in src_obj:
            raise invalid_descriptor("source: must be an object with 'type'")
        if src_obj["type"] == "builtin":
            if "name" not in src_obj:
                raise invalid_descriptor("source.name: required for builtin sources")
            params = src_obj.get("parameters", {})
            if not isinstance(params, dict):
                raise invalid_descriptor("source.parameters: must be an object")
            source: BuiltinSource | ExternalSource = BuiltinSource(
                name=src_obj["name"], parameters=params
            )
        elif src_obj["type"] == "external":
            if not src_obj.get("endpoint"):
                raise invalid_descriptor("source.endpoint: required for external sources")
            source = ExternalSource(endpoint=src_obj["endpoint"])
        else:
            raise invalid_descriptor(f"source.type: unknown type {src_obj['type']!r}")
        interval = obj.get("min_sampling_interval_ms", 1)
        if not isinstance(interval, int):
            raise invalid_descriptor("min_sampling_interval_ms: must be an integer")
        return cls(
            plugin_id=obj["plugin_id"],
            display_name=obj.get("display_name", obj["plugin_id"]),
            output=fields,
            min_sampling_interval_ms=interval,
            source=source,
        )


@dataclass(frozen=True)
class DescriptorProblem:
    path: str
    error: str


@dataclass(frozen=True)
class ScanResult:
    descriptors: tuple[PluginDescriptor, ...]
    problems: tuple[DescriptorProblem, ...]


def parse_descriptor_file(path: Path) -> PluginDescriptor:
    import json

    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise invalid_descriptor(f"{path}: unreadable: {exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise invalid_descriptor(f"{path}: not valid JSON: {exc}") from None
    return PluginDescriptor.from_obj(obj)


def scan_plugins(directory: str | Path) -> ScanResult:
    """Discover descriptors under ``directory``; malformed files are reported,
    not fatal. Safe to call repeatedly while handles are open."""
    root = Path(directory)
    if not root.is_dir():
        raise not_found(f"plugin directory {root} does not exist")
    descriptors: list[PluginDescriptor] = []
    problems: list[DescriptorProblem] = []
    seen_ids: set[str] = set()
    for path in sorted(root.glob(f"*{DESCRIPTOR_SUFFIX}")):
        try:
            desc = parse_descriptor_file(path)
        except EngineError as exc:
            problems.append(DescriptorProblem(path=str(path), error=exc.detail))
            continue
        if desc.plugin_id in seen_ids:
            problems.append(
                DescriptorProblem(
                    path=str(path), error=f"duplicate plugin_id {desc.plugin_id!r}"
                )
            )
            continue
        seen_ids.add(desc.plugin_id)
        descriptors.append(desc)
    return ScanResult(descriptors=tuple(descriptors), problems=tuple(problems))


# --- builtin generators -----------------------------------------------------


class _SampleFn:
    """One simulated source: fixed arity, values as a function of time and an
    optional seeded RNG. Each open handle gets its own instance."""

    arity = 1

    def generate(self, at_ms: int) -> tuple[float, ...]:
        raise NotImplementedError


class _Constant(_SampleFn):
    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def generate(self, at_ms: int) -> tuple[float, ...]:
        return (self.value,)


class _SineWave(_SampleFn):
    def __init__(self, amplitude: float = 1.0, period_ms: float = 1000.0, phase: float = 0.0):
        if period_ms <= 0:
            raise invalid_descriptor("sine_wave: period_ms must be > 0")
        self.amplitude = float(amplitude)
        self.period_ms = float(period_ms)
        self.phase = float(phase)

    def generate(self, at_ms: int) -> tuple[float, ...]:
        return (self.amplitude * math.sin(2 * math.pi * at_ms / self.period_ms + self.phase),)


class _GaussianNoise(_SampleFn):
    def __init__(self, mean: float = 0.0, stddev: float = 1.0, seed: int = 0):
        self.mean = float(mean)
        self.stddev = float(stddev)
        self.rng = random.Random(seed)

    def generate(self, at_ms: int) -> tuple[float, ...]:
        return (self.rng.gauss(self.mean, self.stddev),)


class _RandomWalk(_SampleFn):
    def __init__(self, start: float = 0.0, step_stddev: float = 1.0, seed: int = 0):
        self.position = float(start)
        self.step_stddev = float(step_stddev)
        self.rng = random.Random(seed)

    def generate(self, at_ms: int) -> tuple[float, ...]:
        self.position += self.rng.gauss(0.0, self.step_stddev)
        return (self.position,)


class _AccelerometerSim(_SampleFn):
    """Gravity on z plus jitter on all three axes."""

    arity = 3

    def __init__(self, seed: int = 0, noise_stddev: float = 0.05, gravity: float = 9.81):
        self.rng = random.Random(seed)
        self.noise_stddev = float(noise_stddev)
        self.gravity = float(gravity)

    def generate(self, at_ms: int) -> tuple[float, ...]:
        n = self.noise_stddev
        return (
            self.rng.gauss(0.0, n),
            self.rng.gauss(0.0, n),
            self.gravity + self.rng.gauss(0.0, n),
        )


class _MicrophoneSim(_SampleFn):
    """Summary amplitude of a synthetic audio frame: a slow loudness swell
    with additive jitter, clamped positive."""

    def __init__(self, seed: int = 0, base_amplitude: float = 0.1, swell_period_ms: float = 30000.0):
        self.rng = random.Random(seed)
        self.base = float(base_amplitude)
        self.swell_period_ms = float(swell_period_ms)

    def generate(self, at_ms: int) -> tuple[float, ...]:
        swell = 1.0 + 0.5 * math.sin(2 * math.pi * at_ms / self.swell_period_ms)
        return (abs(self.base * swell + self.rng.gauss(0.0, self.base * 0.1)),)


class _LightSim(_SampleFn):
    def __init__(self, seed: int = 0, peak_lux: float = 500.0, period_ms: float = 86_400_000.0):
        self.rng = random.Random(seed)
        self.peak_lux = float(peak_lux)
        self.period_ms = float(period_ms)

    def generate(self, at_ms: int) -> tuple[float, ...]:
        level = self.peak_lux * max(0.0, math.sin(2 * math.pi * at_ms / self.period_ms))
        return (max(0.0, level + self.rng.gauss(0.0, self.peak_lux * 0.01)),)


class _PressureSim(_SampleFn):
    def __init__(self, seed: int = 0, base_hpa: float = 1013.25, step_stddev: float = 0.05):
        self.rng = random.Random(seed)
        self.value = float(base_hpa)
        self.step_stddev = float(step_stddev)

    def generate(self, at_ms: int) -> tuple[float, ...]:
        self.value += self.rng.gauss(0.0, self.step_stddev)
        return (self.value,)


class _ExternalSampler(_SampleFn):
    """Fetches one wire-encoded element from an external plugin endpoint."""

    def __init__(self, endpoint: str, arity: int, timeout_s: float = 5.0):
        self.endpoint = endpoint
        self.arity = arity
        self.timeout_s = timeout_s
        self._conn: http.client.HTTPConnection | None = None

    def _connection(self) -> http.client.HTTPConnection:
        if self._conn is None:
            self._conn = http.client.HTTPConnection(self.endpoint, timeout=self.timeout_s)
        return self._conn

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def generate(self, at_ms: int) -> tuple:
        conn = self._connection()
        try:
            conn.request("GET", "/sample")
            resp = conn.getresponse()
            body = resp.read()
        except (OSError, http.client.HTTPException) as exc:
            self.close()
            raise plugin_failure(f"external plugin {self.endpoint}: {exc}") from None
        if resp.status != 200:
            raise plugin_failure(
                f"external plugin {self.endpoint}: HTTP {resp.status}"
            )
        element = decode_element(body)
        return element.values


_BUILTINS: dict[str, Callable[..., _SampleFn]] = {
    "constant": _Constant,
    "sine_wave": _SineWave,
    "gaussian_noise": _GaussianNoise,
    "random_walk": _RandomWalk,
    "accelerometer_sim": _AccelerometerSim,
    "microphone_sim": _MicrophoneSim,
    "light_sim": _LightSim,
    "pressure_sim": _PressureSim,
}

BUILTIN_NAMES = tuple(sorted(_BUILTINS))


def builtin_arity(name: str) -> int:
    if name not in _BUILTINS:
        raise plugin_failure(f"unknown builtin plugin {name!r}")
    return _BUILTINS[name].arity


class PluginState(Enum):
    DISCOVERED = "Discovered"
    ACTIVE = "Active"
    FAILED = "Failed"
    REMOVED = "Removed"


class PluginHandle:
    """An opened source. Owned by exactly one sampling loop; not safe for
    concurrent sample() calls."""

    def __init__(self, descriptor: PluginDescriptor, sampler: _SampleFn):
        self.descriptor = descriptor
        self.state = PluginState.ACTIVE
        self.last_error: str | None = None
        self.consecutive_failures = 0
        self._sampler = sampler

    def close(self) -> None:
        self.state = PluginState.REMOVED
        closer = getattr(self._sampler, "close", None)
        if closer:
            closer()

    def _record_failure(self, exc: EngineError) -> None:
        self.consecutive_failures += 1
        self.last_error = exc.detail
        if self.consecutive_failures >= FAILURE_THRESHOLD:
            self.state = PluginState.FAILED


def _make_sampler(descriptor: PluginDescriptor) -> _SampleFn:
    if isinstance(descriptor.source, BuiltinSource):
        name = descriptor.source.name
        factory = _BUILTINS.get(name)
        if factory is None:
            raise plugin_failure(f"unknown builtin plugin {name!r}")
        try:
            sampler = factory(**descriptor.source.parameters)
        except TypeError as exc:
            raise plugin_failure(f"builtin {name!r}: bad parameters: {exc}") from None
        expected = sampler.arity
    else:
        expected = len(descriptor.output)
        sampler = _ExternalSampler(descriptor.source.endpoint, arity=expected)
    if len(descriptor.output) != expected:
        raise plugin_failure(
            f"plugin {descriptor.plugin_id!r} declares {len(descriptor.output)} "
            f"output fields but the source produces {expected}"
        )
    return sampler


def open_plugin(descriptor: PluginDescriptor) -> PluginHandle:
    """Instantiate the source behind a descriptor. External sources get a
    probe request so a dead endpoint fails here, not in the sampling loop."""
    sampler = _make_sampler(descriptor)
    if isinstance(sampler, _ExternalSampler):
        sampler.generate(0)  # probe
    return PluginHandle(descriptor, sampler)


def sample(handle: PluginHandle, at: int) -> StreamElement:
    """Take one sample. The element's timestamp is ``at``; values conform to
    the descriptor's output structure."""
    if handle.state is not PluginState.ACTIVE:
        raise plugin_failure(
            f"plugin {handle.descriptor.plugin_id!r} is {handle.state.value}"
        )
    try:
        values = handle._sampler.generate(at)
    except EngineError as exc:
        handle._record_failure(exc)
        raise
    except Exception as exc:  # defensive: any source bug becomes PluginFailure
        err = plugin_failure(f"plugin {handle.descriptor.plugin_id!r}: {exc}")
        handle._record_failure(err)
        raise err from exc
    try:
        element = StreamElement(timestamp=at, values=tuple(values))
    except Exception as exc:  # non-iterable or non-numeric source output
        err = plugin_failure(
            f"plugin {handle.descriptor.plugin_id!r} produced malformed values: {exc}"
        )
        handle._record_failure(err)
        raise err from exc
    if not element.conforms_to(list(handle.descriptor.output)):
        err = plugin_failure(
            f"plugin {handle.descriptor.plugin_id!r} produced a record that does "
            f"not conform to its declared output"
        )
        handle._record_failure(err)
        raise err
    handle.consecutive_failures = 0
    handle.last_error = None
    return element


def builtin_descriptor(
    plugin_id: str,
    builtin: str,
    parameters: dict | None = None,
    field_names: list[str] | None = None,
    unit: str = "",
    min_sampling_interval_ms: int = 1,
) -> PluginDescriptor:
    """Convenience constructor for a builtin-backed descriptor with default
    field naming (value / x,y,z)."""
    arity = builtin_arity(builtin)
    if field_names is None:
        field_names = ["x", "y", "z"][:arity] if arity == 3 else (
            ["value"] if arity == 1 else [f"v{i}" for i in range(arity)]
        )
    if len(field_names) != arity:
        raise invalid_descriptor(
            f"builtin {builtin!r} produces {arity} fields, got {len(field_names)} names"
        )
    output = tuple(FieldSpec(name=n, kind=FieldKind.NUMERIC, unit=unit) for n in field_names)
    return PluginDescriptor(
        plugin_id=plugin_id,
        display_name=plugin_id,
        output=output,
        min_sampling_interval_ms=min_sampling_interval_ms,
        source=BuiltinSource(name=builtin, parameters=dict(parameters or {})),
    )
