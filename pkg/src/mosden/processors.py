"""Processor chain: fixed vocabulary of record transforms run per sample.

Each processor consumes a sliding window of elements and yields at most one
element. Chains compose by feeding each processor's output stream, windowed,
into the next one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .core import (
    FieldKind,
    FieldSpec,
    StreamElement,
    invalid_descriptor,
    invalid_query,
)

# Decibel level reported for an all-zero window instead of -inf.
SILENCE_FLOOR_DB = -120.0


@dataclass(frozen=True)
class Identity:
    """Pass the newest element through unchanged."""

    window: int = 1

    def output_fields(self, fields: list[FieldSpec]) -> list[FieldSpec]:
        return list(fields)

    def apply(self, window: list[StreamElement], fields: list[FieldSpec]) -> StreamElement | None:
        return window[-1]

    def to_obj(self) -> dict:
        return {"kind": "identity"}


@dataclass(frozen=True)
class NoiseLevelDb:
    """Sound level in dB relative to ``reference``: 20*log10(rms/reference),
    with the RMS taken over the window of the first (numeric) field."""

    reference: float = 1.0
    window: int = 1
    field_name: str = "level_db"

    def __post_init__(self):
        if self.reference <= 0:
            raise invalid_descriptor("noise_level_db: reference must be > 0")
        if self.window < 1:
            raise invalid_descriptor("noise_level_db: window must be >= 1")

    def output_fields(self, fields: list[FieldSpec]) -> list[FieldSpec]:
        if not fields or fields[0].kind is not FieldKind.NUMERIC:
            raise invalid_query("noise_level_db: first input field must be numeric")
        return [FieldSpec(name=self.field_name, kind=FieldKind.NUMERIC, unit="dB")]

    def apply(self, window: list[StreamElement], fields: list[FieldSpec]) -> StreamElement | None:
        self.output_fields(fields)
        total = 0.0
        for el in window:
            v = el.values[0]
            total += v * v  # type: ignore[operator]
        rms = math.sqrt(total / len(window))
        if rms == 0.0:
            level = SILENCE_FLOOR_DB
        else:
            level = 20.0 * math.log10(rms / self.reference)
        return StreamElement(timestamp=window[-1].timestamp, values=(level,))

    def to_obj(self) -> dict:
        return {"kind": "noise_level_db", "reference": self.reference, "window": self.window}


@dataclass(frozen=True)
class MovingAverage:
    """Arithmetic mean of each numeric field over the window; text fields
    carry the newest value."""

    window: int = 1

    def __post_init__(self):
        if self.window < 1:
            raise invalid_descriptor("moving_average: window must be >= 1")

    def output_fields(self, fields: list[FieldSpec]) -> list[FieldSpec]:
        return list(fields)

    def apply(self, window: list[StreamElement], fields: list[FieldSpec]) -> StreamElement | None:
        newest = window[-1]
        values = []
        for i, f in enumerate(fields):
            if f.kind is FieldKind.NUMERIC:
                values.append(sum(el.values[i] for el in window) / len(window))
            else:
                values.append(newest.values[i])
        return StreamElement(timestamp=newest.timestamp, values=tuple(values))

    def to_obj(self) -> dict:
        return {"kind": "moving_average", "window": self.window}


@dataclass(frozen=True)
class Threshold:
    """Keep the newest element only when ``field`` falls inside [min, max]."""

    field: str
    min: float
    max: float
    window: int = 1

    def output_fields(self, fields: list[FieldSpec]) -> list[FieldSpec]:
        _numeric_field_index(fields, self.field, "threshold")
        return list(fields)

    def apply(self, window: list[StreamElement], fields: list[FieldSpec]) -> StreamElement | None:
        idx = _numeric_field_index(fields, self.field, "threshold")
        newest = window[-1]
        v = newest.values[idx]
        if self.min <= v <= self.max:  # type: ignore[operator]
            return newest
        return None

    def to_obj(self) -> dict:
        return {"kind": "threshold", "field": self.field, "min": self.min, "max": self.max}


@dataclass(frozen=True)
class Scale:
    """Multiply ``field`` of the newest element by ``factor``."""

    field: str
    factor: float
    window: int = 1

    def output_fields(self, fields: list[FieldSpec]) -> list[FieldSpec]:
        _numeric_field_index(fields, self.field, "scale")
        return list(fields)

    def apply(self, window: list[StreamElement], fields: list[FieldSpec]) -> StreamElement | None:
        idx = _numeric_field_index(fields, self.field, "scale")
        newest = window[-1]
        values = list(newest.values)
        values[idx] = values[idx] * self.factor  # type: ignore[operator]
        return StreamElement(timestamp=newest.timestamp, values=tuple(values))

    def to_obj(self) -> dict:
        return {"kind": "scale", "field": self.field, "factor": self.factor}


ProcessorSpec = Identity | NoiseLevelDb | MovingAverage | Threshold | Scale


def _numeric_field_index(fields: list[FieldSpec], name: str, who: str) -> int:
    for i, f in enumerate(fields):
        if f.name == name:
            if f.kind is not FieldKind.NUMERIC:
                raise invalid_query(f"{who}: field {name!r} is not numeric")
            return i
    raise invalid_query(f"{who}: no field named {name!r}")


def processor_from_obj(obj: dict) -> ProcessorSpec:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise invalid_descriptor(f"processor must be an object with 'kind': {obj!r}")
    kind = obj["kind"]
    try:
        if kind == "identity":
            return Identity()
        if kind == "noise_level_db":
            return NoiseLevelDb(
                reference=float(obj.get("reference", 1.0)),
                window=int(obj.get("window", 1)),
            )
        if kind == "moving_average":
            return MovingAverage(window=int(obj.get("window", 1)))
        if kind == "threshold":
            return Threshold(
                field=obj["field"], min=float(obj["min"]), max=float(obj["max"])
            )
        if kind == "scale":
            return Scale(field=obj["field"], factor=float(obj["factor"]))
    except KeyError as exc:
        raise invalid_descriptor(f"processor {kind!r}: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise invalid_descriptor(f"processor {kind!r}: {exc}") from None
    raise invalid_descriptor(f"unknown processor kind {kind!r}")


def chain_output_fields(
    input_fields: list[FieldSpec], chain: list[ProcessorSpec]
) -> list[FieldSpec]:
    """Output structure of a chain applied to ``input_fields``."""
    fields = list(input_fields)
    for proc in chain:
        fields = proc.output_fields(fields)
    return fields


def required_window(chain: list[ProcessorSpec]) -> int:
    """Input elements needed before a chain can produce its first output,
    assuming no elements are dropped along the way."""
    return 1 + sum(p.window - 1 for p in chain)


def process(
    chain: list[ProcessorSpec],
    window: list[StreamElement],
    input_fields: list[FieldSpec],
) -> StreamElement | None:
    """Run ``chain`` over an input window (oldest first) and return the newest
    resulting element, or None when the newest element was dropped or the
    window is too short to warm the chain up."""
    if not window:
        raise invalid_query("process: window must not be empty")
    for el in window:
        if not el.conforms_to(input_fields):
            raise invalid_query(
                "process: window element does not conform to the input structure"
            )
    seq = list(window)
    fields = list(input_fields)
    for proc in chain:
        w = proc.window
        produced: list[StreamElement] = []
        for i in range(w - 1, len(seq)):
            out = proc.apply(seq[i - w + 1 : i + 1], fields)
            if out is not None:
                produced.append(out)
        fields = proc.output_fields(fields)
        if not produced:
            return None
        seq = produced
    return seq[-1]
