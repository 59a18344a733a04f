"""Wire payloads and the total EngineError-to-HTTP-status mapping."""
from __future__ import annotations

import json

from ..core import EngineError, ErrorKind, StreamElement, canonical_json, invalid_query

# Every error kind maps to exactly one status (documented in
# docs/wire-format.md). PluginFailure is a server-side fault: 500.
STATUS_BY_KIND: dict[ErrorKind, int] = {
    ErrorKind.NOT_FOUND: 404,
    ErrorKind.CONFLICT: 409,
    ErrorKind.INVALID_QUERY: 400,
    ErrorKind.INVALID_DESCRIPTOR: 400,
    ErrorKind.PLUGIN_FAILURE: 500,
    ErrorKind.PEER_UNREACHABLE: 502,
    ErrorKind.BUFFER_OVERFLOW: 507,
    ErrorKind.SHUTDOWN: 503,
}

_KIND_BY_STATUS = {
    404: ErrorKind.NOT_FOUND,
    409: ErrorKind.CONFLICT,
    400: ErrorKind.INVALID_QUERY,
    500: ErrorKind.PLUGIN_FAILURE,
    502: ErrorKind.PEER_UNREACHABLE,
    507: ErrorKind.BUFFER_OVERFLOW,
    503: ErrorKind.SHUTDOWN,
}


def kind_for_status(status: int) -> ErrorKind:
    return _KIND_BY_STATUS.get(status, ErrorKind.PEER_UNREACHABLE)


def encode_error(exc: EngineError) -> bytes:
    return canonical_json({"error": {"kind": exc.kind.value, "detail": exc.detail}})


def error_from_body(status: int, body: bytes) -> EngineError:
    try:
        obj = json.loads(body.decode("utf-8"))
        err = obj["error"]
        kind = ErrorKind(err["kind"])
        detail = err["detail"]
    except Exception:
        kind = kind_for_status(status)
        detail = f"HTTP {status}: {body[:200]!r}"
    return EngineError(kind, detail)


def encode_obj(obj) -> bytes:
    return canonical_json(obj)


def decode_obj(body: bytes):
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise invalid_query(f"malformed JSON body: {exc}") from None


def elements_to_obj(elements: list[StreamElement]) -> dict:
    return {"elements": [el.to_obj() for el in elements]}


def elements_from_obj(obj) -> list[StreamElement]:
    if not isinstance(obj, dict) or not isinstance(obj.get("elements"), list):
        raise invalid_query("expected an object with an 'elements' array")
    return [StreamElement.from_obj(e) for e in obj["elements"]]
