"""Node configuration: defaults, config file, environment, flags.

Precedence, lowest to highest: built-in defaults, then the optional JSON
config file, then ``MOSDEN_*`` environment variables, then command-line
flags. The resolved result is a plain dataclass that `config show` can print
before anything starts.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .core import invalid_query

ENV_PREFIX = "MOSDEN_"


@dataclass
class NodeConfig:
    host: str = "127.0.0.1"
    # Port 0 binds an ephemeral port; the chosen one is announced on stdout.
    port: int = 0
    node_id: str = ""
    plugins_dir: str = ""
    vsensors_dir: str = ""
    data_dir: str = "mosden-data"
    registry: str = ""  # host:port of the registry service, empty = standalone
    group_tag: str = ""
    log_level: str = "INFO"
    history_size: int = 100
    buffer_capacity: int = 1000
    ttl_s: int = 30
    refresh_s: int = 10
    # Constrained-role knobs: concurrent admission workers and per-connection
    # setup delay; 0/0 means unconstrained. admission_timeout_ms bounds how
    # long a new connection may wait for a worker before being dropped.
    admission_workers: int = 0
    admission_delay_ms: int = 0
    admission_timeout_ms: int = 0

    def __post_init__(self):
        if not self.node_id:
            self.node_id = f"node-{os.getpid()}"
        if not (0 <= self.port <= 65535):
            raise invalid_query(f"port must be in [0, 65535], got {self.port}")
        for name in ("history_size", "buffer_capacity", "ttl_s", "refresh_s"):
            if getattr(self, name) < 1:
                raise invalid_query(f"{name} must be >= 1")
        for name in ("admission_workers", "admission_delay_ms", "admission_timeout_ms"):
            if getattr(self, name) < 0:
                raise invalid_query(f"{name} must be >= 0")

    def to_obj(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_INT_FIELDS = {f.name for f in fields(NodeConfig) if f.type in ("int", int)}
_FIELD_NAMES = {f.name for f in fields(NodeConfig)}


def _coerce(name: str, raw, origin: str):
    if name in _INT_FIELDS:
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise invalid_query(f"{origin}: {name} must be an integer, got {raw!r}")
    if not isinstance(raw, str):
        raise invalid_query(f"{origin}: {name} must be a string, got {raw!r}")
    return raw


def _load_file(path: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise invalid_query(f"config file {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise invalid_query(f"config file {path}: not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise invalid_query(f"config file {path}: must be a JSON object")
    out = {}
    for key, value in obj.items():
        if key not in _FIELD_NAMES:
            raise invalid_query(f"config file {path}: unknown key {key!r}")
        out[key] = _coerce(key, value, f"config file {path}")
    return out


def _load_env(env: Mapping[str, str]) -> dict:
    out = {}
    for name in _FIELD_NAMES:
        raw = env.get(ENV_PREFIX + name.upper())
        if raw is not None:
            out[name] = _coerce(name, raw, f"environment {ENV_PREFIX}{name.upper()}")
    return out


def resolve_config(
    flags: Mapping[str, object] | None = None,
    env: Mapping[str, str] | None = None,
    config_file: str | None = None,
) -> NodeConfig:
    """Merge flags > environment > file > defaults into a NodeConfig.

    ``flags`` entries with value None are treated as not-given.
    """
    merged: dict = {}
    if config_file:
        merged.update(_load_file(config_file))
    merged.update(_load_env(env if env is not None else os.environ))
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in _FIELD_NAMES:
            raise invalid_query(f"unknown config flag {key!r}")
        merged[key] = _coerce(key, value, "flag")
    return NodeConfig(**merged)
