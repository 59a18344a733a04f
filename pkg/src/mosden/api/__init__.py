"""HTTP surface: wire encoding, node server, registry state, peer client."""

from .wire import STATUS_BY_KIND, kind_for_status  # noqa: F401
