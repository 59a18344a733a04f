"""Shared fixtures: in-process nodes, element builders, port helpers."""
import socket
from pathlib import Path

import pytest

from mosden.config import NodeConfig
from mosden.core import FakeClock, StreamElement
from mosden.node import Node


def make_element(ts: int, *values) -> StreamElement:
    return StreamElement(timestamp=ts, values=tuple(values))


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock(start_ms=1_000_000)


class NodeFactory:
    """Builds started in-process nodes rooted under tmp_path; stops them all
    at teardown."""

    def __init__(self, root: Path):
        self.root = root
        self.nodes: list[Node] = []

    def __call__(
        self,
        node_id: str,
        serve_registry: bool = False,
        registry: str = "",
        port: int = 0,
        **cfg_kwargs,
    ) -> Node:
        base = self.root / node_id
        plugins = base / "plugins"
        vsensors = base / "vsensors"
        plugins.mkdir(parents=True, exist_ok=True)
        vsensors.mkdir(parents=True, exist_ok=True)
        cfg = NodeConfig(
            port=port,
            node_id=node_id,
            plugins_dir=str(plugins),
            vsensors_dir=str(vsensors),
            data_dir=str(base / "data"),
            registry=registry,
            **cfg_kwargs,
        )
        node = Node(cfg, serve_registry=serve_registry)
        node.start()
        self.nodes.append(node)
        return node

    def stop_all(self) -> None:
        for node in reversed(self.nodes):
            node.stop()
        self.nodes.clear()


@pytest.fixture
def node_factory(tmp_path):
    factory = NodeFactory(tmp_path)
    yield factory
    factory.stop_all()
