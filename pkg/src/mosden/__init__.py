"""MOSDEN: a collaborative sensing engine.

Each node ingests data from plugin-backed sensor sources, runs it through a
processor chain, keeps a bounded local history, and shares it with peers over
HTTP in either restful (persistent-connection pull) or push
(connection-per-delivery) streaming mode. A benchmark harness spawns
multi-node topologies on one host and measures round-trip latency,
throughput, fairness, and resource usage.
"""

__version__ = "0.1.0"
