"""Benchmark harness: desk-scale topologies, workload driving, metrics."""
