"""Process resource sampling for benchmark runs.

CPU is recorded as cumulative process CPU milliseconds (user + system), the
portable stand-in for timer-tick counters; memory as resident set bytes.
Both series are cumulative/instantaneous per sample so CPU is monotone
non-decreasing for a live process.
"""
from __future__ import annotations

import logging

import psutil

log = logging.getLogger(__name__)


class ProcessSampler:
    """Tracks a fixed set of (node_id, role, pid) processes."""

    def __init__(self, members: list[tuple[str, str, int]]):
        self._procs: list[tuple[str, str, psutil.Process | None]] = []
        for node_id, role, pid in members:
            try:
                proc = psutil.Process(pid)
            except psutil.Error as exc:
                log.warning("cannot attach to %s (pid %s): %s", node_id, pid, exc)
                proc = None
            self._procs.append((node_id, role, proc))

    def sample(self, t_ms: int) -> list[dict]:
        """One row per process; a sampling gap yields a row with gap=True."""
        rows = []
        for node_id, role, proc in self._procs:
            row: dict = {"t_ms": t_ms, "node_id": node_id, "role": role}
            if proc is None:
                row["gap"] = True
            else:
                try:
                    with proc.oneshot():
                        cpu = proc.cpu_times()
                        mem = proc.memory_info()
                    row["pid"] = proc.pid
                    row["cpu_ms"] = int((cpu.user + cpu.system) * 1000)
                    row["rss_bytes"] = mem.rss
                except psutil.Error as exc:
                    row["gap"] = True
                    row["error"] = str(exc)
            rows.append(row)
        return rows

    def alive(self) -> dict[str, bool]:
        return {
            node_id: bool(proc is not None and proc.is_running())
            for node_id, _, proc in self._procs
        }
