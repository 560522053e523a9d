#!/usr/bin/env python3
"""
Operation Metrics for PBLS
Multiply-add counters and phase timings for the client and the cloud worker
"""

import logging
import statistics
import time
from contextlib import contextmanager
from threading import Lock
from typing import Dict, Iterable, Iterator, List, Optional

logger = logging.getLogger(__name__)

CLIENT_PHASES = ('keygen', 'transform', 'recover', 'verify')
WORKER_PHASES = ('gram', 'inverse', 'invprod')


class MetricsCollector:
    """Collects scalar multiply-add counts and wall-clock samples per phase"""

    def __init__(self, name: str = 'client', phases: Iterable[str] = CLIENT_PHASES):
        """
        Initialize metrics collector

        Args:
            name: Label used in the text export ('client', 'worker', ...)
            phases: Phases pre-registered with zero counts
        """
        self.name = name
        self.lock = Lock()
        self.phases = tuple(phases)
        self.multiply_adds: Dict[str, int] = {phase: 0 for phase in self.phases}
        self.phase_times: Dict[str, List[float]] = {phase: [] for phase in self.phases}
        self.start_time = time.time()

    def add_ops(self, phase: str, count: int):
        """Charge `count` scalar multiply-adds to a phase"""
        with self.lock:
            self.multiply_adds[phase] = self.multiply_adds.get(phase, 0) + int(count)

    def record_time(self, phase: str, seconds: float):
        with self.lock:
            self.phase_times.setdefault(phase, []).append(seconds)

    @contextmanager
    def phase_timer(self, phase: str) -> Iterator[None]:
        """Time a block on the monotonic clock and record it under `phase`"""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.record_time(phase, time.perf_counter() - start)

    def total_ops(self, phases: Optional[Iterable[str]] = None) -> int:
        with self.lock:
            if phases is None:
                return sum(self.multiply_adds.values())
            return sum(self.multiply_adds.get(phase, 0) for phase in phases)

    def total_time(self, phases: Optional[Iterable[str]] = None) -> float:
        with self.lock:
            selected = self.phase_times.keys() if phases is None else phases
            return sum(sum(self.phase_times.get(phase, [])) for phase in selected)

    def merge(self, other: 'MetricsCollector'):
        """Add another collector's counts and samples into this one"""
        stats = other.get_stats()
        with self.lock:
            for phase, count in stats['multiply_adds'].items():
                self.multiply_adds[phase] = self.multiply_adds.get(phase, 0) + count
            for phase, samples in stats['phase_times'].items():
                self.phase_times.setdefault(phase, []).extend(samples)

    def get_uptime_seconds(self) -> float:
        return time.time() - self.start_time

    def get_stats(self) -> Dict[str, Dict]:
        """Snapshot of counters and timing samples"""
        with self.lock:
            return {
                'multiply_adds': dict(self.multiply_adds),
                'phase_times': {phase: list(samples) for phase, samples in self.phase_times.items()}
            }

    def export_prometheus(self) -> str:
        """
        Export metrics in Prometheus text format

        Returns:
            Metrics in Prometheus text format
        """
        with self.lock:
            lines = []

            lines.append('# HELP pbls_uptime_seconds Seconds since the collector started')
            lines.append('# TYPE pbls_uptime_seconds gauge')
            lines.append(f'pbls_uptime_seconds{{role="{self.name}"}} {self.get_uptime_seconds():.2f}')
            lines.append('')

            lines.append('# HELP pbls_multiply_adds_total Scalar multiply-adds per phase')
            lines.append('# TYPE pbls_multiply_adds_total counter')
            for phase, count in self.multiply_adds.items():
                lines.append(f'pbls_multiply_adds_total{{role="{self.name}",phase="{phase}"}} {count}')
            lines.append('')

            timed = {phase: samples for phase, samples in self.phase_times.items() if samples}
            if timed:
                lines.append('# HELP pbls_phase_seconds Wall time per phase')
                lines.append('# TYPE pbls_phase_seconds gauge')
                for phase, samples in timed.items():
                    labels = f'role="{self.name}",phase="{phase}"'
                    lines.append(f'pbls_phase_seconds{{{labels},stat="median"}} {statistics.median(samples):.6f}')
                    lines.append(f'pbls_phase_seconds{{{labels},stat="max"}} {max(samples):.6f}')
                    lines.append(f'pbls_phase_seconds{{{labels},stat="count"}} {len(samples)}')
                lines.append('')

            return '\n'.join(lines)
