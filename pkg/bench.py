#!/usr/bin/env python3
"""
Benchmark Harness for PBLS
Client-vs-cloud scaling runs written as a versioned CSV, and a verification
demo that tallies acceptances against a fault-injecting worker.
"""

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from client_outsourcer import (
    DEFAULT_ROUNDS,
    DEFAULT_TOLERANCE,
    LoopbackChannel,
    OutsourceSession,
    local_pinv,
)
from cloud_worker import CloudWorker, FaultMode
from keygen import ScaleMode, sample_keys
from matrix_core import dense_matrix
from metrics import MetricsCollector, WORKER_PHASES
from protocol import WorkerError

logger = logging.getLogger(__name__)

SCHEMA_TAG = 'pbls-bench-scaling/1'
SCALING_COLUMNS = (
    'n', 'rows', 'repetitions',
    'client_transform_s', 'client_recover_s', 'client_verify_s', 'client_total_s',
    'client_transform_ops', 'client_recover_ops', 'client_verify_ops', 'client_ops',
    'worker_s', 'worker_ops',
    'local_s', 'local_ops',
    'max_residual', 'accepted',
)
INT_COLUMNS = ('n', 'rows', 'repetitions', 'client_transform_ops', 'client_recover_ops',
               'client_verify_ops', 'client_ops', 'worker_ops', 'local_ops')


class BenchFormatError(ValueError):
    """Raised when a CSV does not carry the expected schema tag"""
    pass


def random_tall_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return dense_matrix(rng.uniform(-1.0, 1.0, size=(rows, cols)))


def _run_once(a: np.ndarray, lam: float, keys, rounds: int, tol: float,
              rng: np.random.Generator):
    client = MetricsCollector('client')
    worker = CloudWorker(metrics=MetricsCollector('worker', WORKER_PHASES))
    session = OutsourceSession(a, lam, keys, session_id=int(rng.integers(1, 2 ** 63, dtype=np.int64)),
                               metrics=client)
    report = session.run(LoopbackChannel(worker), rounds, tol, rng)
    return client, worker.metrics, report


def bench_scaling(sizes: Sequence[int], repetitions: int = 5, aspect: int = 2, seed: int = 0,
                  lam: float = 1e-8, scale_mode: Union[str, ScaleMode] = ScaleMode.POW2,
                  rounds: int = DEFAULT_ROUNDS, tol: float = DEFAULT_TOLERANCE,
                  local_baseline: bool = True, out: Optional[Union[str, Path]] = None,
                  metrics: Optional[MetricsCollector] = None) -> List[Dict]:
    """
    Time the outsourcing protocol at each size n (A is aspect*n x n)

    One warm-up run per size is discarded; wall times are medians over `repetitions`
    runs on the monotonic clock. Operation counts are deterministic per size.
    Every timed run's client and worker collectors are merged into `metrics` when given.

    Returns:
        One dict per size, keyed by SCALING_COLUMNS; also written to `out` when given
    """
    if repetitions < 1 or aspect < 1 or not sizes:
        raise ValueError("need at least one size, one repetition and aspect >= 1")

    rng = np.random.default_rng(seed)
    rows_out = []

    for n in sizes:
        m = aspect * n
        a = random_tall_matrix(rng, m, n)
        keys = sample_keys(rng, m, n, scale_mode, seed=seed)

        _run_once(a, lam, keys, rounds, tol, rng)  # warm-up

        samples = {phase: [] for phase in ('transform', 'recover', 'verify', 'worker')}
        residual = 0.0
        accepted = True
        for _ in range(repetitions):
            client, worker, report = _run_once(a, lam, keys, rounds, tol, rng)
            if metrics is not None:
                metrics.merge(client)
                metrics.merge(worker)
            for phase in ('transform', 'recover', 'verify'):
                samples[phase].append(client.total_time([phase]))
            samples['worker'].append(worker.total_time())
            residual = max(residual, report.max_residual)
            accepted = accepted and report.accepted

        local_s = math.nan
        local_ops = 0
        if local_baseline:
            times = []
            for _ in range(repetitions):
                local = MetricsCollector('local', ('local',))
                start = time.perf_counter()
                local_pinv(a, lam, local)
                times.append(time.perf_counter() - start)
            local_s = statistics.median(times)
            local_ops = local.total_ops()

        medians = {phase: statistics.median(values) for phase, values in samples.items()}
        row = {
            'n': n,
            'rows': m,
            'repetitions': repetitions,
            'client_transform_s': medians['transform'],
            'client_recover_s': medians['recover'],
            'client_verify_s': medians['verify'],
            'client_total_s': medians['transform'] + medians['recover'] + medians['verify'],
            'client_transform_ops': client.total_ops(['transform']),
            'client_recover_ops': client.total_ops(['recover']),
            'client_verify_ops': client.total_ops(['verify']),
            'client_ops': client.total_ops(['transform', 'recover', 'verify']),
            'worker_s': medians['worker'],
            'worker_ops': worker.total_ops(),
            'local_s': local_s,
            'local_ops': local_ops,
            'max_residual': residual,
            'accepted': accepted,
        }
        rows_out.append(row)
        logger.info(f"n={n}: client {row['client_total_s']:.4f}s ({row['client_ops']} ops), "
                    f"worker {row['worker_s']:.4f}s ({row['worker_ops']} ops), local {local_s:.4f}s")

    if out:
        write_scaling_csv(rows_out, out)
    return rows_out


def write_scaling_csv(rows: List[Dict], path: Union[str, Path]) -> None:
    """First line is the schema tag, then a header row with SCALING_COLUMNS"""
    with open(path, 'w', newline='') as f:
        f.write(f'# schema={SCHEMA_TAG}\n')
        writer = csv.DictWriter(f, fieldnames=SCALING_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in SCALING_COLUMNS})
    logger.info(f"Wrote {len(rows)} rows to {path}")


def read_scaling_csv(path: Union[str, Path]) -> List[Dict]:
    with open(path, newline='') as f:
        tag = f.readline().strip()
        if tag != f'# schema={SCHEMA_TAG}':
            raise BenchFormatError(f"{path}: expected schema {SCHEMA_TAG}, found {tag!r}")
        rows = []
        for raw in csv.DictReader(f):
            row = {}
            for key in SCALING_COLUMNS:
                if key in INT_COLUMNS:
                    row[key] = int(raw[key])
                elif key == 'accepted':
                    row[key] = raw[key] == 'True'
                else:
                    row[key] = float(raw[key])
            rows.append(row)
    return rows


def fit_scaling_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(values) against log(ns)"""
    if len(ns) != len(values) or len(ns) < 2:
        raise ValueError("need at least two (n, value) pairs of equal length")
    slope, _ = np.polyfit(np.log(np.asarray(ns, dtype=np.float64)),
                          np.log(np.asarray(values, dtype=np.float64)), 1)
    return float(slope)


@dataclass(frozen=True)
class DemoReport:
    """Tallies from verify_demo"""
    trials: int
    accepted: int
    rejected: int
    worker_errors: int
    min_residual: float
    max_residual: float
    fault_mode: str
    tolerance: float

    @property
    def note(self) -> Optional[str]:
        mode = FaultMode.parse(self.fault_mode)
        if mode.kind == 'perturb' and mode.epsilon < self.tolerance:
            return (f"perturbations of {mode.epsilon:g} sit below the tolerance {self.tolerance:g} "
                    f"and cannot be told apart from rounding; such results are accepted")
        return None


def verify_demo(trials: int, fault_mode: str = 'honest', fault_target: str = 'both',
                min_size: int = 8, max_size: int = 32, aspect: int = 2, seed: int = 0,
                lam: float = 1e-8, tol: float = DEFAULT_TOLERANCE, rounds: int = DEFAULT_ROUNDS,
                scale_mode: Union[str, ScaleMode] = ScaleMode.POW2) -> DemoReport:
    """
    Run `trials` outsourcing sessions against a worker in the given fault mode

    Sizes are drawn uniformly from min_size..max_size columns; A is aspect*n x n.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worker = CloudWorker(fault_mode=fault_mode, fault_target=fault_target, seed=seed)
    channel = LoopbackChannel(worker)

    accepted = rejected = errors = 0
    residuals = []
    for _ in range(trials):
        n = int(rng.integers(min_size, max_size + 1))
        a = random_tall_matrix(rng, aspect * n, n)
        keys = sample_keys(rng, aspect * n, n, scale_mode, seed=seed)
        session = OutsourceSession(a, lam, keys, session_id=int(rng.integers(1, 2 ** 63, dtype=np.int64)))
        try:
            report = session.run(channel, rounds, tol, rng)
        except WorkerError as e:
            logger.debug(f"Worker refused: {e}")
            errors += 1
            rejected += 1
            continue
        residuals.append(report.max_residual)
        if report.accepted:
            accepted += 1
        else:
            rejected += 1

    logger.info(f"verify-demo ({fault_mode}): {accepted} accepted, {rejected} rejected of {trials}")
    return DemoReport(trials=trials, accepted=accepted, rejected=rejected, worker_errors=errors,
                      min_residual=min(residuals) if residuals else math.nan,
                      max_residual=max(residuals) if residuals else math.nan,
                      fault_mode=str(FaultMode.parse(fault_mode)), tolerance=tol)
