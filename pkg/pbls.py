#!/usr/bin/env python3
"""
PBLS command line
Subcommands: keygen, pinv, train, bench-scaling, verify-demo, cloud-worker
"""

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
from rich import box
from rich.console import Console
from rich.table import Table

from bench import bench_scaling, fit_scaling_slope, verify_demo
from bls import BlsConfig, OutsourcedBackend, evaluate, design_matrix, ridge_residual, save_model, train
from client_outsourcer import (
    ResultRejectedError,
    SocketChannel,
    local_pinv,
    outsourced_pinv,
    parse_address,
)
from cloud_worker import CloudWorker, WorkerServer, start_pipe_worker
from config import ConfigurationError, PblsConfig, setup_logging
from data import Normalization, flatten, load_idx, synthetic_blobs, to_dataset, train_test_split
from keygen import ScaleMode, export_keys, generate_keys, key_space_census, keyspace_size
from matrix_core import dense_matrix, deserialize_matrix, serialize_matrix
from metrics import MetricsCollector
from protocol import ProtocolError

logger = logging.getLogger('pbls')
console = Console()

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECTED = 2
EXIT_INTERRUPTED = 130

TRAIN_COLUMNS = ('backend', 'seed', 'feature_nodes', 'enhancement_nodes', 'train_s',
                 'train_accuracy', 'test_accuracy', 'ridge_residual')


def load_matrix(path: str) -> np.ndarray:
    """.npy, .csv/.txt (comma separated) or the binary matrix layout"""
    suffix = Path(path).suffix.lower()
    if suffix == '.npy':
        return dense_matrix(np.load(path))
    if suffix in ('.csv', '.txt'):
        return dense_matrix(np.atleast_2d(np.loadtxt(path, delimiter=',')))
    return deserialize_matrix(Path(path).read_bytes())


def save_matrix(path: str, m: np.ndarray) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == '.npy':
        np.save(path, np.asarray(m))
    elif suffix in ('.csv', '.txt'):
        np.savetxt(path, m, delimiter=',', fmt='%.17g')
    else:
        Path(path).write_bytes(serialize_matrix(m))


def _opt(args, name: str, fallback):
    value = getattr(args, name, None)
    return fallback if value is None else value


def _settings(args, config: PblsConfig) -> dict:
    return {
        'seed': _opt(args, 'seed', 0),
        'scale_mode': ScaleMode.parse(_opt(args, 'scale_mode', config.get('outsourcing.scale_mode'))),
        'lam': _opt(args, 'lam', config.get('outsourcing.lambda')),
        'rounds': _opt(args, 'verify_rounds', config.get('outsourcing.verify_rounds')),
        'tol': config.get('outsourcing.tolerance'),
        'retries': config.get('outsourcing.retries'),
    }


def _open_channel(args, config: PblsConfig):
    """TCP channel to --worker, or an in-process worker over a socket pair"""
    if getattr(args, 'worker', None):
        return SocketChannel.connect_tcp(args.worker, default_port=config.get('protocol.port'),
                                         timeout=config.get('protocol.timeout_s'),
                                         max_payload=config.get('protocol.max_payload_bytes'))
    worker = CloudWorker(fault_mode=_opt(args, 'fault_mode', config.get('worker.fault_mode')),
                         fault_target=config.get('worker.fault_target'),
                         max_sessions=config.get('worker.max_sessions'),
                         seed=config.get('worker.seed'))
    sock, _ = start_pipe_worker(worker, config.get('protocol.max_payload_bytes'))
    logger.info(f"Using in-process worker (fault mode {worker.fault_mode})")
    return SocketChannel(sock, config.get('protocol.max_payload_bytes'))


def _write_metrics(args, metrics: MetricsCollector) -> None:
    path = getattr(args, 'metrics_out', None)
    if path:
        Path(path).write_text(metrics.export_prometheus())
        logger.info(f"Metrics written to {path}")


def _big(value: int) -> str:
    digits = str(value)
    return digits if len(digits) <= 15 else f"{digits[0]}.{digits[1:4]}e{len(digits) - 1}"


def cmd_keygen(args, config: PblsConfig) -> int:
    s = _settings(args, config)
    keys = generate_keys(args.m, args.n, s['seed'], s['scale_mode'])

    table = Table(title="Masking keys", box=box.ROUNDED)
    table.add_column("Key")
    table.add_column("Size", justify="right")
    table.add_column("Key space", justify="right")
    table.add_row("P (signed permutation)", str(keys.m), f"2^{keys.m} * {keys.m}! = {_big(keyspace_size(keys.m, 'signed'))}")
    table.add_row("Q (scaled permutation, paper mode)", str(keys.n),
                  f"{keys.n}^{keys.n} * {keys.n}! = {_big(keyspace_size(keys.n, 'scaled'))}")
    console.print(table)

    export_path = getattr(args, 'export_keys', None)
    if export_path:
        export_keys(keys, export_path)
        console.print(f"[yellow]Keys written to {export_path} (debug only, insecure)[/yellow]")

    if args.census:
        report = key_space_census(args.census, args.samples, seed=s['seed'], kind=args.kind)
        census = Table(title=f"Census of {report.kind} keys, size {report.size}", box=box.SIMPLE)
        for column in ("Samples", "Key space", "Observed", "Chi-square", "p-value"):
            census.add_column(column, justify="right")
        census.add_row(str(report.samples), str(report.keyspace), str(report.observed_keys),
                       f"{report.chi_square:.2f}", f"{report.p_value:.4f}")
        console.print(census)
    return EXIT_OK


def cmd_pinv(args, config: PblsConfig) -> int:
    s = _settings(args, config)
    a = load_matrix(args.input)
    keys = generate_keys(a.shape[0], a.shape[1], s['seed'], s['scale_mode'])
    export_path = getattr(args, 'export_keys', None)
    if export_path:
        export_keys(keys, export_path)

    metrics = MetricsCollector('client')
    channel = _open_channel(args, config)
    try:
        start = time.perf_counter()
        r4 = outsourced_pinv(a, s['lam'], keys, channel, rounds=s['rounds'], tol=s['tol'],
                             identity=config.get('outsourcing.verify_identity'),
                             retries=s['retries'], metrics=metrics)
        elapsed = time.perf_counter() - start
    finally:
        channel.close()

    table = Table(title=f"Outsourced pseudoinverse of {a.shape[0]}x{a.shape[1]}", box=box.ROUNDED)
    table.add_column("Phase")
    table.add_column("Multiply-adds", justify="right")
    table.add_column("Time (s)", justify="right")
    for phase in ('transform', 'recover', 'verify'):
        table.add_row(phase, str(metrics.total_ops([phase])), f"{metrics.total_time([phase]):.4f}")
    table.add_row("total (wall)", str(metrics.total_ops()), f"{elapsed:.4f}")
    console.print(table)
    _write_metrics(args, metrics)

    out = getattr(args, 'out', None)
    if out:
        save_matrix(out, r4)
        console.print(f"R4 written to {out}")
    return EXIT_OK


def _load_training_data(args, seed: int):
    if args.synthetic or not args.train_images:
        dataset = synthetic_blobs(args.classes, args.samples_per_class, args.dim, args.separation, seed)
        return train_test_split(dataset, args.test_fraction, seed)

    train_raw = load_idx(args.train_images, args.train_labels, limit=args.limit)
    normalization = Normalization.fit(flatten(train_raw))
    train_set = to_dataset(train_raw, normalization)
    if args.test_images and args.test_labels:
        test_raw = load_idx(args.test_images, args.test_labels, limit=args.limit)
        return train_set, to_dataset(test_raw, normalization)
    return train_test_split(train_set, args.test_fraction, seed)


def cmd_train(args, config: PblsConfig) -> int:
    s = _settings(args, config)
    bls_config = BlsConfig.from_config(config, seed=s['seed'], lam=s['lam'])
    train_set, test_set = _load_training_data(args, s['seed'])

    channel = None
    if args.backend == 'outsourced':
        channel = _open_channel(args, config)
        backend = OutsourcedBackend(channel, config, seed=s['seed'])
    else:
        backend = local_pinv

    try:
        start = time.perf_counter()
        model = train(train_set, bls_config, backend)
        train_s = time.perf_counter() - start
    finally:
        if channel is not None:
            channel.close()
    if channel is not None:
        _write_metrics(args, backend.metrics)

    row = {
        'backend': args.backend,
        'seed': s['seed'],
        'feature_nodes': bls_config.feature_width,
        'enhancement_nodes': bls_config.enhancement_width,
        'train_s': round(train_s, 6),
        'train_accuracy': evaluate(model, train_set),
        'test_accuracy': evaluate(model, test_set),
        'ridge_residual': ridge_residual(design_matrix(model, train_set.x), model.output_weights,
                                         train_set.y, bls_config.lam),
    }

    table = Table(title="BLS training", box=box.ROUNDED)
    table.add_column("Field")
    table.add_column("Value", justify="right")
    for key in TRAIN_COLUMNS:
        value = row[key]
        table.add_row(key, f"{value:.2%}" if key.endswith('accuracy') else str(value))
    console.print(table)

    out = getattr(args, 'out', None)
    if out:
        new_file = not os.path.exists(out)
        with open(out, 'a', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=TRAIN_COLUMNS)
            if new_file:
                writer.writeheader()
            writer.writerow(row)
    if args.save_model:
        save_model(model, args.save_model)
    return EXIT_OK


def cmd_bench_scaling(args, config: PblsConfig) -> int:
    s = _settings(args, config)
    sizes = args.sizes or config.get('bench.sizes')
    metrics = MetricsCollector('bench', ())
    rows = bench_scaling(sizes, repetitions=args.repetitions or config.get('bench.repetitions'),
                         aspect=args.aspect or config.get('bench.aspect'), seed=s['seed'],
                         lam=s['lam'], scale_mode=s['scale_mode'], rounds=s['rounds'], tol=s['tol'],
                         local_baseline=not args.no_local,
                         out=getattr(args, 'out', None) or 'bench_scaling.csv', metrics=metrics)

    table = Table(title="Client vs cloud scaling", box=box.ROUNDED)
    for column in ("n", "transform+recover (s)", "verify (s)", "client ops", "worker (s)",
                   "worker ops", "local (s)"):
        table.add_column(column, justify="right")
    for row in rows:
        table.add_row(str(row['n']), f"{row['client_transform_s'] + row['client_recover_s']:.4f}",
                      f"{row['client_verify_s']:.4f}", str(row['client_ops']), f"{row['worker_s']:.4f}",
                      str(row['worker_ops']), f"{row['local_s']:.4f}")
    console.print(table)

    if len(rows) >= 2:
        ns = [row['n'] for row in rows]
        console.print(f"client ops slope: {fit_scaling_slope(ns, [r['client_ops'] for r in rows]):.3f}")
        console.print(f"worker ops slope: {fit_scaling_slope(ns, [r['worker_ops'] for r in rows]):.3f}")
    _write_metrics(args, metrics)
    return EXIT_OK


def cmd_verify_demo(args, config: PblsConfig) -> int:
    s = _settings(args, config)
    report = verify_demo(args.trials, fault_mode=_opt(args, 'fault_mode', config.get('worker.fault_mode')),
                         fault_target=args.fault_target or config.get('worker.fault_target'),
                         min_size=args.min_size, max_size=args.max_size, seed=s['seed'], lam=s['lam'],
                         tol=s['tol'], rounds=s['rounds'], scale_mode=s['scale_mode'])

    table = Table(title=f"Verification demo: {report.fault_mode}", box=box.ROUNDED)
    for column in ("Trials", "Accepted", "Rejected", "Worker errors", "Min residual", "Max residual"):
        table.add_column(column, justify="right")
    table.add_row(str(report.trials), str(report.accepted), str(report.rejected), str(report.worker_errors),
                  f"{report.min_residual:.3e}", f"{report.max_residual:.3e}")
    console.print(table)
    if report.note:
        console.print(f"[yellow]Note: {report.note}[/yellow]")
    return EXIT_OK


def cmd_cloud_worker(args, config: PblsConfig) -> int:
    host, port = parse_address(args.listen or f"{config.get('protocol.host')}:{config.get('protocol.port')}",
                               default_port=config.get('protocol.port'))
    # PBLS_FAULT_MODE wins over the flag
    fault_mode = os.environ.get('PBLS_FAULT_MODE') or _opt(args, 'fault_mode', config.get('worker.fault_mode'))
    worker = CloudWorker(fault_mode=fault_mode,
                         fault_target=args.fault_target or config.get('worker.fault_target'),
                         max_sessions=config.get('worker.max_sessions'),
                         seed=config.get('worker.seed'))
    server = WorkerServer(worker, host, port, config.get('protocol.max_payload_bytes'))
    server.start()
    console.print(f"Cloud worker listening on {host}:{server.port}. Press Ctrl+C to stop.")

    try:
        while server.running:
            time.sleep(1)
    finally:
        server.stop()
        stats = worker.get_stats()
        console.print(f"Served {stats['gram']} Gram and {stats['invprod']} inverse-product requests "
                      f"({stats['errors']} errors)")
        _write_metrics(args, worker.metrics)
    return EXIT_OK


COMMANDS = {
    'keygen': cmd_keygen,
    'pinv': cmd_pinv,
    'train': cmd_train,
    'bench-scaling': cmd_bench_scaling,
    'verify-demo': cmd_verify_demo,
    'cloud-worker': cmd_cloud_worker,
}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', default=argparse.SUPPRESS, help='Path to configuration file')
    common.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='Seed for keys, data and checks')
    common.add_argument('--scale-mode', choices=[m.value for m in ScaleMode], default=argparse.SUPPRESS)
    common.add_argument('--lambda', dest='lam', type=float, default=argparse.SUPPRESS,
                        help='Ridge coefficient')
    common.add_argument('--verify-rounds', type=int, default=argparse.SUPPRESS)
    common.add_argument('--out', default=argparse.SUPPRESS, help='Output file (CSV or matrix)')
    common.add_argument('--metrics-out', default=argparse.SUPPRESS,
                        help='Write operation counts and timings here in Prometheus text format')
    common.add_argument('--export-keys', default=argparse.SUPPRESS,
                        help='Write the masking keys to this path (insecure, debug only)')
    common.add_argument('-v', '--verbose', action='store_true', default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog='pbls', parents=[common],
                                     description='Verifiable outsourcing of the BLS ridge pseudoinverse')
    parser.add_argument('--create-config', help='Create example configuration file and exit')
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('keygen', parents=[common], help='Generate keys and show key-space sizes')
    p.add_argument('--m', type=int, default=4, help='Rows of A (size of P)')
    p.add_argument('--n', type=int, default=4, help='Columns of A (size of Q)')
    p.add_argument('--census', type=int, metavar='SIZE', help='Run a uniformity census at this key size')
    p.add_argument('--samples', type=int, default=48000)
    p.add_argument('--kind', choices=['signed', 'scaled'], default='signed')

    p = sub.add_parser('pinv', parents=[common], help='Outsource (lam*I + A^T A)^-1 A^T')
    p.add_argument('--input', required=True, help='Matrix file (.npy, .csv or binary layout)')
    p.add_argument('--worker', help='Worker address host:port (default: in-process worker)')
    p.add_argument('--fault-mode', help='Fault mode of the in-process worker')

    p = sub.add_parser('train', parents=[common], help='Train and evaluate a BLS model')
    p.add_argument('--backend', choices=['local', 'outsourced'], default='local')
    p.add_argument('--worker', help='Worker address host:port (default: in-process worker)')
    p.add_argument('--fault-mode', help='Fault mode of the in-process worker')
    p.add_argument('--synthetic', action='store_true', help='Use Gaussian blobs')
    p.add_argument('--classes', type=int, default=2)
    p.add_argument('--samples-per-class', type=int, default=200)
    p.add_argument('--dim', type=int, default=10)
    p.add_argument('--separation', type=float, default=6.0)
    p.add_argument('--test-fraction', type=float, default=0.5)
    p.add_argument('--train-images')
    p.add_argument('--train-labels')
    p.add_argument('--test-images')
    p.add_argument('--test-labels')
    p.add_argument('--limit', type=int, help='Use only the first LIMIT samples of each IDX file')
    p.add_argument('--save-model', help='Write the trained model here')

    p = sub.add_parser('bench-scaling', parents=[common], help='Client vs cloud scaling benchmark')
    p.add_argument('--sizes', type=int, nargs='+')
    p.add_argument('--repetitions', type=int)
    p.add_argument('--aspect', type=int)
    p.add_argument('--no-local', action='store_true', help='Skip the local baseline')

    p = sub.add_parser('verify-demo', parents=[common], help='Tally verification outcomes')
    p.add_argument('--trials', type=int, default=1000)
    p.add_argument('--fault-mode', help='honest, perturb:<eps>, random or lazy')
    p.add_argument('--fault-target', choices=['gram', 'invprod', 'both'])
    p.add_argument('--min-size', type=int, default=8)
    p.add_argument('--max-size', type=int, default=32)

    p = sub.add_parser('cloud-worker', parents=[common], help='Run the cloud worker over TCP')
    p.add_argument('--listen', help='host:port to bind (default from config / PBLS_PORT)')
    p.add_argument('--fault-mode', help='honest, perturb:<eps>, random or lazy')
    p.add_argument('--fault-target', choices=['gram', 'invprod', 'both'])

    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.create_config:
        PblsConfig(use_env=False).create_example_config(args.create_config)
        print(f"Created example configuration: {args.create_config}")
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_ERROR

    try:
        config = PblsConfig(config_path=getattr(args, 'config', None))
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_ERROR
    setup_logging(config, level='DEBUG' if getattr(args, 'verbose', False) else None)
    for warning in config.validate():
        logger.warning(warning)

    try:
        return COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        print("\nInterrupted")
        return EXIT_INTERRUPTED
    except ResultRejectedError as e:
        logger.error(str(e))
        console.print(f"[red]result rejected[/red]: residual {e.report.max_residual:.3e} "
                      f"> tolerance {e.report.tolerance:.1e}")
        return EXIT_REJECTED
    except (ProtocolError, ValueError, ArithmeticError, OSError, ConfigurationError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
