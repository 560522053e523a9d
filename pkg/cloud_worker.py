#!/usr/bin/env python3
"""
Cloud Worker for PBLS
The untrusted server side: computes A'^T A' (round one) and R2^-1 A'^T (round two)
over the framed wire protocol, with optional fault injection to exercise verification.
"""

import logging
import socket
import socketserver
from collections import OrderedDict
from dataclasses import dataclass, field
from threading import Lock, Thread
from typing import Callable, Iterator, Optional, Tuple

import numpy as np

from matrix_core import (
    DimensionError,
    MatrixFormatError,
    NonFiniteError,
    SingularMatrixError,
    _freeze,
    dense_inverse,
    deserialize_matrix,
    inverse_ops,
    mat_mul,
    serialize_matrix,
    transpose,
)
from metrics import MetricsCollector, WORKER_PHASES
from protocol import (
    MAX_PAYLOAD,
    ErrorCategory,
    ErrorCode,
    Frame,
    Opcode,
    ProtocolError,
    error_frame,
    read_frame,
    write_frame,
)

logger = logging.getLogger(__name__)

FAULT_KINDS = ('honest', 'perturb', 'random', 'lazy')
FAULT_TARGETS = ('gram', 'invprod', 'both')
DEFAULT_PERTURBATION = 1e-3


class SessionNotFoundError(KeyError):
    """INVPROD_REQ arrived for a session with no cached A'"""
    pass


@dataclass(frozen=True)
class FaultMode:
    """How (and whether) the worker corrupts its results"""
    kind: str = 'honest'
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"Unknown fault mode '{self.kind}'")

    @classmethod
    def parse(cls, text: str) -> 'FaultMode':
        """
        Parse 'honest', 'perturb:<eps>', 'random' or 'lazy'

        'random_result' and 'lazy_identity' are accepted as long forms.
        """
        text = (text or 'honest').strip().lower()
        aliases = {'random_result': 'random', 'lazy_identity': 'lazy'}
        if text.startswith('perturb'):
            _, _, eps = text.partition(':')
            try:
                epsilon = float(eps) if eps else DEFAULT_PERTURBATION
            except ValueError:
                raise ValueError(f"Bad perturbation magnitude in '{text}'")
            return cls('perturb', epsilon)
        return cls(aliases.get(text, text))

    @property
    def honest(self) -> bool:
        return self.kind == 'honest'

    def __str__(self) -> str:
        return f"perturb:{self.epsilon:g}" if self.kind == 'perturb' else self.kind


@dataclass
class SessionState:
    """Per-session worker state; A' stays resident between the two rounds"""
    session_id: int
    fault_mode: FaultMode = field(default_factory=FaultMode)
    a_prime: Optional[np.ndarray] = None

    @property
    def ready_for_invprod(self) -> bool:
        return self.a_prime is not None


class SessionTable:
    """Sessions opened over one connection, evicted least-recently-used first"""

    def __init__(self, max_sessions: int, fault_mode: FaultMode,
                 on_evict: Optional[Callable[[int], None]] = None):
        self.max_sessions = max_sessions
        self.fault_mode = fault_mode
        self.on_evict = on_evict
        self.entries: 'OrderedDict[int, SessionState]' = OrderedDict()
        self.lock = Lock()

    def open(self, session_id: int, a_prime: np.ndarray) -> SessionState:
        """Create or reuse the session and cache A' in it"""
        with self.lock:
            state = self.entries.get(session_id)
            if state is None:
                state = SessionState(session_id=session_id, fault_mode=self.fault_mode)
                self.entries[session_id] = state
                while len(self.entries) > self.max_sessions:
                    evicted, _ = self.entries.popitem(last=False)
                    logger.debug(f"Evicted session {evicted:016x}")
                    if self.on_evict:
                        self.on_evict(evicted)
            state.a_prime = a_prime
            self.entries.move_to_end(session_id)
            return state

    def cached(self, session_id: int) -> Tuple[np.ndarray, FaultMode]:
        """A' and fault mode of a session that already ran round one"""
        with self.lock:
            state = self.entries.get(session_id)
            if state is None or not state.ready_for_invprod:
                raise SessionNotFoundError(session_id)
            self.entries.move_to_end(session_id)
            return state.a_prime, state.fault_mode

    def __len__(self) -> int:
        with self.lock:
            return len(self.entries)

    def __iter__(self) -> Iterator[int]:
        with self.lock:
            return iter(list(self.entries))

    def __contains__(self, session_id: int) -> bool:
        with self.lock:
            return session_id in self.entries


class CloudWorker:
    """
    Executes the two outsourced computations

    Session state lives in a SessionTable per connection; calls made without one
    (in-process channels, direct use) share the worker's own `sessions` table.
    """

    def __init__(self, fault_mode: str = 'honest', fault_target: str = 'both',
                 max_sessions: int = 64, seed: int = 0,
                 metrics: Optional[MetricsCollector] = None):
        """
        Initialize the worker

        Args:
            fault_mode: 'honest', 'perturb:<eps>', 'random' or 'lazy'
            fault_target: Which round a perturbation hits: 'gram', 'invprod' or 'both'
                (random and lazy results always hit both rounds)
            max_sessions: Cached sessions per connection before least-recently-used eviction
            seed: Seed for the fault-injection generator
            metrics: Collector for multiply-add counts; one is created if omitted
        """
        if fault_target not in FAULT_TARGETS:
            raise ValueError(f"Unknown fault target '{fault_target}'")
        self.fault_mode = FaultMode.parse(fault_mode) if isinstance(fault_mode, str) else fault_mode
        self.fault_target = fault_target
        self.max_sessions = max_sessions
        self.metrics = metrics or MetricsCollector('worker', WORKER_PHASES)
        self.rng = np.random.default_rng(seed)
        self.lock = Lock()
        self.stats = {'gram': 0, 'invprod': 0, 'errors': 0, 'evicted': 0, 'connections': 0}
        self.sessions = self.open_sessions()

    def open_sessions(self) -> SessionTable:
        """A fresh session table, one per connection"""
        return SessionTable(self.max_sessions, self.fault_mode, self._count_eviction)

    def _count_eviction(self, session_id: int) -> None:
        with self.lock:
            self.stats['evicted'] += 1

    def _hits(self, round_name: str, mode: FaultMode) -> bool:
        if mode.honest:
            return False
        if mode.kind in ('random', 'lazy'):
            return True
        return self.fault_target in (round_name, 'both')

    def _corrupt(self, result: np.ndarray, mode: FaultMode) -> np.ndarray:
        """Apply the configured fault; the shape never changes"""
        rows, cols = result.shape
        with self.lock:
            if mode.kind == 'perturb':
                out = result.copy()
                i = int(self.rng.integers(rows))
                j = int(self.rng.integers(cols))
                out[i, j] += mode.epsilon
            elif mode.kind == 'random':
                out = self.rng.uniform(-1.0, 1.0, size=(rows, cols))
            else:
                out = np.eye(rows, cols)
        return _freeze(out)

    def handle_gram(self, session_id: int, a_prime: np.ndarray,
                    sessions: Optional[SessionTable] = None) -> np.ndarray:
        """Round one: cache A' and return A'^T A'"""
        table = sessions if sessions is not None else self.sessions
        state = table.open(session_id, a_prime)
        rows, cols = a_prime.shape

        with self.metrics.phase_timer('gram'):
            result = mat_mul(transpose(a_prime), a_prime)
        self.metrics.add_ops('gram', cols * rows * cols)

        with self.lock:
            self.stats['gram'] += 1
        if self._hits('gram', state.fault_mode):
            result = self._corrupt(result, state.fault_mode)
        logger.debug(f"[{session_id:016x}] Gram of {rows}x{cols} done")
        return result

    def handle_invprod(self, session_id: int, r2: np.ndarray,
                       sessions: Optional[SessionTable] = None) -> np.ndarray:
        """Round two: return R2^-1 A'^T using the cached A'"""
        table = sessions if sessions is not None else self.sessions
        a_prime, fault_mode = table.cached(session_id)
        n = a_prime.shape[1]
        if r2.shape != (n, n):
            raise DimensionError(f"R2 must be {n}x{n} for this session, got {r2.shape}")

        with self.metrics.phase_timer('inverse'):
            r2_inv = dense_inverse(r2)
        self.metrics.add_ops('inverse', inverse_ops(n))

        with self.metrics.phase_timer('invprod'):
            result = mat_mul(r2_inv, transpose(a_prime))
        self.metrics.add_ops('invprod', n * n * a_prime.shape[0])

        with self.lock:
            self.stats['invprod'] += 1
        if self._hits('invprod', fault_mode):
            result = self._corrupt(result, fault_mode)
        logger.debug(f"[{session_id:016x}] Inverse product {result.shape} done")
        return result

    def handle_frame(self, frame: Frame, sessions: Optional[SessionTable] = None) -> Frame:
        """Dispatch one request frame; failures come back as ERROR frames"""
        sid = frame.session_id
        try:
            if frame.opcode == Opcode.GRAM_REQ:
                result = self.handle_gram(sid, deserialize_matrix(frame.payload), sessions)
                return Frame(Opcode.GRAM_RESP, sid, serialize_matrix(result))
            if frame.opcode == Opcode.INVPROD_REQ:
                result = self.handle_invprod(sid, deserialize_matrix(frame.payload), sessions)
                return Frame(Opcode.INVPROD_RESP, sid, serialize_matrix(result))
            return self._error(sid, ErrorCode.BAD_REQUEST, f"opcode 0x{int(frame.opcode):02x} is not a request")
        except (MatrixFormatError, NonFiniteError) as e:
            return self._error(sid, ErrorCode.MALFORMED, f"malformed matrix payload: {e}")
        except SingularMatrixError as e:
            return self._error(sid, ErrorCode.SINGULAR, str(e))
        except SessionNotFoundError:
            return self._error(sid, ErrorCode.NO_SESSION, "no A' cached for this session; send GRAM_REQ first")
        except DimensionError as e:
            return self._error(sid, ErrorCode.BAD_REQUEST, str(e))
        except Exception as e:
            logger.exception(f"[{sid:016x}] Unexpected failure")
            return self._error(sid, ErrorCode.INTERNAL, f"internal error: {e}")

    def _error(self, session_id: int, code: ErrorCode, message: str) -> Frame:
        with self.lock:
            self.stats['errors'] += 1
        logger.warning(f"[{session_id:016x}] {code.name}: {message}")
        return error_frame(session_id, code, message)

    def get_stats(self) -> dict:
        sessions = len(self.sessions)
        with self.lock:
            return {**self.stats, 'sessions': sessions, 'fault_mode': str(self.fault_mode)}


def serve_connection(worker: CloudWorker, sock: socket.socket, max_payload: int = MAX_PAYLOAD) -> None:
    """Sequential request/response loop for one connection; its sessions die with it"""
    sessions = worker.open_sessions()
    with worker.lock:
        worker.stats['connections'] += 1
    rfile = sock.makefile('rb')
    wfile = sock.makefile('wb')
    try:
        while True:
            try:
                frame = read_frame(rfile, max_payload)
            except ProtocolError as e:
                if e.category is not ErrorCategory.CONNECTION_CLOSED:
                    # framing is lost; report once and hang up
                    logger.warning(f"Dropping connection: {e}")
                    write_frame(wfile, error_frame(0, ErrorCode.MALFORMED, str(e)))
                break

            response = worker.handle_frame(frame, sessions)
            try:
                write_frame(wfile, response, max_payload)
            except ProtocolError as e:
                write_frame(wfile, error_frame(frame.session_id, ErrorCode.INTERNAL, str(e)))
    except OSError as e:
        logger.debug(f"Connection ended: {e}")
    finally:
        for f in (rfile, wfile):
            try:
                f.close()
            except OSError:
                pass


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        logger.info(f"Client connected from {self.client_address[0]}:{self.client_address[1]}")
        serve_connection(self.server.worker, self.request, self.server.max_payload)
        logger.info(f"Client {self.client_address[0]}:{self.client_address[1]} disconnected")


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class WorkerServer:
    """TCP server running a CloudWorker, one handler thread per connection"""

    def __init__(self, worker: CloudWorker, host: str = '127.0.0.1', port: int = 7541,
                 max_payload: int = MAX_PAYLOAD):
        """
        Initialize worker server

        Args:
            worker: CloudWorker instance
            host: Host to bind to
            port: Port to listen on (0 picks a free port)
            max_payload: Largest accepted frame payload
        """
        self.worker = worker
        self.host = host
        self.port = port
        self.max_payload = max_payload
        self.server: Optional[_ThreadingServer] = None
        self.thread: Optional[Thread] = None
        self.running = False

    def start(self):
        """Start serving in a background thread"""
        try:
            self.server = _ThreadingServer((self.host, self.port), _ConnectionHandler)
            self.server.worker = self.worker
            self.server.max_payload = self.max_payload
            self.port = self.server.server_address[1]
            self.running = True

            self.thread = Thread(target=self.server.serve_forever, daemon=True)
            self.thread.start()

            logger.info(f"Cloud worker listening on {self.host}:{self.port} (fault mode {self.worker.fault_mode})")

        except Exception as e:
            logger.error(f"Failed to start cloud worker: {e}")
            raise

    @property
    def address(self) -> Tuple[str, int]:
        return self.host, self.port

    def stop(self):
        """Stop the server"""
        self.running = False

        if self.server:
            try:
                self.server.shutdown()
                self.server.server_close()
                logger.info("Cloud worker stopped")
            except Exception as e:
                logger.error(f"Error stopping cloud worker: {e}")


def start_pipe_worker(worker: CloudWorker, max_payload: int = MAX_PAYLOAD) -> Tuple[socket.socket, Thread]:
    """
    Serve a worker over an in-process socket pair

    Returns:
        (client_socket, server_thread); closing the client socket ends the thread
    """
    client_sock, server_sock = socket.socketpair()

    def _run():
        try:
            serve_connection(worker, server_sock, max_payload)
        finally:
            server_sock.close()

    thread = Thread(target=_run, daemon=True, name='pbls-pipe-worker')
    thread.start()
    return client_sock, thread
