#!/usr/bin/env python3
"""
Client Outsourcer for PBLS
Masks A with the keys (P, Q), runs the two rounds against a cloud worker,
recovers R4 = (lam*I + A^T A)^-1 A^T and checks it with random vectors.
"""

import logging
import socket
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Protocol, Tuple

import numpy as np

from keygen import MaskKeys
from matrix_core import (
    DimensionError,
    InvalidArgumentError,
    MatrixFormatError,
    NonFiniteError,
    _operand,
    add_scaled_identity,
    apply_scaled_left,
    apply_scaled_right,
    apply_signed_left,
    apply_signed_right,
    conjugate_scaled,
    dense_inverse,
    deserialize_matrix,
    inverse_ops,
    mat_mul,
    mat_vec,
    serialize_matrix,
    transpose,
    unconjugate_scaled,
)
from metrics import MetricsCollector
from protocol import (
    MAX_PAYLOAD,
    ErrorCategory,
    Frame,
    Opcode,
    ProtocolError,
    WorkerError,
    decode_error,
    decode_frame,
    encode_frame,
    read_frame,
    write_frame,
)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1e-8
DEFAULT_TOLERANCE = 1e-6
# one vector lets a single-entry fault through about once in a thousand runs
DEFAULT_ROUNDS = 2
VERIFY_IDENTITIES = ('pinv', 'ridge')


class StageError(RuntimeError):
    """A protocol step was called out of order"""
    pass


class ResultRejectedError(Exception):
    """The worker's result failed verification"""

    def __init__(self, report: 'VerificationReport', attempts: int = 1):
        super().__init__(
            f"result rejected after {attempts} attempt(s): residual {report.max_residual:.3e} "
            f"exceeds tolerance {report.tolerance:.1e} ({report.identity} check, {report.rounds} round(s))"
        )
        self.report = report
        self.attempts = attempts


@dataclass(frozen=True)
class VerificationReport:
    """Outcome of the randomized check; accepted iff every round's residual is within tolerance"""
    accepted: bool
    rounds: int
    max_residual: float
    tolerance: float
    identity: str = 'pinv'
    residuals: Tuple[float, ...] = field(default=())


def _count(metrics: Optional[MetricsCollector], phase: str, ops: int) -> None:
    if metrics is not None:
        metrics.add_ops(phase, ops)


def _require_full_column_rank_shape(a: np.ndarray) -> None:
    rows, cols = a.shape
    if rows < cols:
        raise DimensionError(
            f"A is {rows}x{cols}: the verification identity R4 A g = g needs A+ A = I, "
            f"which requires rows >= cols and full column rank"
        )


def transform1(a, keys: MaskKeys, metrics: Optional[MetricsCollector] = None) -> np.ndarray:
    """A' = P A Q using the structured products"""
    a = _operand(a)
    if keys.m != a.shape[0] or keys.n != a.shape[1]:
        raise DimensionError(f"Keys are sized {keys.m}x{keys.n} but A is {a.shape[0]}x{a.shape[1]}")
    a_prime = apply_scaled_right(apply_signed_left(keys.p, a), keys.q)
    _count(metrics, 'transform', 2 * a.size)
    return a_prime


def recover1(masked_gram, keys: MaskKeys, metrics: Optional[MetricsCollector] = None) -> np.ndarray:
    """A^T A = (Q^T)^-1 (A'^T A') Q^-1"""
    gram = unconjugate_scaled(keys.q, masked_gram)
    _count(metrics, 'recover', gram.size)
    return gram


def transform2(gram, lam: float, keys: MaskKeys,
               metrics: Optional[MetricsCollector] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    R1 = lam*I + A^T A, R2 = Q^T R1 Q

    Returns:
        (R1, R2)
    """
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    r1 = add_scaled_identity(gram, lam)
    r2 = conjugate_scaled(keys.q, r1)
    _count(metrics, 'transform', 2 * r1.size + r1.shape[0])
    return r1, r2


def recover2(r3, keys: MaskKeys, metrics: Optional[MetricsCollector] = None) -> np.ndarray:
    """R4 = Q R3 P"""
    r3 = _operand(r3)
    if r3.shape != (keys.n, keys.m):
        raise DimensionError(f"R3 must be {keys.n}x{keys.m}, got {r3.shape[0]}x{r3.shape[1]}")
    r4 = apply_signed_right(apply_scaled_left(keys.q, r3), keys.p)
    _count(metrics, 'recover', 2 * r3.size)
    return r4


def _draw_gamma(rng: np.random.Generator, n: int) -> np.ndarray:
    gamma = rng.uniform(-1.0, 1.0, size=n)
    while not np.any(gamma):
        gamma = rng.uniform(-1.0, 1.0, size=n)
    return gamma


def _check_r4_shape(r4: np.ndarray, a: np.ndarray) -> None:
    if r4.shape != (a.shape[1], a.shape[0]):
        raise DimensionError(f"R4 must have the shape of A^T {a.shape[::-1]}, got {r4.shape}")


def verify(r4, a, rounds: int = DEFAULT_ROUNDS, tol: float = DEFAULT_TOLERANCE,
           rng: Optional[np.random.Generator] = None,
           metrics: Optional[MetricsCollector] = None) -> VerificationReport:
    """
    Check R4 A g = g for `rounds` random vectors g with entries uniform on [-1, 1]

    A round passes when ||R4 A g - g||_inf <= tol * ||g||_inf.
    """
    r4 = _operand(r4)
    a = _operand(a)
    _require_full_column_rank_shape(a)
    _check_r4_shape(r4, a)
    if rounds < 1:
        raise InvalidArgumentError(f"verification needs at least one round, got {rounds}")
    rng = rng if rng is not None else np.random.default_rng()

    residuals = []
    for _ in range(rounds):
        gamma = _draw_gamma(rng, a.shape[1])
        u = mat_vec(a, gamma)
        v = mat_vec(r4, u)
        residuals.append(float(np.max(np.abs(v - gamma)) / np.max(np.abs(gamma))))
    _count(metrics, 'verify', 2 * rounds * a.size)

    return _report(residuals, tol, 'pinv')


def verify_ridge(r4, a, lam: float, rounds: int = DEFAULT_ROUNDS, tol: float = DEFAULT_TOLERANCE,
                 rng: Optional[np.random.Generator] = None,
                 metrics: Optional[MetricsCollector] = None) -> VerificationReport:
    """
    Normal-equation form of the check: with u = A g and v = R4 u, a round passes when
    ||lam*v + A^T (A v) - A^T u||_inf <= tol * ||A^T u||_inf.

    Holds exactly for any lam > 0, so it stays usable when A has tiny singular values.
    A^T A v is formed from A, never from the Gram matrix the worker returned.
    """
    r4 = _operand(r4)
    a = _operand(a)
    _require_full_column_rank_shape(a)
    _check_r4_shape(r4, a)
    n = a.shape[1]
    if rounds < 1:
        raise InvalidArgumentError(f"verification needs at least one round, got {rounds}")
    rng = rng if rng is not None else np.random.default_rng()
    a_t = transpose(a)

    residuals = []
    for _ in range(rounds):
        gamma = _draw_gamma(rng, n)
        u = mat_vec(a, gamma)
        v = mat_vec(r4, u)
        rhs = mat_vec(a_t, u)
        lhs = lam * v + mat_vec(a_t, mat_vec(a, v))
        scale = float(np.max(np.abs(rhs)))
        residual = float(np.max(np.abs(lhs - rhs)))
        residuals.append(residual / scale if scale > 0 else residual)
    _count(metrics, 'verify', rounds * (5 * a.size + n))

    return _report(residuals, tol, 'ridge')


def _report(residuals, tol: float, identity: str) -> VerificationReport:
    worst = max(residuals)
    return VerificationReport(accepted=all(r <= tol for r in residuals), rounds=len(residuals),
                              max_residual=worst, tolerance=tol, identity=identity,
                              residuals=tuple(residuals))


def local_pinv(a, lam: float = DEFAULT_LAMBDA,
               metrics: Optional[MetricsCollector] = None) -> np.ndarray:
    """(lam*I + A^T A)^-1 A^T computed entirely on the client; the no-outsourcing baseline"""
    a = _operand(a)
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    rows, cols = a.shape
    a_t = transpose(a)
    r1 = add_scaled_identity(mat_mul(a_t, a), lam)
    result = mat_mul(dense_inverse(r1), a_t)
    _count(metrics, 'local', cols * rows * cols + inverse_ops(cols) + cols * cols * rows)
    return result


class Channel(Protocol):
    """Anything that can run the two rounds against a worker"""

    def gram(self, session_id: int, a_prime: np.ndarray) -> np.ndarray: ...

    def invprod(self, session_id: int, r2: np.ndarray) -> np.ndarray: ...


def _unwrap(response: Frame, session_id: int, expected: Opcode) -> np.ndarray:
    if response.opcode == Opcode.ERROR:
        code, message = decode_error(response.payload)
        raise WorkerError(code, message)
    if response.opcode != expected:
        raise ProtocolError(ErrorCategory.MALFORMED_PAYLOAD,
                            f"expected {expected.name}, got {Opcode(response.opcode).name}")
    if response.session_id != session_id:
        raise ProtocolError(ErrorCategory.MALFORMED_PAYLOAD,
                            f"response for session {response.session_id:016x}, expected {session_id:016x}")
    try:
        return deserialize_matrix(response.payload)
    except (MatrixFormatError, NonFiniteError) as e:
        raise ProtocolError(ErrorCategory.MALFORMED_PAYLOAD, f"bad matrix in {expected.name}: {e}")


def parse_address(text: str, default_port: int = 7541) -> Tuple[str, int]:
    """'host:port', ':port', 'port' or 'host' -> (host, port)"""
    text = text.strip()
    if text.isdigit():
        return '127.0.0.1', int(text)
    host, sep, port = text.rpartition(':')
    if not sep:
        return text, default_port
    try:
        return host or '127.0.0.1', int(port)
    except ValueError:
        raise InvalidArgumentError(f"Bad worker address '{text}'")


class SocketChannel:
    """Request/response channel over a connected stream socket (TCP or socketpair)"""

    def __init__(self, sock: socket.socket, max_payload: int = MAX_PAYLOAD):
        self.sock = sock
        self.max_payload = max_payload
        self.rfile = sock.makefile('rb')
        self.wfile = sock.makefile('wb')

    @classmethod
    def connect_tcp(cls, address: str, default_port: int = 7541, timeout: Optional[float] = 60.0,
                    max_payload: int = MAX_PAYLOAD) -> 'SocketChannel':
        host, port = parse_address(address, default_port)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise ProtocolError(ErrorCategory.CONNECTION_CLOSED, f"cannot reach worker at {host}:{port}: {e}")
        logger.info(f"Connected to cloud worker at {host}:{port}")
        return cls(sock, max_payload)

    def _call(self, opcode: Opcode, expected: Opcode, session_id: int, matrix: np.ndarray) -> np.ndarray:
        try:
            write_frame(self.wfile, Frame(opcode, session_id, serialize_matrix(matrix)), self.max_payload)
            response = read_frame(self.rfile, self.max_payload)
        except OSError as e:
            raise ProtocolError(ErrorCategory.CONNECTION_CLOSED, f"transport failure: {e}")
        return _unwrap(response, session_id, expected)

    def gram(self, session_id: int, a_prime: np.ndarray) -> np.ndarray:
        return self._call(Opcode.GRAM_REQ, Opcode.GRAM_RESP, session_id, a_prime)

    def invprod(self, session_id: int, r2: np.ndarray) -> np.ndarray:
        return self._call(Opcode.INVPROD_REQ, Opcode.INVPROD_RESP, session_id, r2)

    def close(self):
        for f in (self.rfile, self.wfile):
            try:
                f.close()
            except OSError:
                pass
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackChannel:
    """In-process channel: frames are encoded and decoded but never leave the process"""

    def __init__(self, worker, max_payload: int = MAX_PAYLOAD):
        self.worker = worker
        self.max_payload = max_payload

    def _call(self, opcode: Opcode, expected: Opcode, session_id: int, matrix: np.ndarray) -> np.ndarray:
        request = decode_frame(encode_frame(Frame(opcode, session_id, serialize_matrix(matrix)),
                                            self.max_payload), self.max_payload)
        response = decode_frame(encode_frame(self.worker.handle_frame(request), self.max_payload),
                                self.max_payload)
        return _unwrap(response, session_id, expected)

    def gram(self, session_id: int, a_prime: np.ndarray) -> np.ndarray:
        return self._call(Opcode.GRAM_REQ, Opcode.GRAM_RESP, session_id, a_prime)

    def invprod(self, session_id: int, r2: np.ndarray) -> np.ndarray:
        return self._call(Opcode.INVPROD_REQ, Opcode.INVPROD_RESP, session_id, r2)


class Stage(IntEnum):
    NEW = 0
    MASKED = 1
    GRAM_RECOVERED = 2
    R2_READY = 3
    RECOVERED = 4


class OutsourceSession:
    """
    Client-side state of one outsourcing run

    Steps must run in order: transform1, recover1, transform2, recover2, verify.
    The client's multiply-adds accumulate in `metrics` under the transform, recover
    and verify phases.
    """

    def __init__(self, a, lam: float, keys: MaskKeys, session_id: int = 0,
                 metrics: Optional[MetricsCollector] = None):
        self.a = _operand(a)
        if keys.m != self.a.shape[0] or keys.n != self.a.shape[1]:
            raise DimensionError(f"Keys are sized {keys.m}x{keys.n} but A is {self.a.shape}")
        if lam < 0:
            raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
        self.keys = keys
        self.lam = lam
        self.session_id = session_id
        self.metrics = metrics or MetricsCollector('client')
        self.stage = Stage.NEW

        self.a_prime: Optional[np.ndarray] = None
        self.gram: Optional[np.ndarray] = None
        self.r1: Optional[np.ndarray] = None
        self.r2: Optional[np.ndarray] = None
        self.r3: Optional[np.ndarray] = None
        self.r4: Optional[np.ndarray] = None

    def _advance(self, expected: Stage, step: str, to: Stage):
        if self.stage != expected:
            raise StageError(f"{step} requires stage {expected.name}, session is at {self.stage.name}")
        self.stage = to

    @property
    def op_counter(self) -> int:
        return self.metrics.total_ops(('transform', 'recover', 'verify'))

    def transform1(self) -> np.ndarray:
        self._advance(Stage.NEW, 'transform1', Stage.MASKED)
        with self.metrics.phase_timer('transform'):
            self.a_prime = transform1(self.a, self.keys, self.metrics)
        return self.a_prime

    def recover1(self, masked_gram) -> np.ndarray:
        self._advance(Stage.MASKED, 'recover1', Stage.GRAM_RECOVERED)
        with self.metrics.phase_timer('recover'):
            self.gram = recover1(masked_gram, self.keys, self.metrics)
        return self.gram

    def transform2(self) -> np.ndarray:
        self._advance(Stage.GRAM_RECOVERED, 'transform2', Stage.R2_READY)
        with self.metrics.phase_timer('transform'):
            self.r1, self.r2 = transform2(self.gram, self.lam, self.keys, self.metrics)
        return self.r2

    def recover2(self, r3) -> np.ndarray:
        self._advance(Stage.R2_READY, 'recover2', Stage.RECOVERED)
        self.r3 = _operand(r3)
        with self.metrics.phase_timer('recover'):
            self.r4 = recover2(self.r3, self.keys, self.metrics)
        return self.r4

    def verify(self, rounds: int = DEFAULT_ROUNDS, tol: float = DEFAULT_TOLERANCE,
               rng: Optional[np.random.Generator] = None, identity: str = 'pinv') -> VerificationReport:
        if self.stage != Stage.RECOVERED:
            raise StageError(f"verify requires stage RECOVERED, session is at {self.stage.name}")
        if identity not in VERIFY_IDENTITIES:
            raise InvalidArgumentError(f"Unknown verification identity '{identity}'")
        with self.metrics.phase_timer('verify'):
            if identity == 'ridge':
                return verify_ridge(self.r4, self.a, self.lam, rounds, tol, rng, self.metrics)
            return verify(self.r4, self.a, rounds, tol, rng, self.metrics)

    def run(self, channel: Channel, rounds: int = DEFAULT_ROUNDS, tol: float = DEFAULT_TOLERANCE,
            rng: Optional[np.random.Generator] = None, identity: str = 'pinv') -> VerificationReport:
        """Drive both rounds through `channel` and verify the recovered R4"""
        sid = self.session_id
        logger.debug(f"[{sid:016x}] Masking {self.a.shape[0]}x{self.a.shape[1]} input")
        masked_gram = channel.gram(sid, self.transform1())
        self.recover1(masked_gram)
        r3 = channel.invprod(sid, self.transform2())
        self.recover2(r3)
        return self.verify(rounds, tol, rng, identity)


def _verify_rng(keys: MaskKeys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(abs(keys.seed), spawn_key=(1,)))


def outsourced_pinv(a, lam: float, keys: MaskKeys, channel: Channel,
                    rounds: int = DEFAULT_ROUNDS, tol: float = DEFAULT_TOLERANCE,
                    rng: Optional[np.random.Generator] = None, identity: str = 'ridge',
                    retries: int = 0, metrics: Optional[MetricsCollector] = None) -> np.ndarray:
    """
    Compute (lam*I + A^T A)^-1 A^T with the help of an untrusted worker

    Args:
        a: Input matrix with rows >= cols
        lam: Ridge coefficient, > 0
        keys: Masking keys sized to A
        channel: SocketChannel or LoopbackChannel
        rounds: Independent random vectors in the check
        tol: Verification tolerance
        rng: Source of session ids and check vectors; derived from the key seed if omitted
        identity: 'pinv' (R4 A g = g) or 'ridge' (normal equations)
        retries: Extra attempts with a fresh session id after a rejection
        metrics: Collector for the client's multiply-adds

    Returns:
        R4, accepted by the check

    Raises:
        ResultRejectedError: every attempt failed verification
        ProtocolError / WorkerError: transport or worker failure
    """
    a = _operand(a)
    _require_full_column_rank_shape(a)
    if lam <= 0:
        raise InvalidArgumentError(f"lambda must be > 0 for outsourcing, got {lam}")
    rng = rng if rng is not None else _verify_rng(keys)
    metrics = metrics or MetricsCollector('client')

    report = None
    for attempt in range(1, retries + 2):
        session_id = int(rng.integers(1, 2 ** 63, dtype=np.int64))
        session = OutsourceSession(a, lam, keys, session_id=session_id, metrics=metrics)
        report = session.run(channel, rounds, tol, rng, identity)
        if report.accepted:
            logger.info(f"[{session_id:016x}] Result accepted (residual {report.max_residual:.2e})")
            return session.r4
        logger.warning(f"[{session_id:016x}] Result rejected on attempt {attempt}: "
                       f"residual {report.max_residual:.3e} > {tol:.1e}")

    raise ResultRejectedError(report, attempts=retries + 1)
