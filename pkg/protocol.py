#!/usr/bin/env python3
"""
Wire Protocol for PBLS
Length-prefixed binary frames exchanged between the client and the cloud worker.

Frame layout (22-byte header, little-endian):
    magic        4 bytes   b'PBLS'
    version      1 byte    1
    opcode       1 byte    see Opcode
    session_id   8 bytes   u64
    payload_len  8 bytes   u64
    payload      payload_len bytes
"""

import logging
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import BinaryIO, List, Optional, Tuple

logger = logging.getLogger(__name__)

MAGIC = b'PBLS'
VERSION = 1
HEADER = struct.Struct('<4sBBQQ')
HEADER_SIZE = HEADER.size  # 22
MAX_PAYLOAD = 2 ** 32
ERROR_HEADER = struct.Struct('<H')


class Opcode(IntEnum):
    GRAM_REQ = 0x01
    GRAM_RESP = 0x81
    INVPROD_REQ = 0x02
    INVPROD_RESP = 0x82
    ERROR = 0xFF


class ErrorCategory(str, Enum):
    BAD_MAGIC = 'bad-magic'
    UNSUPPORTED_VERSION = 'unsupported-version'
    UNKNOWN_OPCODE = 'unknown-opcode'
    TRUNCATED = 'truncated'
    OVERSIZE = 'oversize'
    MALFORMED_PAYLOAD = 'malformed-payload'
    CONNECTION_CLOSED = 'connection-closed'
    WORKER_ERROR = 'worker-error'


class ErrorCode(IntEnum):
    """Codes carried in the first two bytes of an ERROR payload"""
    MALFORMED = 1
    SINGULAR = 2
    NO_SESSION = 3
    BAD_REQUEST = 4
    INTERNAL = 5


class ProtocolError(Exception):
    """Raised for any framing or transport failure"""

    def __init__(self, category: ErrorCategory, message: str):
        super().__init__(f"{category.value}: {message}")
        self.category = category


class WorkerError(ProtocolError):
    """The worker answered with an ERROR frame"""

    def __init__(self, code: ErrorCode, message: str):
        super().__init__(ErrorCategory.WORKER_ERROR, f"[{code.name.lower()}] {message}")
        self.code = code


@dataclass(frozen=True)
class Frame:
    """One protocol message"""
    opcode: Opcode
    session_id: int
    payload: bytes = b''
    version: int = VERSION

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def encode_frame(frame: Frame, max_payload: int = MAX_PAYLOAD) -> bytes:
    """
    Serialize a frame; the result is HEADER_SIZE + payload_len bytes

    Raises:
        ProtocolError: unknown opcode, out-of-range session id or oversize payload
    """
    try:
        opcode = Opcode(frame.opcode)
    except ValueError:
        raise ProtocolError(ErrorCategory.UNKNOWN_OPCODE, f"opcode {frame.opcode!r} is not defined")
    if len(frame.payload) > max_payload:
        raise ProtocolError(ErrorCategory.OVERSIZE,
                            f"payload of {len(frame.payload)} bytes exceeds {max_payload}")
    if not 0 <= frame.session_id < 2 ** 64:
        raise ProtocolError(ErrorCategory.MALFORMED_PAYLOAD, f"session id {frame.session_id} out of range")
    header = HEADER.pack(MAGIC, frame.version, int(opcode), frame.session_id, len(frame.payload))
    return header + bytes(frame.payload)


def parse_header(header: bytes, max_payload: int = MAX_PAYLOAD) -> Tuple[int, Opcode, int, int]:
    """
    Validate a 22-byte header before anything is allocated for the payload

    Returns:
        (version, opcode, session_id, payload_len)
    """
    if len(header) < HEADER_SIZE:
        raise ProtocolError(ErrorCategory.TRUNCATED, f"header needs {HEADER_SIZE} bytes, got {len(header)}")
    magic, version, opcode, session_id, payload_len = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise ProtocolError(ErrorCategory.BAD_MAGIC, f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(ErrorCategory.UNSUPPORTED_VERSION, f"version {version} is not supported")
    try:
        op = Opcode(opcode)
    except ValueError:
        raise ProtocolError(ErrorCategory.UNKNOWN_OPCODE, f"opcode 0x{opcode:02x} is not defined")
    if payload_len > max_payload:
        raise ProtocolError(ErrorCategory.OVERSIZE, f"declared payload {payload_len} exceeds {max_payload}")
    return version, op, session_id, payload_len


def decode_frame(data: bytes, max_payload: int = MAX_PAYLOAD) -> Frame:
    """
    Decode exactly one frame from a complete buffer

    Raises:
        ProtocolError: bad magic/version/opcode, truncation, or trailing bytes
    """
    version, opcode, session_id, payload_len = parse_header(data, max_payload)
    end = HEADER_SIZE + payload_len
    if len(data) < end:
        raise ProtocolError(ErrorCategory.TRUNCATED, f"payload needs {payload_len} bytes, got {len(data) - HEADER_SIZE}")
    if len(data) > end:
        raise ProtocolError(ErrorCategory.MALFORMED_PAYLOAD, f"{len(data) - end} trailing bytes after frame")
    return Frame(opcode=opcode, session_id=session_id, payload=bytes(data[HEADER_SIZE:end]), version=version)


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, collect complete frames"""

    def __init__(self, max_payload: int = MAX_PAYLOAD):
        self.max_payload = max_payload
        self.buffer = bytearray()
        self._pending: Optional[Tuple[int, Opcode, int, int]] = None

    def feed(self, data: bytes) -> List[Frame]:
        """Append data; return every frame completed by it"""
        self.buffer.extend(data)
        frames = []
        while True:
            if self._pending is None:
                if len(self.buffer) < HEADER_SIZE:
                    break
                self._pending = parse_header(bytes(self.buffer[:HEADER_SIZE]), self.max_payload)
            version, opcode, session_id, payload_len = self._pending
            end = HEADER_SIZE + payload_len
            if len(self.buffer) < end:
                break
            frames.append(Frame(opcode=opcode, session_id=session_id,
                                payload=bytes(self.buffer[HEADER_SIZE:end]), version=version))
            del self.buffer[:end]
            self._pending = None
        return frames

    @property
    def buffered(self) -> int:
        return len(self.buffer)


def _read_exact(stream: BinaryIO, count: int, at_boundary: bool) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            got = count - remaining
            if at_boundary and got == 0:
                raise ProtocolError(ErrorCategory.CONNECTION_CLOSED, "peer closed the connection")
            raise ProtocolError(ErrorCategory.TRUNCATED, f"stream ended after {got} of {count} bytes")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def read_frame(stream: BinaryIO, max_payload: int = MAX_PAYLOAD) -> Frame:
    """Blocking read of one frame from a file-like byte stream"""
    header = _read_exact(stream, HEADER_SIZE, at_boundary=True)
    version, opcode, session_id, payload_len = parse_header(header, max_payload)
    payload = _read_exact(stream, payload_len, at_boundary=False) if payload_len else b''
    return Frame(opcode=opcode, session_id=session_id, payload=payload, version=version)


def write_frame(stream: BinaryIO, frame: Frame, max_payload: int = MAX_PAYLOAD) -> None:
    stream.write(encode_frame(frame, max_payload))
    stream.flush()


def encode_error(code: ErrorCode, message: str) -> bytes:
    """ERROR payload: 2-byte code (LE) followed by a UTF-8 message"""
    return ERROR_HEADER.pack(int(code)) + message.encode('utf-8')


def decode_error(payload: bytes) -> Tuple[ErrorCode, str]:
    if len(payload) < ERROR_HEADER.size:
        raise ProtocolError(ErrorCategory.MALFORMED_PAYLOAD, "ERROR payload shorter than its code")
    (raw,) = ERROR_HEADER.unpack_from(payload)
    try:
        code = ErrorCode(raw)
    except ValueError:
        code = ErrorCode.INTERNAL
    return code, payload[ERROR_HEADER.size:].decode('utf-8', errors='replace')


def error_frame(session_id: int, code: ErrorCode, message: str) -> Frame:
    return Frame(opcode=Opcode.ERROR, session_id=session_id, payload=encode_error(code, message))
