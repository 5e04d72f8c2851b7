"""Binary wire format shared by the edge server and the client simulator.

Every message is a 10-byte header followed by its payload::

    magic "EVER" (45 56 45 52) | version u8 = 1 | type u8 | length u32

All integers are big-endian. Payload layouts:

    1 SessionInit     model_id u32, step_index u32, step_class u32
    2 ReferenceFrame  alpha_milli u16, codec u8, n u16, n x (x f32, y f32), size u32, bytes
    3 TargetFrame     n u16, n x (x f32, y f32), size u32, bytes
    4 VerifyResult    pass u8, iou_micro u32, server_decode_us u32, server_postproc_us u32
    5 StepControl     next_step u32
    6 Error           code u16, size u16, UTF-8 bytes

`codec` is 0 for Lossless and the quality (1-100) for Lossy.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, ClassVar

from ..errors import (
    BadMagic,
    ConnectionLost,
    MalformedPayload,
    TruncatedPayload,
    UnknownType,
    UnsupportedVersion,
)

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER",
    "MAX_PAYLOAD",
    "MessageType",
    "ErrorCode",
    "SessionInit",
    "ReferenceFrame",
    "TargetFrame",
    "VerifyResult",
    "StepControl",
    "Error",
    "WireMessage",
    "encode_message",
    "decode_message",
    "decode_header",
    "MessageReader",
]

MAGIC = b"EVER"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
MAX_PAYLOAD = 64 * 1024 * 1024
IOU_MICRO_MAX = 1_000_000

Points = tuple[tuple[float, float], ...]


class MessageType(IntEnum):
    SESSION_INIT = 1
    REFERENCE_FRAME = 2
    TARGET_FRAME = 3
    VERIFY_RESULT = 4
    STEP_CONTROL = 5
    ERROR = 6


class ErrorCode(IntEnum):
    OUT_OF_ORDER = 1
    BAD_MESSAGE = 2
    SEGMENTER_FAILURE = 3
    ALIGNMENT = 4
    INTERNAL = 5


class _Cursor:
    """Reads fixed-layout fields from a payload, raising on underrun."""

    def __init__(self, data: bytes, kind: MessageType):
        self.data = data
        self.offset = 0
        self.kind = kind

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise TruncatedPayload(f"{self.kind.name} payload ends early at byte {self.offset}")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def take_bytes(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedPayload(f"{self.kind.name} payload ends early at byte {self.offset}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def take_points(self) -> Points:
        (count,) = self.take(">H")
        flat = self.take(f">{2 * count}f")
        return tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2))

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise MalformedPayload(
                f"{self.kind.name} payload has {len(self.data) - self.offset} trailing bytes"
            )


def _pack_points(points: Points) -> bytes:
    if len(points) > 0xFFFF:
        raise MalformedPayload(f"too many alignment points: {len(points)}")
    flat = [float(v) for p in points for v in p]
    if not all(math.isfinite(v) for v in flat):
        raise MalformedPayload("alignment points must be finite")
    return struct.pack(f">H{len(flat)}f", len(points), *flat)


@dataclass(frozen=True)
class SessionInit:
    TYPE: ClassVar[MessageType] = MessageType.SESSION_INIT
    model_id: int
    step_index: int
    step_class: int

    def pack(self) -> bytes:
        return struct.pack(">III", self.model_id, self.step_index, self.step_class)

    @classmethod
    def unpack(cls, c: _Cursor) -> SessionInit:
        return cls(*c.take(">III"))


@dataclass(frozen=True)
class ReferenceFrame:
    TYPE: ClassVar[MessageType] = MessageType.REFERENCE_FRAME
    alpha_milli: int
    codec: int
    alignment_points: Points
    payload: bytes

    def pack(self) -> bytes:
        if not 0 <= self.codec <= 100:
            raise MalformedPayload(f"codec byte must be 0..100, got {self.codec}")
        return (
            struct.pack(">HB", self.alpha_milli, self.codec)
            + _pack_points(self.alignment_points)
            + struct.pack(">I", len(self.payload))
            + self.payload
        )

    @classmethod
    def unpack(cls, c: _Cursor) -> ReferenceFrame:
        alpha_milli, codec = c.take(">HB")
        if codec > 100:
            raise MalformedPayload(f"codec byte must be 0..100, got {codec}")
        points = c.take_points()
        (size,) = c.take(">I")
        return cls(alpha_milli, codec, points, c.take_bytes(size))


@dataclass(frozen=True)
class TargetFrame:
    TYPE: ClassVar[MessageType] = MessageType.TARGET_FRAME
    alignment_points: Points
    payload: bytes

    def pack(self) -> bytes:
        return _pack_points(self.alignment_points) + struct.pack(">I", len(self.payload)) + self.payload

    @classmethod
    def unpack(cls, c: _Cursor) -> TargetFrame:
        points = c.take_points()
        (size,) = c.take(">I")
        return cls(points, c.take_bytes(size))


@dataclass(frozen=True)
class VerifyResult:
    TYPE: ClassVar[MessageType] = MessageType.VERIFY_RESULT
    passed: bool
    iou_micro: int
    server_decode_us: int
    server_postproc_us: int

    def pack(self) -> bytes:
        if not 0 <= self.iou_micro <= IOU_MICRO_MAX:
            raise MalformedPayload(f"iou_micro out of range: {self.iou_micro}")
        return struct.pack(
            ">BIII", int(self.passed), self.iou_micro, self.server_decode_us, self.server_postproc_us
        )

    @classmethod
    def unpack(cls, c: _Cursor) -> VerifyResult:
        passed, iou_micro, decode_us, postproc_us = c.take(">BIII")
        if passed > 1:
            raise MalformedPayload(f"pass byte must be 0 or 1, got {passed}")
        if iou_micro > IOU_MICRO_MAX:
            raise MalformedPayload(f"iou_micro out of range: {iou_micro}")
        return cls(bool(passed), iou_micro, decode_us, postproc_us)


@dataclass(frozen=True)
class StepControl:
    TYPE: ClassVar[MessageType] = MessageType.STEP_CONTROL
    next_step: int

    def pack(self) -> bytes:
        return struct.pack(">I", self.next_step)

    @classmethod
    def unpack(cls, c: _Cursor) -> StepControl:
        return cls(*c.take(">I"))


@dataclass(frozen=True)
class Error:
    TYPE: ClassVar[MessageType] = MessageType.ERROR
    code: int
    message: str

    def pack(self) -> bytes:
        text = self.message.encode("utf-8")
        if len(text) > 0xFFFF:
            text = text[:0xFFFF].decode("utf-8", errors="ignore").encode("utf-8")
        return struct.pack(">HH", self.code, len(text)) + text

    @classmethod
    def unpack(cls, c: _Cursor) -> Error:
        code, size = c.take(">HH")
        try:
            return cls(code, c.take_bytes(size).decode("utf-8"))
        except UnicodeDecodeError as e:
            raise MalformedPayload(f"error text is not UTF-8: {e}") from e


type WireMessage = SessionInit | ReferenceFrame | TargetFrame | VerifyResult | StepControl | Error

_CLASSES: dict[MessageType, type] = {
    cls.TYPE: cls for cls in (SessionInit, ReferenceFrame, TargetFrame, VerifyResult, StepControl, Error)
}


def encode_message(m: WireMessage) -> bytes:
    try:
        payload = m.pack()
    except struct.error as e:
        raise MalformedPayload(f"cannot encode {type(m).__name__}: {e}") from e
    if len(payload) > MAX_PAYLOAD:
        raise MalformedPayload(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, VERSION, int(m.TYPE), len(payload)) + payload


def decode_header(header: bytes) -> tuple[int, int, int]:
    """Validate the magic and return `(version, type, length)` without judging them."""

    if len(header) < HEADER.size:
        raise TruncatedPayload(f"header needs {HEADER.size} bytes, got {len(header)}")
    magic, version, kind, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    return version, kind, length


def _decode_payload(version: int, kind: int, payload: bytes) -> WireMessage:
    if version != VERSION:
        raise UnsupportedVersion(f"protocol version {version} is not supported")
    try:
        message_type = MessageType(kind)
    except ValueError:
        raise UnknownType(f"unknown message type {kind}") from None
    cursor = _Cursor(payload, message_type)
    message = _CLASSES[message_type].unpack(cursor)
    cursor.finish()
    return message


def decode_message(data: bytes) -> WireMessage:
    version, kind, length = decode_header(data)
    if len(data) < HEADER.size + length:
        raise TruncatedPayload(f"payload needs {length} bytes, got {len(data) - HEADER.size}")
    if len(data) > HEADER.size + length:
        raise MalformedPayload(f"{len(data) - HEADER.size - length} bytes after the message")
    return _decode_payload(version, kind, data[HEADER.size :])


class MessageReader:
    """Reads whole messages from a byte source such as `socket.recv`.

    The payload is consumed in full before it is judged, so after a version,
    type or payload error the next message still parses. A bad magic leaves
    the stream unsynchronised.
    """

    def __init__(self, recv: Callable[[int], bytes]):
        self.recv = recv

    def _exactly(self, size: int, *, at_boundary: bool = False) -> bytes | None:
        chunks = []
        remaining = size
        while remaining > 0:
            chunk = self.recv(min(remaining, 1 << 16))
            if not chunk:
                if at_boundary and remaining == size:
                    return None
                raise ConnectionLost(f"peer closed the connection {size - remaining}/{size} bytes into a read")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def read(self) -> WireMessage | None:
        """The next message, or None at a clean end of stream."""

        header = self._exactly(HEADER.size, at_boundary=True)
        if header is None:
            return None
        version, kind, length = decode_header(header)
        if length > MAX_PAYLOAD:
            raise MalformedPayload(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
        payload = self._exactly(length) or b""
        return _decode_payload(version, kind, payload)
