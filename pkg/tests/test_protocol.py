import io
import struct

import numpy as np
import pytest

from mrverify.errors import (
    BadMagic,
    ConnectionLost,
    MalformedPayload,
    TruncatedPayload,
    UnknownType,
    UnsupportedVersion,
)
from mrverify.protocol.wire import (
    HEADER,
    MAGIC,
    Error,
    ErrorCode,
    MessageReader,
    ReferenceFrame,
    SessionInit,
    StepControl,
    TargetFrame,
    VerifyResult,
    decode_header,
    decode_message,
    encode_message,
)


def random_points(rng: np.random.Generator) -> tuple[tuple[float, float], ...]:
    values = rng.uniform(-1000, 1000, (int(rng.integers(0, 12)), 2)).astype(np.float32)
    return tuple((float(x), float(y)) for x, y in values)


def random_message(rng: np.random.Generator):
    u32 = lambda: int(rng.integers(0, 2**32))  # noqa: E731
    blob = lambda: rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8).tobytes()  # noqa: E731
    match int(rng.integers(1, 7)):
        case 1:
            return SessionInit(u32(), u32(), u32())
        case 2:
            return ReferenceFrame(int(rng.integers(0, 2**16)), int(rng.integers(0, 101)), random_points(rng), blob())
        case 3:
            return TargetFrame(random_points(rng), blob())
        case 4:
            return VerifyResult(bool(rng.integers(0, 2)), int(rng.integers(0, 1_000_001)), u32(), u32())
        case 5:
            return StepControl(u32())
        case _:
            text = "".join(chr(int(c)) for c in rng.integers(32, 0x2FF, int(rng.integers(0, 20))))
            return Error(int(rng.integers(0, 2**16)), text)


def reader(data: bytes) -> MessageReader:
    return MessageReader(io.BytesIO(data).read)


class TestEncoding:
    def test_step_control_bytes(self):
        expected = bytes.fromhex("45 56 45 52 01 05 00 00 00 04 00 00 00 07")
        assert encode_message(StepControl(7)) == expected
        assert decode_message(expected) == StepControl(7)

    def test_header_layout(self):
        data = encode_message(SessionInit(1, 2, 3))
        assert data[:4] == MAGIC
        assert decode_header(data) == (1, 1, 12)
        assert data[HEADER.size :] == struct.pack(">III", 1, 2, 3)

    def test_random_roundtrip(self):
        rng = np.random.default_rng(10_000)
        for _ in range(10_000):
            message = random_message(rng)
            data = encode_message(message)
            decoded = decode_message(data)
            assert decoded == message
            assert encode_message(decoded) == data

    def test_verify_result_range(self):
        with pytest.raises(MalformedPayload):
            encode_message(VerifyResult(True, 1_000_001, 0, 0))

    def test_codec_range(self):
        with pytest.raises(MalformedPayload):
            encode_message(ReferenceFrame(1000, 101, (), b""))

    def test_non_finite_points(self):
        with pytest.raises(MalformedPayload):
            encode_message(TargetFrame(((float("nan"), 0.0),), b""))

    def test_field_overflow(self):
        with pytest.raises(MalformedPayload):
            encode_message(StepControl(2**32))


class TestDecodingErrors:
    def test_bad_magic(self):
        data = bytearray(encode_message(StepControl(1)))
        data[0] = ord("X")
        with pytest.raises(BadMagic):
            decode_message(bytes(data))

    def test_unsupported_version(self):
        data = bytearray(encode_message(StepControl(1)))
        data[4] = 2
        with pytest.raises(UnsupportedVersion):
            decode_message(bytes(data))

    def test_unknown_type(self):
        data = bytearray(encode_message(StepControl(1)))
        data[5] = 9
        with pytest.raises(UnknownType):
            decode_message(bytes(data))

    def test_truncated(self):
        data = encode_message(SessionInit(1, 2, 3))
        with pytest.raises(TruncatedPayload):
            decode_message(data[:-1])
        with pytest.raises(TruncatedPayload):
            decode_message(data[:5])

    def test_short_declared_payload(self):
        payload = struct.pack(">II", 1, 2)
        data = HEADER.pack(MAGIC, 1, 1, len(payload)) + payload
        with pytest.raises(TruncatedPayload):
            decode_message(data)

    def test_trailing_bytes(self):
        payload = struct.pack(">II", 1, 2)
        data = HEADER.pack(MAGIC, 1, 5, len(payload)) + payload
        with pytest.raises(MalformedPayload):
            decode_message(data)
        with pytest.raises(MalformedPayload):
            decode_message(encode_message(StepControl(1)) + b"\x00")

    def test_bad_pass_byte(self):
        payload = struct.pack(">BIII", 2, 0, 0, 0)
        with pytest.raises(MalformedPayload):
            decode_message(HEADER.pack(MAGIC, 1, 4, len(payload)) + payload)

    def test_bad_utf8(self):
        payload = struct.pack(">HH", 1, 2) + b"\xff\xfe"
        with pytest.raises(MalformedPayload):
            decode_message(HEADER.pack(MAGIC, 1, 6, len(payload)) + payload)


class TestMessageReader:
    def test_stream(self):
        messages = [SessionInit(4, 5, 6), TargetFrame(((1.5, 2.5),) * 4, b"abc"), Error(int(ErrorCode.INTERNAL), "boom")]
        stream = reader(b"".join(encode_message(m) for m in messages))
        assert [stream.read() for _ in messages] == messages
        assert stream.read() is None

    def test_resync_after_bad_type(self):
        bad = HEADER.pack(MAGIC, 1, 42, 3) + b"xyz"
        stream = reader(bad + encode_message(StepControl(3)))
        with pytest.raises(UnknownType):
            stream.read()
        assert stream.read() == StepControl(3)

    def test_resync_after_bad_version(self):
        bad = HEADER.pack(MAGIC, 7, 5, 4) + b"\x00" * 4
        stream = reader(bad + encode_message(StepControl(9)))
        with pytest.raises(UnsupportedVersion):
            stream.read()
        assert stream.read() == StepControl(9)

    def test_cut_mid_message(self):
        data = encode_message(TargetFrame((), b"0123456789"))
        with pytest.raises(ConnectionLost):
            reader(data[:-3]).read()
        with pytest.raises(ConnectionLost):
            reader(data[:4]).read()

    def test_oversized_declaration(self):
        with pytest.raises(MalformedPayload):
            reader(HEADER.pack(MAGIC, 1, 2, 2**31)).read()
