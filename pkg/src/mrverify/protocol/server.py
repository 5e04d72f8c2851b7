"""The edge server: one thread per connection, a shared read-only segmenter.

Per connection the server expects a SessionInit, then ReferenceFrame /
TargetFrame pairs. Each pair is verified and answered with a VerifyResult and
a StepControl that advances the step on a pass and repeats it on a fail. A new
SessionInit may arrive between pairs; it restarts the step counter at its
`step_index`.
"""

from __future__ import annotations

import socket
import socketserver
import threading
import time
from dataclasses import dataclass

import numpy as np

from ..errors import (
    ConnectionLost,
    CorruptStream,
    GeometryError,
    ImagingError,
    MrVerifyError,
    ProtocolError,
    SegmentationError,
    VerificationError,
)
from ..imaging import CodecSpec, Frame, decode
from ..log import get_logger
from ..pipeline import PairVerifier
from ..segmentation import FrameKey
from .wire import (
    Error,
    ErrorCode,
    MessageReader,
    ReferenceFrame,
    SessionInit,
    StepControl,
    TargetFrame,
    VerifyResult,
    WireMessage,
    encode_message,
)

__all__ = ["EdgeServer", "serve", "parse_endpoint"]

logger = get_logger("mrverify.server")


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


@dataclass
class _PendingReference:
    layer: Frame
    points: np.ndarray | None
    codec: int
    alpha_milli: int


class _Close(Exception):
    """Internal: an Error was sent and the connection must end."""


class _SessionHandler(socketserver.BaseRequestHandler):
    server: _ThreadingServer

    def setup(self) -> None:
        self.session: SessionInit | None = None
        self.step = 0
        self.reference: _PendingReference | None = None
        self.peer = "%s:%s" % self.client_address[:2]
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self.server.connections_lock:
            self.server.connections.add(self.request)

    def finish(self) -> None:
        with self.server.connections_lock:
            self.server.connections.discard(self.request)

    def send(self, message: WireMessage) -> None:
        self.request.sendall(encode_message(message))

    def fail(self, code: ErrorCode, text: str, *, close: bool) -> None:
        logger.warning("Error reply", f"{self.peer}: [{code.name}] {text}")
        self.send(Error(int(code), text))
        if close:
            raise _Close()

    def handle(self) -> None:
        logger.info("Session opened", self.peer)
        reader = MessageReader(self.request.recv)
        try:
            while True:
                try:
                    message = reader.read()
                except ConnectionLost:
                    break
                except ProtocolError as e:
                    self.fail(ErrorCode.BAD_MESSAGE, e.message, close=True)
                if message is None:
                    break
                self.dispatch(message)
        except _Close:
            pass
        except OSError as e:
            logger.warning("Connection error", f"{self.peer}: {e}")
        finally:
            logger.info("Session closed", self.peer)

    def dispatch(self, message: WireMessage) -> None:
        match message:
            case SessionInit():
                self.session = message
                self.step = message.step_index
                self.reference = None
                logger.debug(
                    "Session init",
                    f"{self.peer}: model={message.model_id} step={message.step_index} class={message.step_class}",
                )
            case ReferenceFrame():
                if self.session is None:
                    self.fail(ErrorCode.OUT_OF_ORDER, "ReferenceFrame before SessionInit", close=True)
                self.on_reference(message)
            case TargetFrame():
                if self.session is None or self.reference is None:
                    self.fail(ErrorCode.OUT_OF_ORDER, "TargetFrame before ReferenceFrame", close=True)
                self.on_target(message)
            case _:
                self.fail(ErrorCode.OUT_OF_ORDER, f"{type(message).__name__} is not a client message", close=True)

    def on_reference(self, message: ReferenceFrame) -> None:
        expected = self.server.codec
        if expected is not None and message.codec != expected.wire_code:
            logger.debug("Codec differs", f"{self.peer}: client uses {CodecSpec.from_wire_code(message.codec)}")
        try:
            layer = decode(message.payload)
        except CorruptStream as e:
            self.fail(ErrorCode.BAD_MESSAGE, e.message, close=True)
        points = np.asarray(message.alignment_points, dtype=np.float64) if message.alignment_points else None
        self.reference = _PendingReference(layer, points, message.codec, message.alpha_milli)

    def on_target(self, message: TargetFrame) -> None:
        assert self.session is not None and self.reference is not None
        reference, self.reference = self.reference, None
        t0 = time.perf_counter()
        try:
            target = decode(message.payload)
        except CorruptStream as e:
            self.fail(ErrorCode.BAD_MESSAGE, e.message, close=True)
        t1 = time.perf_counter()
        tgt_points = np.asarray(message.alignment_points, dtype=np.float64) if message.alignment_points else None
        key = FrameKey(self.session.model_id, self.step)
        try:
            decision = self.server.verifier.verify(
                key, self.session.step_class, reference.layer, target, reference.points, tgt_points
            )
        except GeometryError as e:
            self.fail(ErrorCode.ALIGNMENT, e.message, close=False)
            return
        except SegmentationError as e:
            self.fail(ErrorCode.SEGMENTER_FAILURE, e.message, close=False)
            return
        except (VerificationError, ImagingError) as e:
            self.fail(ErrorCode.BAD_MESSAGE, e.message, close=True)
        except MrVerifyError as e:
            self.fail(ErrorCode.INTERNAL, e.message, close=True)
        t2 = time.perf_counter()
        if decision.passed:
            self.step += 1
        logger.debug(
            "Verified",
            f"{self.peer}: step={key.step_index} iou={decision.iou:.4f} pass={decision.passed}",
        )
        self.send(
            VerifyResult(
                decision.passed,
                decision.iou_micro,
                int(round((t1 - t0) * 1e6)),
                int(round((t2 - t1) * 1e6)),
            )
        )
        self.send(StepControl(self.step))


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], verifier: PairVerifier, codec: CodecSpec | None):
        self.verifier = verifier
        self.codec = codec
        self.connections: set[socket.socket] = set()
        self.connections_lock = threading.Lock()
        super().__init__(address, _SessionHandler)

    def close_connections(self) -> None:
        with self.connections_lock:
            for connection in list(self.connections):
                try:
                    connection.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass


class EdgeServer:
    """A verification server bound to `endpoint` (`host:port`, port 0 picks one)."""

    def __init__(self, endpoint: str, verifier: PairVerifier, *, codec: CodecSpec | None = None):
        self.__server = _ThreadingServer(parse_endpoint(endpoint), verifier, codec)
        self.__thread: threading.Thread | None = None
        self.__serving = False

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.__server.server_address[:2]
        return str(host), int(port)

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def serve_forever(self) -> None:
        logger.info("Listening", self.endpoint)
        self.__serving = True
        self.__server.serve_forever()

    def start(self) -> EdgeServer:
        """Serve on a background thread."""

        self.__serving = True
        self.__thread = threading.Thread(target=self.serve_forever, name="mrverify-server", daemon=True)
        self.__thread.start()
        return self

    def shutdown(self) -> None:
        if self.__serving:
            self.__server.shutdown()
            self.__serving = False
        self.__server.close_connections()
        self.__server.server_close()
        if self.__thread is not None:
            self.__thread.join()
        logger.info("Stopped", self.endpoint)

    def __enter__(self) -> EdgeServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(endpoint: str, verifier: PairVerifier, codec: CodecSpec | None = None) -> None:
    """Run a server in the foreground until interrupted."""

    server = EdgeServer(endpoint, verifier, codec=codec)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("Interrupted", server.endpoint)
    finally:
        server.shutdown()
