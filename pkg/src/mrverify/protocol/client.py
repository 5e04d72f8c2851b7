"""The client simulator: replays dataset samples against an edge server.

Each sample becomes one step of a session. The reference virtual layer is
uploaded first, then the target is prepared, encoded and uploaded under a
timer that stops when the server's StepControl arrives. The round trip minus
the server's own decode and post-processing time is booked as communication.
"""

from __future__ import annotations

import json
import os
import socket
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from ..dataset import DatasetManifest, SamplePair
from ..errors import ConfigError, ConnectionLost, MalformedPayload, ServerError, StepTimeout
from ..imaging import Frame
from ..log import get_logger
from ..motion import MotionDetector, MotionEventKind, MotionState, trace
from ..pipeline import Preprocessor
from .server import parse_endpoint
from .wire import (
    Error,
    MessageReader,
    ReferenceFrame,
    SessionInit,
    StepControl,
    TargetFrame,
    VerifyResult,
    WireMessage,
    encode_message,
)

__all__ = [
    "HUMAN_REACTION_MS",
    "SKIN_TONE",
    "DEFAULT_SCRIPT",
    "StepRecord",
    "SessionLog",
    "hand_frame",
    "run_client_session",
    "run_motion_session",
    "run_sessions",
]

logger = get_logger("mrverify.client")

HUMAN_REACTION_MS = 273.0
SKIN_TONE = (224, 172, 140)
DEFAULT_SCRIPT = (False, True, True, False)
LATENCY_FIELDS = ("preproc_ms", "encode_ms", "comm_ms", "decode_ms", "postproc_ms", "end_to_end_ms")


@dataclass(frozen=True)
class StepRecord:
    sample: int
    model_id: int
    step_index: int
    step_class: int
    ground_truth: bool
    preproc_ms: float
    encode_ms: float
    comm_ms: float
    decode_ms: float
    postproc_ms: float
    end_to_end_ms: float
    ref_bytes: int
    tgt_bytes: int
    passed: bool
    iou_micro: int
    next_step: int


@dataclass
class SessionLog:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: StepRecord) -> None:
        self.records.append(record)

    def extend(self, other: SessionLog) -> None:
        self.records.extend(other.records)

    def sorted(self) -> SessionLog:
        return SessionLog(sorted(self.records, key=lambda r: r.sample))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=list(StepRecord.__dataclass_fields__))

    def summary(self) -> pd.DataFrame:
        """Mean, median, p95 and p99 per latency stage and frame size."""

        df = self.to_frame()
        columns = [*LATENCY_FIELDS, "ref_bytes", "tgt_bytes"]
        if df.empty:
            return pd.DataFrame(index=columns, columns=["mean", "median", "p95", "p99"], dtype=float)
        values = df[columns].astype(float)
        return pd.DataFrame(
            {
                "mean": values.mean(),
                "median": values.median(),
                "p95": values.quantile(0.95),
                "p99": values.quantile(0.99),
            }
        )

    def within_budget(self, budget_ms: float = HUMAN_REACTION_MS) -> float:
        """Share of steps whose end-to-end latency is under `budget_ms`."""

        if not self.records:
            return float("nan")
        return float(np.mean([r.end_to_end_ms < budget_ms for r in self.records]))

    def write(self, out_dir: str, stem: str = "session") -> list[str]:
        """Write `<stem>.jsonl` (one record per line) and `<stem>_summary.csv`."""

        os.makedirs(out_dir, exist_ok=True)
        jsonl_path = os.path.join(out_dir, f"{stem}.jsonl")
        with open(jsonl_path, "w") as f:
            for record in self.records:
                f.write(json.dumps(asdict(record)) + "\n")
        summary = self.summary()
        summary.loc["within_budget"] = [self.within_budget(), np.nan, np.nan, np.nan]
        summary_path = os.path.join(out_dir, f"{stem}_summary.csv")
        summary.to_csv(summary_path, index_label="field")
        return [jsonl_path, summary_path]


def _samples(source: DatasetManifest | Iterable[SamplePair]) -> Iterable[tuple[int, SamplePair]]:
    if isinstance(source, DatasetManifest):
        return ((record.index, source.load_pair(i)) for i, record in enumerate(source.samples))
    return enumerate(source)


def _points(points: np.ndarray | None) -> tuple[tuple[float, float], ...]:
    if points is None:
        return ()
    return tuple((float(x), float(y)) for x, y in points)


class _Connection:
    """One TCP connection; socket failures are rethrown with the partial log."""

    def __init__(self, endpoint: str, timeout: float, log: SessionLog):
        self.log = log
        try:
            self.sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        except OSError as e:
            raise ConnectionLost(f"cannot connect to {endpoint}: {e}", log) from e
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.reader = MessageReader(self.sock.recv)

    def send(self, *messages: WireMessage) -> None:
        data = b"".join(encode_message(m) for m in messages)
        try:
            self.sock.sendall(data)
        except TimeoutError as e:
            raise StepTimeout(f"send timed out: {e}", self.log) from e
        except OSError as e:
            raise ConnectionLost(f"send failed: {e}", self.log) from e

    def receive[M](self, expected: type[M]) -> M:
        try:
            message = self.reader.read()
        except TimeoutError as e:
            raise StepTimeout(f"no {expected.__name__} within the step timeout", self.log) from e
        except ConnectionLost as e:
            raise ConnectionLost(e.message, self.log) from e
        except OSError as e:
            raise ConnectionLost(f"receive failed: {e}", self.log) from e
        if message is None:
            raise ConnectionLost(f"server closed the connection while a {expected.__name__} was due", self.log)
        if isinstance(message, Error):
            raise ServerError(message.code, message.message, self.log)
        if not isinstance(message, expected):
            raise MalformedPayload(f"expected {expected.__name__}, got {type(message).__name__}")
        return message

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> _Connection:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _send_reference(conn: _Connection, index: int, pair: SamplePair, preprocessor: Preprocessor) -> int:
    ref_points = pair.alignment_points[0] if pair.alignment_points is not None else None
    layer = preprocessor.encode_layer(pair.layer, ref_points)
    conn.send(
        SessionInit(pair.model_id, pair.step_index, pair.step_class),
        ReferenceFrame(
            int(round(preprocessor.alpha * 1000)),
            preprocessor.codec.wire_code,
            _points(layer.points),
            layer.payload,
        ),
    )
    logger.debug("Reference sent", f"sample {index}: {len(layer.payload)} bytes")
    return len(layer.payload)


def _send_target(
    conn: _Connection, index: int, pair: SamplePair, preprocessor: Preprocessor, ref_bytes: int
) -> StepRecord:
    tgt_points = pair.alignment_points[1] if pair.alignment_points is not None else None
    start = time.perf_counter()
    target = preprocessor.encode_target(pair.target, tgt_points)
    sent = time.perf_counter()
    conn.send(TargetFrame(_points(target.points), target.payload))
    result = conn.receive(VerifyResult)
    control = conn.receive(StepControl)
    done = time.perf_counter()
    decode_ms = result.server_decode_us / 1e3
    postproc_ms = result.server_postproc_us / 1e3
    round_trip_ms = (done - sent) * 1e3
    return StepRecord(
        sample=index,
        model_id=pair.model_id,
        step_index=pair.step_index,
        step_class=pair.step_class,
        ground_truth=pair.ground_truth,
        preproc_ms=target.preproc_ms,
        encode_ms=target.encode_ms,
        comm_ms=max(0.0, round_trip_ms - decode_ms - postproc_ms),
        decode_ms=decode_ms,
        postproc_ms=postproc_ms,
        end_to_end_ms=(done - start) * 1e3,
        ref_bytes=ref_bytes,
        tgt_bytes=len(target.payload),
        passed=result.passed,
        iou_micro=result.iou_micro,
        next_step=control.next_step,
    )


def run_client_session(
    source: DatasetManifest | Iterable[SamplePair],
    endpoint: str,
    preprocessor: Preprocessor,
    *,
    timeout: float = 5.0,
) -> SessionLog:
    """Replay every sample over one connection, one SessionInit per sample.

    Raises:
        ConnectionLost: the server went away; `partial_log` holds finished steps.
        StepTimeout: a reply took longer than `timeout` seconds.
        ServerError: the server answered with an Error message.
    """

    log = SessionLog()
    with _Connection(endpoint, timeout, log) as conn:
        for index, pair in _samples(source):
            ref_bytes = _send_reference(conn, index, pair, preprocessor)
            record = _send_target(conn, index, pair, preprocessor, ref_bytes)
            log.append(record)
            logger.debug(
                "Step done",
                f"sample {index}: pass={record.passed} iou={record.iou_micro} e2e={record.end_to_end_ms:.2f}ms",
            )
    logger.info("Session finished", f"{len(log)} steps against {endpoint}")
    return log


def hand_frame(size: tuple[int, int], hand: bool, *, coverage: float = 0.3) -> Frame:
    """A synthetic camera frame: a neutral scene, with a skin-tone patch when `hand`."""

    width, height = size
    pixels = np.full((height, width, 3), 96, dtype=np.uint8)
    if hand:
        side = max(1, min(width, height, int(round(np.sqrt(coverage * width * height)))))
        x, y = (width - side) // 2, height - side
        pixels[y : y + side, x : x + side] = SKIN_TONE
    return Frame(pixels)


def _check_script(script: Sequence[bool]) -> None:
    kinds = [e.kind for _, e in trace(script, MotionState()) if e.is_capture]
    if kinds != [MotionEventKind.CAPTURE_REFERENCE, MotionEventKind.CAPTURE_TARGET]:
        raise ConfigError(
            f"hand script {list(script)} must trigger one reference then one target capture, got {[k.value for k in kinds]}"
        )


def run_motion_session(
    source: DatasetManifest | Iterable[SamplePair],
    endpoint: str,
    preprocessor: Preprocessor,
    *,
    detector: MotionDetector | None = None,
    script: Sequence[bool] = DEFAULT_SCRIPT,
    camera_size: tuple[int, int] = (160, 120),
    timeout: float = 5.0,
    realtime: bool = False,
) -> SessionLog:
    """Like :func:`run_client_session`, but captures are triggered by the motion detector.

    `script` is the hand-presence sequence replayed for every sample; each
    entry becomes one camera frame. With `realtime` the simulator sleeps one
    capture period between frames.
    """

    _check_script(script)
    detector = detector or MotionDetector()
    frames = {hand: hand_frame(camera_size, hand) for hand in (False, True)}
    log = SessionLog()
    with _Connection(endpoint, timeout, log) as conn:
        for index, pair in _samples(source):
            ref_bytes: int | None = None
            for hand in script:
                event = detector.observe(frames[hand])
                if event.kind == MotionEventKind.CAPTURE_REFERENCE:
                    ref_bytes = _send_reference(conn, index, pair, preprocessor)
                elif event.kind == MotionEventKind.CAPTURE_TARGET:
                    if ref_bytes is None:
                        raise ConfigError(f"sample {index}: target captured without a reference")
                    log.append(_send_target(conn, index, pair, preprocessor, ref_bytes))
                    detector.acknowledge()
                if realtime:
                    time.sleep(detector.capture_period_s)
            if ref_bytes is None or not log.records or log.records[-1].sample != index:
                raise ConfigError(
                    f"sample {index}: the hand script did not complete a step at threshold {detector.threshold}"
                )
    logger.info("Motion session finished", f"{len(log)} steps against {endpoint}")
    return log


def run_sessions(
    pairs: Sequence[SamplePair],
    endpoint: str,
    preprocessor: Preprocessor,
    *,
    sessions: int = 1,
    timeout: float = 5.0,
) -> SessionLog:
    """Spread `pairs` round-robin over `sessions` parallel connections.

    The merged log is ordered by sample index. When a connection fails, the
    others still run to completion; the first failure is then re-raised with
    `partial_log` set to the merged log of every connection.
    """

    if sessions < 1:
        raise ConfigError(f"sessions must be at least 1, got {sessions}")
    if sessions == 1:
        return run_client_session(pairs, endpoint, preprocessor, timeout=timeout)
    shards = [[(i, pairs[i]) for i in range(s, len(pairs), sessions)] for s in range(sessions)]

    def run(shard: list[tuple[int, SamplePair]]) -> SessionLog:
        try:
            log = run_client_session([p for _, p in shard], endpoint, preprocessor, timeout=timeout)
        except _SESSION_FAILURES as e:
            e.partial_log = _renumber_log(e.partial_log, shard)
            raise
        return _renumber_log(log, shard)

    merged = SessionLog()
    failures: list[ConnectionLost | StepTimeout | ServerError] = []
    with ThreadPoolExecutor(max_workers=sessions) as pool:
        for future in [pool.submit(run, shard) for shard in shards]:
            try:
                merged.extend(future.result())
            except _SESSION_FAILURES as e:
                failures.append(e)
                merged.extend(e.partial_log)
    merged = merged.sorted()
    if failures:
        logger.error("Sessions failed", f"{len(failures)} of {sessions} connections; {len(merged)} steps kept")
        failures[0].partial_log = merged
        raise failures[0]
    return merged


_SESSION_FAILURES = (ConnectionLost, StepTimeout, ServerError)


def _renumber_log(log: SessionLog | None, shard: list[tuple[int, SamplePair]]) -> SessionLog:
    if log is None:
        return SessionLog()
    return SessionLog([_renumber(r, shard[r.sample][0]) for r in log.records])


def _renumber(record: StepRecord, sample: int) -> StepRecord:
    return StepRecord(**{**asdict(record), "sample": sample})
