"""Loopback tests of the edge server and the client simulator."""

import math
import socket
import time

import pandas as pd
import pytest

from mrverify.errors import ConfigError, ConnectionLost, SegmenterFailure, ServerError, StepTimeout
from mrverify.evaluation import oracle_for, verify_pair
from mrverify.imaging import CodecSpec
from mrverify.motion import MotionDetector
from mrverify.pipeline import PairVerifier, Preprocessor
from mrverify.protocol import EdgeServer, SessionLog, run_client_session, run_motion_session, run_sessions
from mrverify.protocol.server import parse_endpoint
from mrverify.protocol.wire import (
    Error,
    ErrorCode,
    MessageReader,
    ReferenceFrame,
    SessionInit,
    StepControl,
    TargetFrame,
    VerifyResult,
    encode_message,
)
from mrverify.segmentation import PerturbationSpec
from mrverify.verification import VerificationPolicy


class Hooked:
    """Delegates to a segmenter, running `hook(call_number, key)` before each query."""

    def __init__(self, inner, hook):
        self.inner = inner
        self.hook = hook
        self.calls = 0

    def segment(self, key, step_class, frame=None, view=None):
        self.calls += 1
        self.hook(self.calls, key)
        return self.inner.segment(key, step_class, frame, view)


class Failing:
    def segment(self, key, step_class, frame=None, view=None):
        raise SegmenterFailure("model not loaded")


@pytest.fixture(scope="module")
def verifier(test_manifest):
    spec = PerturbationSpec(dilate_erode_radius=1, jitter_sigma=1.0, seed=3)
    return PairVerifier(oracle_for(test_manifest, spec), VerificationPolicy(0.5))


@pytest.fixture
def preprocessor():
    return Preprocessor(alpha=0.5, codec=CodecSpec.lossy(90))


@pytest.fixture
def server(verifier):
    with EdgeServer("127.0.0.1:0", verifier) as server:
        yield server


def raw_connection(server: EdgeServer) -> tuple[socket.socket, MessageReader]:
    sock = socket.create_connection(server.address, timeout=5.0)
    return sock, MessageReader(sock.recv)


class TestLoopback:
    def test_matches_offline_decisions(self, server, verifier, preprocessor, test_manifest):
        log = run_client_session(test_manifest, server.endpoint, preprocessor)
        assert len(log) == len(test_manifest)
        for record, pair in zip(log.records, test_manifest.pairs()):
            decision, size = verify_pair(pair, verifier, preprocessor)
            assert record.iou_micro == decision.iou_micro, f"sample {record.sample}"
            assert record.passed == decision.passed
            assert record.tgt_bytes == size
            assert record.next_step == pair.step_index + int(decision.passed)

    def test_latency_fields(self, server, preprocessor, test_manifest):
        log = run_client_session(list(test_manifest.pairs())[:3], server.endpoint, preprocessor)
        for r in log.records:
            stages = (r.preproc_ms, r.encode_ms, r.comm_ms, r.decode_ms, r.postproc_ms)
            assert all(v >= 0 for v in stages)
            assert r.end_to_end_ms >= r.preproc_ms + r.encode_ms
            assert r.ref_bytes > 0 and r.tgt_bytes > 0

    def test_smaller_alpha_uploads_fewer_bytes(self, server, test_manifest):
        pairs = list(test_manifest.pairs())[:4]
        full = run_client_session(pairs, server.endpoint, Preprocessor(alpha=1.0))
        half = run_client_session(pairs, server.endpoint, Preprocessor(alpha=0.5))
        assert sum(r.tgt_bytes for r in half.records) < sum(r.tgt_bytes for r in full.records)

    def test_parallel_sessions(self, server, preprocessor, test_manifest):
        pairs = list(test_manifest.pairs())
        single = run_client_session(pairs, server.endpoint, preprocessor)
        merged = run_sessions(pairs, server.endpoint, preprocessor, sessions=3)
        assert [r.sample for r in merged.records] == list(range(len(pairs)))
        assert [r.iou_micro for r in merged.records] == [r.iou_micro for r in single.records]
        with pytest.raises(ConfigError):
            run_sessions(pairs, server.endpoint, preprocessor, sessions=0)

    def test_motion_session(self, server, preprocessor, test_manifest):
        pairs = list(test_manifest.pairs())[:4]
        plain = run_client_session(pairs, server.endpoint, preprocessor)
        moved = run_motion_session(pairs, server.endpoint, preprocessor, detector=MotionDetector(tag_distance=1.0))
        assert [r.iou_micro for r in moved.records] == [r.iou_micro for r in plain.records]

    def test_motion_script_must_complete_a_step(self, server, preprocessor, test_manifest):
        with pytest.raises(ConfigError):
            run_motion_session(list(test_manifest.pairs())[:1], server.endpoint, preprocessor, script=(True, True))


class TestFailures:
    def test_target_before_reference(self, server):
        sock, reader = raw_connection(server)
        with sock:
            sock.sendall(encode_message(SessionInit(0, 0, 0)) + encode_message(TargetFrame((), b"x")))
            reply = reader.read()
            assert isinstance(reply, Error) and reply.code == ErrorCode.OUT_OF_ORDER
            assert reader.read() is None

    def test_reference_before_init(self, server):
        sock, reader = raw_connection(server)
        with sock:
            sock.sendall(encode_message(ReferenceFrame(500, 0, (), b"")))
            assert reader.read().code == ErrorCode.OUT_OF_ORDER

    def test_undecodable_reference(self, server):
        sock, reader = raw_connection(server)
        with sock:
            sock.sendall(encode_message(SessionInit(0, 0, 0)) + encode_message(ReferenceFrame(500, 0, (), b"junk")))
            assert reader.read().code == ErrorCode.BAD_MESSAGE
            assert reader.read() is None

    def test_garbage_bytes(self, server):
        sock, reader = raw_connection(server)
        with sock:
            sock.sendall(b"HELLO WORLD!")
            assert reader.read().code == ErrorCode.BAD_MESSAGE

    def test_segmenter_failure_keeps_connection(self, preprocessor, test_manifest):
        pair = test_manifest.load_pair(0)
        with EdgeServer("127.0.0.1:0", PairVerifier(Failing(), VerificationPolicy())) as server:
            with pytest.raises(ServerError) as e:
                run_client_session([pair], server.endpoint, preprocessor)
            assert e.value.code == ErrorCode.SEGMENTER_FAILURE
            assert len(e.value.partial_log) == 0

            layer = preprocessor.encode_layer(pair.layer)
            target = preprocessor.encode_target(pair.target)
            sock, reader = raw_connection(server)
            with sock:
                for _ in range(2):
                    sock.sendall(
                        encode_message(SessionInit(pair.model_id, 0, pair.step_class))
                        + encode_message(ReferenceFrame(500, 0, (), layer.payload))
                        + encode_message(TargetFrame((), target.payload))
                    )
                    assert reader.read().code == ErrorCode.SEGMENTER_FAILURE

    def test_step_control_follows_result(self, server, preprocessor, test_manifest):
        pair = test_manifest.load_pair(0)
        layer = preprocessor.encode_layer(pair.layer)
        target = preprocessor.encode_target(pair.target)
        sock, reader = raw_connection(server)
        with sock:
            sock.sendall(
                encode_message(SessionInit(pair.model_id, 41, pair.step_class))
                + encode_message(ReferenceFrame(500, 90, (), layer.payload))
                + encode_message(TargetFrame((), target.payload))
            )
            result = reader.read()
            control = reader.read()
            assert isinstance(result, VerifyResult)
            assert control == StepControl(41 + int(result.passed))

    def test_server_killed_mid_session(self, verifier, preprocessor, test_manifest):
        holder = {}

        def kill_on_third(call: int, key) -> None:
            if call == 3:
                holder["server"].shutdown()

        hooked = PairVerifier(Hooked(verifier.segmenter, kill_on_third), verifier.policy)
        server = EdgeServer("127.0.0.1:0", hooked).start()
        holder["server"] = server
        try:
            with pytest.raises(ConnectionLost) as e:
                run_client_session(test_manifest, server.endpoint, preprocessor)
            assert isinstance(e.value.partial_log, SessionLog)
            assert len(e.value.partial_log) == 2
        finally:
            server.shutdown()

    def test_server_killed_during_parallel_sessions(self, verifier, preprocessor, test_manifest):
        pairs = list(test_manifest.pairs())[:8]
        holder = {}

        def kill_on_sixth_sample(call: int, key) -> None:
            if key.step_index == pairs[5].step_index:
                holder["server"].shutdown()

        hooked = PairVerifier(Hooked(verifier.segmenter, kill_on_sixth_sample), verifier.policy)
        server = EdgeServer("127.0.0.1:0", hooked).start()
        holder["server"] = server
        try:
            with pytest.raises(ConnectionLost) as e:
                run_sessions(pairs, server.endpoint, preprocessor, sessions=2)
        finally:
            server.shutdown()
        log = e.value.partial_log
        samples = [r.sample for r in log.records]
        assert samples == sorted(set(samples)), "merged log is ordered and unique"
        assert {1, 3} <= set(samples), "steps finished before the failure are kept"
        assert not {5, 7} & set(samples)
        for record in log.records:
            pair = pairs[record.sample]
            decision, _ = verify_pair(pair, verifier, preprocessor)
            assert (record.step_index, record.iou_micro) == (pair.step_index, decision.iou_micro)

    def test_step_timeout(self, verifier, preprocessor, test_manifest):
        slow = PairVerifier(Hooked(verifier.segmenter, lambda *_: time.sleep(1.0)), verifier.policy)
        with EdgeServer("127.0.0.1:0", slow) as server:
            with pytest.raises(StepTimeout):
                run_client_session([test_manifest.load_pair(0)], server.endpoint, preprocessor, timeout=0.2)

    def test_nothing_listening(self, preprocessor, test_manifest):
        with socket.socket() as spare:
            spare.bind(("127.0.0.1", 0))
            port = spare.getsockname()[1]
        with pytest.raises(ConnectionLost):
            run_client_session([test_manifest.load_pair(0)], f"127.0.0.1:{port}", preprocessor)

    def test_parse_endpoint(self):
        assert parse_endpoint("10.0.0.1:7878") == ("10.0.0.1", 7878)
        assert parse_endpoint(":9000") == ("127.0.0.1", 9000)
        with pytest.raises(ValueError):
            parse_endpoint("localhost")


class TestSessionLog:
    def test_write(self, server, preprocessor, test_manifest, tmp_path):
        log = run_client_session(list(test_manifest.pairs())[:3], server.endpoint, preprocessor)
        jsonl, summary = log.write(str(tmp_path))
        with open(jsonl) as f:
            assert len(f.readlines()) == 3
        table = pd.read_csv(summary, index_col="field")
        assert "end_to_end_ms" in table.index and "within_budget" in table.index
        assert list(table.columns) == ["mean", "median", "p95", "p99"]
        assert 0.0 <= table.loc["within_budget", "mean"] <= 1.0

    def test_empty_log(self):
        log = SessionLog()
        assert log.summary().shape == (8, 4)
        assert math.isnan(log.within_budget())
