"""End-to-end runs of the command line through click's test runner."""

import json
import os

import pandas as pd
import pytest
from click.testing import CliRunner

from mrverify.cli import main
from mrverify.dataset import Split
from mrverify.evaluation import oracle_for
from mrverify.log import LOG_ENV
from mrverify.pipeline import PairVerifier
from mrverify.protocol import EdgeServer
from mrverify.verification import VerificationPolicy


@pytest.fixture(autouse=True)
def no_log_env(monkeypatch):
    monkeypatch.delenv(LOG_ENV, raising=False)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def test_json(manifests):
    return os.path.join(manifests[Split.TEST].root, "test.json")


def invoke(runner, *args):
    result = runner.invoke(main, [str(a) for a in args])
    assert result.exit_code == 0, result.output
    return result


class TestGeneration:
    def test_fixtures_then_dataset(self, runner, tmp_path):
        fixtures = tmp_path / "fixtures"
        result = invoke(runner, "--seed", 4, "gen-fixtures", "--count", 3, "--size", 128, "--dest", fixtures)
        assert "Wrote 3 annotated images" in result.output
        assert len(list(fixtures.glob("*.json"))) == 3
        assert len(list(fixtures.glob("*.png"))) == 3

        out = tmp_path / "desk"
        invoke(runner, "--seed", 4, "--out", out, "gen-dataset", "--sources", fixtures, "--count", 6)
        for split in ("val", "test"):
            doc = json.loads((out / f"{split}.json").read_text())
            assert len(doc["samples"]) == 6
            assert sum(s["ground_truth"] for s in doc["samples"]) == 3

    def test_missing_sources(self, runner, tmp_path):
        result = runner.invoke(main, ["gen-dataset", "--sources", str(tmp_path / "nowhere")])
        assert result.exit_code == 1
        assert "InsufficientSources" in result.output


class TestEvaluation:
    def test_evaluate(self, runner, test_json, tmp_path):
        result = invoke(runner, "--out", tmp_path, "evaluate", test_json, "--method", "iou", "--alpha", 0.5)
        assert "Evaluation of tiny" in result.output
        summary = json.loads((tmp_path / "iou.json").read_text())
        assert summary["samples"] == 12
        assert (tmp_path / "iou_roc.csv").exists()
        assert len(pd.read_csv(tmp_path / "iou_samples.csv")) == 12

    def test_evaluate_with_validation(self, runner, manifests, test_json, tmp_path):
        val_json = os.path.join(manifests[Split.VAL].root, "val.json")
        invoke(runner, "--out", tmp_path, "evaluate", test_json, "--val-manifest", val_json, "--method", "psnr")
        assert (tmp_path / "psnr_val.json").exists()
        assert (tmp_path / "psnr.json").exists()

    def test_sweep(self, runner, test_json, tmp_path):
        result = invoke(
            runner, "--out", tmp_path, "sweep", test_json, "--grid-min", 0, "--grid-max", 1, "--grid-steps", 11
        )
        assert "best threshold" in result.output
        assert len(pd.read_csv(tmp_path / "sweep_iou.csv")) == 11

    def test_bad_grid(self, runner, test_json, tmp_path):
        result = runner.invoke(main, ["--out", str(tmp_path), "sweep", test_json, "--grid-min", "0.5"])
        assert result.exit_code == 1

    def test_cosine_with_stub(self, runner, test_json, tmp_path):
        invoke(runner, "--out", tmp_path, "evaluate", test_json, "--method", "cosine", "--stub-embeddings")
        assert (tmp_path / "cosine.json").exists()


class TestSimulate:
    def test_loopback(self, runner, test_json, tmp_path):
        result = invoke(runner, "--out", tmp_path, "simulate", test_json, "--limit", 3, "--codec", "lossy:80")
        assert "under 273 ms" in result.output
        assert len((tmp_path / "session.jsonl").read_text().splitlines()) == 3
        assert (tmp_path / "session_summary.csv").exists()

    def test_motion(self, runner, test_json, tmp_path):
        invoke(runner, "--out", tmp_path, "simulate", test_json, "--limit", 2, "--motion", "--tag-distance", 0.5)
        assert len((tmp_path / "session.jsonl").read_text().splitlines()) == 2

    def test_server_lost_keeps_partial_log(self, runner, manifests, test_json, tmp_path):
        oracle = oracle_for(manifests[Split.TEST])
        holder = {"calls": 0}

        class KillOnThird:
            def segment(self, key, step_class, frame=None, view=None):
                holder["calls"] += 1
                if holder["calls"] == 3:
                    holder["server"].shutdown()
                return oracle.segment(key, step_class, frame, view)

        server = EdgeServer("127.0.0.1:0", PairVerifier(KillOnThird(), VerificationPolicy())).start()
        holder["server"] = server
        try:
            result = runner.invoke(
                main, ["--out", str(tmp_path), "simulate", test_json, "--limit", "6", "--endpoint", server.endpoint]
            )
        finally:
            server.shutdown()
        assert result.exit_code == 1
        assert "ConnectionLost" in result.output
        assert len((tmp_path / "session.jsonl").read_text().splitlines()) == 2
        assert (tmp_path / "session_summary.csv").exists()


class TestBench:
    def test_codec(self, runner, test_json, tmp_path):
        invoke(runner, "--out", tmp_path, "bench-codec", test_json, "--codecs", "lossless,lossy:60")
        table = pd.read_csv(tmp_path / "bench_codec.csv")
        assert list(table["codec"]) == ["lossless", "lossy:60"]

    def test_alpha(self, runner, test_json, tmp_path):
        invoke(runner, "--out", tmp_path, "bench-alpha", test_json, "--alphas", "0.5,1.0")
        assert list(pd.read_csv(tmp_path / "bench_alpha.csv")["alpha"]) == [0.5, 1.0]

    def test_similarity(self, runner, test_json, tmp_path):
        result = invoke(runner, "--out", tmp_path, "bench-similarity", test_json)
        assert "Median similarity" in result.output
        assert "Calculation latency" in result.output
        table = pd.read_csv(tmp_path / "bench_similarity.csv")
        assert "iou" in set(table["metric"])
        latency = pd.read_csv(tmp_path / "bench_similarity_latency.csv")
        assert set(latency["metric"]) == {"iou", "psnr", "ssim", "nrmse", "ncc"}

    def test_similarity_without_iou(self, runner, test_json, tmp_path):
        invoke(runner, "--out", tmp_path, "bench-similarity", test_json, "--no-iou")
        assert "iou" not in set(pd.read_csv(tmp_path / "bench_similarity.csv")["metric"])


class TestErrors:
    def test_missing_manifest(self, runner, tmp_path):
        result = runner.invoke(main, ["evaluate", str(tmp_path / "absent.json")])
        assert result.exit_code == 1
        assert "MissingFile" in result.output

    def test_bad_alpha(self, runner, test_json):
        result = runner.invoke(main, ["evaluate", test_json, "--alpha", "1.5"])
        assert result.exit_code == 1
        assert "imaging.alpha" in result.output

    def test_bad_codec_flag(self, runner, test_json):
        result = runner.invoke(main, ["evaluate", test_json, "--codec", "webp"])
        assert result.exit_code == 2

    def test_bad_config_file(self, runner, test_json, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[imaging]\ngamma = 2.2\n")
        result = runner.invoke(main, ["--config", str(path), "evaluate", test_json])
        assert result.exit_code == 1
        assert "imaging.gamma" in result.output

    def test_serve_needs_manifest_for_oracle(self, runner):
        result = runner.invoke(main, ["serve"])
        assert result.exit_code == 1
        assert "MANIFEST" in result.output
