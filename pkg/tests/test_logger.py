import io
import json
import logging

import pytest

from mrverify.log import LOG_ENV, Logger, LogLevel, LogOutput, LogOutputKind, get_logger, set_level
from mrverify.log import logger as logger_module


def console(stream: io.StringIO, **kwargs) -> LogOutput:
    return LogOutput(kind=LogOutputKind.CONSOLE, stream=stream, **kwargs)


class TestLogger:
    def test_plain_format(self):
        stream = io.StringIO()
        logger = Logger("mrverify.server", outputs=[console(stream, auto_timestamp=False)])
        logger.info("Session opened", "peer=127.0.0.1:5000")
        assert stream.getvalue() == "[mrverify.server:info] Session opened: peer=127.0.0.1:5000\n"

    def test_multiline_body_is_indented(self):
        stream = io.StringIO()
        logger = Logger("t", outputs=[console(stream, auto_timestamp=False)])
        logger.warning("Table", "a\nb")
        assert stream.getvalue() == "[t:warning] Table: a\n  b\n"

    def test_jsonl_format(self):
        stream = io.StringIO()
        logger = Logger("t", outputs=[console(stream, format="jsonl")])
        logger.error("Step failed", {"sample": 3, "code": 3})
        record = json.loads(stream.getvalue())
        assert record["level"] == "error"
        assert record["header"] == "Step failed"
        assert record["message"] == {"sample": 3, "code": 3}
        assert "timestamp" in record

    def test_jsonl_stringifies_unserializable(self):
        stream = io.StringIO()
        logger = Logger("t", outputs=[console(stream, format="jsonl", auto_timestamp=False)])
        logger.info("Object", object)
        assert json.loads(stream.getvalue())["message"] == str(object)

    def test_per_output_levels(self):
        quiet, loud = io.StringIO(), io.StringIO()
        logger = Logger(
            "t",
            outputs=[console(quiet, level=LogLevel.WARNING), console(loud, level=LogLevel.DEBUG)],
        )
        logger.debug("detail")
        logger.warning("problem")
        assert quiet.getvalue().count("\n") == 1
        assert loud.getvalue().count("\n") == 2

    def test_file_output(self, tmp_path):
        path = tmp_path / "logs" / "run.jsonl"
        output = LogOutput.file(str(path), format="jsonl")
        logger = Logger("t", outputs=[output])
        logger.info("Saved", "manifest")
        output.close()
        assert json.loads(path.read_text())["message"] == "manifest"

    def test_remove_output(self):
        stream = io.StringIO()
        logger = Logger("t", outputs=[console(stream, id="mine")])
        logger.remove_output("mine")
        logger.info("dropped")
        assert stream.getvalue() == ""
        assert not logger.is_enabled()

    def test_no_outputs(self):
        assert not Logger("t", outputs=None).is_enabled()
        assert Logger("t").outputs[0].id == "stderr"


class TestSharedLoggers:
    @pytest.fixture(autouse=True)
    def fresh(self, monkeypatch):
        monkeypatch.setattr(logger_module, "_loggers", {})

    def test_level_from_environment(self, monkeypatch):
        monkeypatch.setenv(LOG_ENV, "debug")
        logger = get_logger("mrverify.test")
        assert logger.outputs[0].handler.level == logging.DEBUG
        assert get_logger("mrverify.test") is logger

    def test_bad_level_falls_back(self, monkeypatch):
        monkeypatch.setenv(LOG_ENV, "chatty")
        assert get_logger("mrverify.test").outputs[0].handler.level == logging.INFO

    def test_set_level(self, monkeypatch):
        monkeypatch.delenv(LOG_ENV, raising=False)
        logger = get_logger("mrverify.test")
        set_level(LogLevel.ERROR)
        assert logger.outputs[0].handler.level == logging.ERROR

    def test_parse(self):
        assert LogLevel.parse(" Warning ") == LogLevel.WARNING
        with pytest.raises(ValueError):
            LogLevel.parse("verbose")
