import json
import logging
import os
import sys
from datetime import datetime
from enum import Enum
from typing import Literal, TextIO, override

__all__ = ["LogLevel", "LogOutputKind", "LogOutput", "Logger", "get_logger", "set_level", "LOG_ENV"]

LOG_ENV = "MRVERIFY_LOG"


class LogLevel(Enum):
    DEBUG = logging.DEBUG
    INFO = logging.INFO
    WARNING = logging.WARNING
    ERROR = logging.ERROR
    CRITICAL = logging.CRITICAL

    @staticmethod
    def parse(name: str) -> "LogLevel":
        try:
            return LogLevel[name.strip().upper()]
        except KeyError:
            raise ValueError(f"Unknown log level: {name!r}") from None


class LogOutputKind(Enum):
    CONSOLE = "stream"
    FILE = "file"


class _RecordFormatter(logging.Formatter):
    """Render the `header`/`body` carried on a record as plain text or JSONL."""

    def __init__(self, format: Literal["plain", "jsonl"], auto_timestamp: bool):
        super().__init__()
        self.__format = format
        self.__auto_timestamp = auto_timestamp

    @override
    def format(self, record: logging.LogRecord) -> str:
        name = getattr(record, "mrverify_name", record.name)
        header = getattr(record, "mrverify_header", "")
        body = getattr(record, "mrverify_body", record.getMessage())
        level = record.levelname.lower()
        timestamp = datetime.fromtimestamp(record.created).isoformat()
        if self.__format == "jsonl":
            payload: dict[str, object] = {"name": name, "level": level}
            if self.__auto_timestamp:
                payload["timestamp"] = timestamp
            payload["header"] = header
            payload["message"] = body if _is_jsonable(body) else str(body)
            return json.dumps(payload)
        lines = str(body).splitlines() or [""]
        indented = "\n".join([lines[0]] + [f"  {line}" if line.strip() else line for line in lines[1:]])
        where = f"{name}:{level} @ {timestamp}" if self.__auto_timestamp else f"{name}:{level}"
        return f"[{where}] {header}: {indented}"


def _is_jsonable(value: object) -> bool:
    try:
        json.dumps(value)
    except (TypeError, ValueError):
        return False
    return True


class LogOutput:
    """One logging destination (console stream or file) with its own level and format.

    Attributes:
        id: Optional identifier used to remove the output later.
        kind: Console or file.
        level: Minimum level emitted by this output.
        format: `"plain"` or `"jsonl"`.
        auto_timestamp: Whether records carry an ISO timestamp.
    """

    def __init__(
        self,
        id: str | None = None,
        *,
        kind: LogOutputKind,
        file: str | None = None,
        stream: TextIO | None = None,
        level: LogLevel = LogLevel.INFO,
        format: Literal["plain", "jsonl"] = "plain",
        auto_timestamp: bool = True,
    ):
        assert file is None or stream is None, "Cannot specify both file and stream"
        assert (kind == LogOutputKind.FILE and file is not None) or (
            kind == LogOutputKind.CONSOLE and stream is not None
        ), "File or stream must be specified"
        self.__id = id
        self.__kind = kind
        self.__file = file
        self.__level = level
        self.__format: Literal["plain", "jsonl"] = format
        self.__auto_timestamp = auto_timestamp
        match kind:
            case LogOutputKind.FILE:
                assert file is not None
                directory = os.path.dirname(file)
                if directory:
                    os.makedirs(directory, exist_ok=True)
                self.__handler: logging.Handler = logging.FileHandler(file)
            case LogOutputKind.CONSOLE:
                self.__handler = logging.StreamHandler(stream)
        self.__handler.setLevel(level.value)
        self.__handler.setFormatter(_RecordFormatter(format, auto_timestamp))

    @property
    def id(self) -> str | None:
        return self.__id

    @property
    def kind(self) -> LogOutputKind:
        return self.__kind

    @property
    def file(self) -> str | None:
        return self.__file

    @property
    def level(self) -> LogLevel:
        return self.__level

    @property
    def format(self) -> Literal["plain", "jsonl"]:
        return self.__format

    @property
    def auto_timestamp(self) -> bool:
        return self.__auto_timestamp

    @property
    def handler(self) -> logging.Handler:
        return self.__handler

    def flush(self) -> None:
        self.__handler.flush()

    def close(self) -> None:
        self.__handler.close()

    def __repr__(self) -> str:
        return (
            f"LogOutput(id={self.__id}, kind={self.__kind}, level={self.__level}, "
            f"format={self.__format}, auto_timestamp={self.__auto_timestamp})"
        )

    @staticmethod
    def stdout(
        id: str | None = None,
        level: LogLevel = LogLevel.INFO,
        format: Literal["plain", "jsonl"] = "plain",
        auto_timestamp: bool = True,
    ) -> "LogOutput":
        """Creates a console log output to standard output."""

        return LogOutput(
            id,
            kind=LogOutputKind.CONSOLE,
            stream=sys.stdout,
            level=level,
            format=format,
            auto_timestamp=auto_timestamp,
        )

    @staticmethod
    def stderr(
        id: str | None = None,
        level: LogLevel = LogLevel.INFO,
        format: Literal["plain", "jsonl"] = "plain",
        auto_timestamp: bool = True,
    ) -> "LogOutput":
        """Creates a console log output to standard error."""

        return LogOutput(
            id,
            kind=LogOutputKind.CONSOLE,
            stream=sys.stderr,
            level=level,
            format=format,
            auto_timestamp=auto_timestamp,
        )

    @staticmethod
    def file(
        file: str,
        *,
        id: str | None = None,
        level: LogLevel = LogLevel.INFO,
        format: Literal["plain", "jsonl"] = "plain",
        auto_timestamp: bool = True,
    ) -> "LogOutput":
        """Creates a file log output, creating the parent directory if needed."""

        return LogOutput(
            id,
            kind=LogOutputKind.FILE,
            file=file,
            level=level,
            format=format,
            auto_timestamp=auto_timestamp,
        )


class Logger:
    """A logger with several outputs, each with its own level and format.

    Messages are logged as a short `header` plus a free-form `message`:

    ```python
    logger = Logger("mrverify.server", outputs=[LogOutput.stderr(level=LogLevel.DEBUG)])
    logger.info("Session opened", f"peer={peer}")
    ```

    With `outputs=[]` (the default) the logger writes to stderr at INFO; pass
    `outputs=None` to start with no output at all.
    """

    def __init__(self, name: str, *, outputs: list[LogOutput] | None = []):
        self.name = name
        if outputs is not None and not outputs:
            outputs = [LogOutput.stderr(id="stderr")]
        elif outputs is None:
            outputs = []
        self.__underlying = logging.getLogger(f"mrverify.{id(self):x}.{name}")
        self.__underlying.handlers.clear()
        # Filtering happens per output handler.
        self.__underlying.setLevel(logging.DEBUG)
        self.__underlying.propagate = False
        self.__outputs: dict[str, LogOutput] = {}
        self.__anonymous: list[LogOutput] = []
        for output in outputs:
            self.add_output(output)

    def is_enabled(self) -> bool:
        return bool(self.__underlying.handlers)

    @property
    def outputs(self) -> list[LogOutput]:
        return [*self.__outputs.values(), *self.__anonymous]

    def add_output(self, output: LogOutput) -> None:
        self.__underlying.addHandler(output.handler)
        if output.id is not None:
            self.__outputs[output.id] = output
        else:
            self.__anonymous.append(output)

    def remove_output(self, output: str | LogOutput) -> None:
        if isinstance(output, str):
            output = self.__outputs[output]
        self.__underlying.removeHandler(output.handler)
        if output.id is not None:
            self.__outputs.pop(output.id, None)
        elif output in self.__anonymous:
            self.__anonymous.remove(output)

    def log(
        self,
        level: Literal["debug", "info", "warning", "error", "critical"] | LogLevel,
        header: str,
        message: object,
    ) -> None:
        """Log `message` under `header` at `level` (a name or a `LogLevel`)."""

        number = level.value if isinstance(level, LogLevel) else getattr(logging, level.upper())
        self.__underlying.log(
            number,
            "%s: %s",
            header,
            message,
            extra={
                "mrverify_name": self.name,
                "mrverify_header": header,
                "mrverify_body": message,
            },
        )

    def debug(self, header: str, message: object = "") -> None:
        self.log("debug", header, message)

    def info(self, header: str, message: object = "") -> None:
        self.log("info", header, message)

    def warning(self, header: str, message: object = "") -> None:
        self.log("warning", header, message)

    def error(self, header: str, message: object = "") -> None:
        self.log("error", header, message)

    def critical(self, header: str, message: object = "") -> None:
        self.log("critical", header, message)


_loggers: dict[str, Logger] = {}


def get_logger(name: str) -> Logger:
    """A shared stderr logger whose level is taken from `MRVERIFY_LOG`."""

    if name in _loggers:
        return _loggers[name]
    raw = os.environ.get(LOG_ENV, "info")
    try:
        level = LogLevel.parse(raw)
        bad = None
    except ValueError:
        level, bad = LogLevel.INFO, raw
    logger = Logger(name, outputs=[LogOutput.stderr(id="stderr", level=level)])
    if bad is not None:
        logger.warning("Bad log level", f"{LOG_ENV}={bad!r}; falling back to info")
    _loggers[name] = logger
    return logger


def set_level(level: LogLevel) -> None:
    """Reset the level of every shared logger (used by the CLI `[log] level` setting)."""

    for logger in _loggers.values():
        for output in logger.outputs:
            output.handler.setLevel(level.value)
