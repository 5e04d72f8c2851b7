"""Logging with several outputs and formats.

`Logger` fans each record out to its `LogOutput`s (stdout, stderr or a file),
each with its own level, `plain` or `jsonl` format and optional timestamp.
Modules obtain a shared logger with `get_logger(__name__)`; its level comes
from the `MRVERIFY_LOG` environment variable.

```python
logger = get_logger("mrverify.server")
logger.info("Listening", f"{host}:{port}")
```
"""

from .logger import Logger, LogOutput, LogOutputKind, LogLevel, get_logger, set_level, LOG_ENV

__all__ = ["Logger", "LogOutput", "LogOutputKind", "LogLevel", "get_logger", "set_level", "LOG_ENV"]
