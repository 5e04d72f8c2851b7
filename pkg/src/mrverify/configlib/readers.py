import os
import tomllib
from typing import Mapping, Protocol

__all__ = ["ConfigLoader", "TomlReader", "EnvReader", "ConfigFileNotFound"]


class ConfigLoader(Protocol):
    def __call__(self, config_file: str | None) -> dict: ...


class ConfigFileNotFound(FileNotFoundError):
    def __init__(self, path: str):
        super().__init__(f"Configuration file not found: {path}")
        self.path = path


class TomlReader(ConfigLoader):
    """Read a TOML file. A missing default file reads as an empty table."""

    def __init__(self, default_path: str | None = None):
        self.default_path = default_path

    def __call__(self, path: str | None = None) -> dict:
        if path is None:
            if self.default_path is None or not os.path.exists(self.default_path):
                return {}
            path = self.default_path
        if not os.path.exists(path):
            raise ConfigFileNotFound(path)
        with open(path, "rb") as f:
            return tomllib.load(f)


class EnvReader(ConfigLoader):
    """Map environment variables onto dotted config keys.

    ```python
    EnvReader({"MRVERIFY_LOG": "log.level"})
    ```

    An env file, if given, is a TOML table of the same variable names.
    """

    def __init__(self, mapping: Mapping[str, str]):
        self.mapping = dict(mapping)

    def __call__(self, env_file: str | None = None) -> dict:
        if env_file is not None:
            with open(env_file, "rb") as f:
                source: Mapping[str, object] = tomllib.load(f)
        else:
            source = os.environ
        result: dict = {}
        for var, key in self.mapping.items():
            if var not in source:
                continue
            *parents, leaf = key.split(".")
            table = result
            for part in parents:
                table = table.setdefault(part, {})
            table[leaf] = source[var]
        return result
