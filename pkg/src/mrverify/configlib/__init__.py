"""Loading configuration files into Python objects.

A class declares its settings with `@setting` on method stubs and registers a
loader with `@configurable`; `config[obj].load(...)` then fills the instance.

```python
@configurable(load_config=TomlReader(), strict=True)
class App:
    @setting("imaging.alpha", default=0.5)
    def alpha(self) -> float: ...

app = App()
config[app].load("mrverify.toml")
```

Settings without `default` are required (`KeyError` on a missing key). Reading
a setting before loading raises `SettingNotLoaded`. With `strict=True`, keys not
declared by any setting raise `UnknownSettingError`.
"""

from .configurable import (
    setting,
    configurable,
    Config,
    config,
    Setting,
    Unset,
    SettingNotLoaded,
    UnknownSettingError,
)
from .readers import TomlReader, EnvReader, ConfigLoader, ConfigFileNotFound

__all__ = [
    "setting",
    "configurable",
    "Config",
    "config",
    "Setting",
    "Unset",
    "SettingNotLoaded",
    "UnknownSettingError",
    "TomlReader",
    "EnvReader",
    "ConfigLoader",
    "ConfigFileNotFound",
]
