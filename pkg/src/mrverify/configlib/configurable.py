from dataclasses import dataclass, field
from threading import Lock
from typing import Any, Callable, Type, overload

from .readers import ConfigLoader


class _Unset:
    __instance = None

    def __new__(cls) -> "_Unset":
        if cls.__instance is None:
            cls.__instance = super().__new__(cls)
        return cls.__instance

    def __repr__(self) -> str:
        return "Unset"


Unset = _Unset()

"""Sentinel for "no default provided".

A setting declared without a default is required: if its key is absent at load
time the loader raises :class:`KeyError`.
"""


class SettingNotLoaded(AttributeError):
    """A setting was read before `Config.load` populated it."""


class UnknownSettingError(KeyError):
    """A strict configurable met keys it does not declare."""

    def __init__(self, keys: list[str]):
        super().__init__(keys)
        self.keys = keys

    def __str__(self) -> str:
        return f"Unknown configuration keys: {', '.join(self.keys)}"


def split_key(key: str) -> list[str]:
    return key.split(".")


def flatten_keys(mapping: dict, prefix: str = "") -> list[str]:
    """Dotted paths of every leaf in a nested mapping. Lists are leaves."""

    keys = []
    for k, v in mapping.items():
        path = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict) and v:
            keys.extend(flatten_keys(v, path))
        else:
            keys.append(path)
    return keys


def merge_config(base: dict, top: dict) -> dict:
    """Recursively merge `top` over `base`; nested tables merge, scalars overwrite."""

    result = base.copy()
    for key, value in top.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = merge_config(result[key], value)
        else:
            result[key] = value
    return result


class Setting[I, V]:
    """A configurable attribute bound to a dotted config key.

    The value lives on the instance under a private slot. `default` is applied
    when the key is missing; `Unset` makes the setting required.
    """

    def __init__(self, key: str, name: str, default: Any = Unset):
        self.key = key
        self.name = name
        self.default = default

    @property
    def slot(self) -> str:
        return f"_setting__{self.name}"

    def __set_name__(self, owner: Type[I], name: str) -> None:
        self.name = name
        # `setting` runs before `configurable`, so make sure the owner is registered.
        Config.update(owner)
        Config.add_setting(owner, self)

    @overload
    def __get__(self, instance: None, owner: Type[I]) -> "Setting[I, V]": ...

    @overload
    def __get__(self, instance: I, owner: Type[I]) -> V: ...

    def __get__(self, instance: I | None, owner: Type[I]) -> "V | Setting[I, V]":
        if instance is None:
            return self
        try:
            return instance.__dict__[self.slot]
        except KeyError:
            raise SettingNotLoaded(
                f"Setting {self.key!r} of {owner.__name__} was read before the configuration was loaded"
            ) from None

    def __set__(self, instance: I, value: V) -> None:
        instance.__dict__[self.slot] = value

    def is_loaded(self, instance: Any) -> bool:
        return self.slot in instance.__dict__


@dataclass
class _Registration:
    config_key: str = ""
    load_config: ConfigLoader | None = None
    load_env: ConfigLoader | None = None
    settings: dict[str, Setting] = field(default_factory=dict)
    postload: Callable[[Any], None] | None = None
    strict: bool = False


class _Config:
    """The registry of configurable classes and the loader entry point."""

    _singleton = None
    _singleton_lock = Lock()

    def __new__(cls):
        if cls._singleton is None:
            with cls._singleton_lock:
                if cls._singleton is None:
                    cls._singleton = super().__new__(cls)
                    cls._singleton.registry = {}
        return cls._singleton

    registry: dict[type, _Registration]

    def __getitem__(self, instance: Any):
        """`config[obj].load(config_file, env_file)` is `Config.load(obj, ...)`."""

        outer = self

        class _Bound:
            def load(self, config_file: str | None = None, env_file: str | None = None):
                outer.load(instance, config_file, env_file)

            def update(self, **kwargs):
                outer.update(type(instance), **kwargs)

        return _Bound()

    def update[T](
        self,
        klass: Type[T],
        *,
        load_config: ConfigLoader | None = None,
        load_env: ConfigLoader | None = None,
        config_key: str = "",
        postload: Callable[[Any], None] | None = None,
        strict: bool | None = None,
    ) -> None:
        """Register `klass` or update the pieces of its registration that are given."""

        reg = self.registry.setdefault(klass, _Registration())
        if config_key:
            reg.config_key = config_key
        if load_config is not None:
            reg.load_config = load_config
        if load_env is not None:
            reg.load_env = load_env
        if postload is not None:
            reg.postload = postload
        if strict is not None:
            reg.strict = strict

    def add_setting(self, klass: type, setting: Setting) -> None:
        if klass not in self.registry:
            raise ValueError(f"Class {klass} is not registered")
        self.registry[klass].settings[setting.key] = setting

    def settings_of(self, klass: type) -> dict[str, Setting]:
        """All settings of `klass`, subclasses overriding their bases."""

        found: dict[str, Setting] = {}
        for cls in klass.__mro__:
            reg = self.registry.get(cls)
            if reg is None:
                continue
            for key, s in reg.settings.items():
                found.setdefault(key, s)
        return found

    def _registration_of(self, klass: type) -> _Registration:
        for cls in klass.__mro__:
            reg = self.registry.get(cls)
            if reg is not None and reg.load_config is not None:
                return reg
        raise ValueError(
            f"Config file loader is not provided for class {klass} or any of its parent classes. Please provide one."
        )

    def load(
        self, instance: Any, config_file: str | None = None, env_file: str | None = None
    ) -> None:
        """Populate the settings of `instance` and run its postload hook."""

        klass = type(instance)
        all_settings = self.settings_of(klass)
        if not all_settings:
            return
        reg = self._registration_of(klass)
        assert reg.load_config is not None

        loaded = reg.load_config(config_file)
        if reg.load_env is not None:
            loaded = merge_config(loaded, reg.load_env(env_file))
        elif env_file:
            raise ValueError("The configurable doesn't accept a separate environment file")

        if reg.config_key:
            for key in split_key(reg.config_key):
                if key not in loaded:
                    raise KeyError(f"Key {key} not found in configuration file")
                loaded = loaded[key]

        if reg.strict:
            declared = set(all_settings)
            unknown = [
                k
                for k in flatten_keys(loaded)
                if k not in declared
                and not any(d.startswith(k + ".") for d in declared)
            ]
            if unknown:
                raise UnknownSettingError(sorted(unknown))

        for key, s in all_settings.items():
            try:
                value = lookup(loaded, key)
            except KeyError:
                if s.default is Unset:
                    raise
                value = s.default
            s.__set__(instance, value)

        if reg.postload is not None:
            reg.postload(instance)


def lookup(mapping: dict, key: str) -> Any:
    current = mapping
    for part in split_key(key):
        if not isinstance(current, dict) or part not in current:
            raise KeyError(f"Key {key} not found in configuration file")
        current = current[part]
    return current


Config = _Config()
config = Config


def configurable(
    load_config: ConfigLoader,
    *,
    config_key: str = "",
    load_env: ConfigLoader | None = None,
    postload: Callable[[Any], None] | None = None,
    strict: bool = False,
):
    """Register a class as configurable.

    Args:
        load_config: Reads the configuration file and returns a dictionary.
        config_key: Only the table under this dotted key is used, if given.
        load_env: Reads environment-provided values, merged over the file.
        postload: Runs after loading; also installed as the `postload` method.
        strict: Reject keys that no setting declares.
    """

    def decorator[T: type](cls: T) -> T:
        Config.update(
            cls,
            load_config=load_config,
            load_env=load_env,
            config_key=config_key,
            postload=postload,
            strict=strict,
        )
        if postload is not None:
            cls.postload = postload
        return cls

    return decorator


def setting[T, S](
    config_key: str, *, default: Any = Unset
) -> Callable[[Callable[[T], S]], S]:
    """Turn a method stub into a setting bound to `config_key`.

    ```python
    @setting("imaging.alpha", default=0.5)
    def alpha(self) -> float: ...
    ```
    """

    def wrapper(method: Callable[[T], S]) -> S:
        return Setting(config_key, method.__name__, default)  # type: ignore[return-value]

    return wrapper
