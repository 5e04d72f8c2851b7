"""Tests for the configlib module: loading, postload hooks, strict keys and env overrides."""

import pytest

from mrverify.configlib import (
    Config,
    EnvReader,
    SettingNotLoaded,
    TomlReader,
    UnknownSettingError,
    config,
    configurable,
    setting,
)
from mrverify.configlib.readers import ConfigFileNotFound


def write_toml(tmp_path, text: str) -> str:
    path = tmp_path / "settings.toml"
    path.write_text(text)
    return str(path)


class TestPostloadFunctionality:
    """Test the postload functionality of the configurable decorator."""

    def test_postload_called_after_config_load(self):
        """Test that postload function is called after configuration loading."""
        seen = []

        @configurable(
            load_config=lambda config_file: {"name": "test", "value": 42} if config_file else {},
            postload=seen.append,
        )
        class Loaded:
            @setting("name")
            def name(self): ...

            @setting("value")
            def value(self): ...

        instance = Loaded()
        config[instance].load("dummy")

        assert seen == [instance], "Postload should receive the loaded instance"
        assert instance.name == "test"
        assert instance.value == 42

    def test_postload_registered_as_member_function(self):
        """Test that postload function is registered as a member function of the class."""

        def my_postload(instance):
            pass

        @configurable(load_config=lambda config_file: {}, postload=my_postload)
        class Hooked:
            pass

        assert getattr(Hooked, "postload") is my_postload, "Postload should be the registered function"
        assert callable(getattr(Hooked(), "postload")), "Instance postload should be callable"

    def test_postload_without_function(self):
        @configurable(load_config=lambda config_file: {"name": "test"})
        class Plain:
            @setting("name")
            def name(self): ...

        assert not hasattr(Plain, "postload"), "Class should not have postload when not provided"

    def test_postload_with_inheritance(self):
        """The most specific registration's postload runs, and inherited settings load."""
        called = []

        @configurable(load_config=lambda config_file: {"name": "parent"}, postload=lambda _: called.append("parent"))
        class Parent:
            @setting("name")
            def name(self): ...

        @configurable(
            load_config=lambda config_file: {"name": "parent", "value": 100},
            postload=lambda _: called.append("child"),
        )
        class Child(Parent):
            @setting("value")
            def value(self): ...

        child = Child()
        config[child].load("dummy")

        assert called == ["child"], "Only the child postload should run"
        assert (child.name, child.value) == ("parent", 100)

    def test_postload_exception_propagates(self):
        def failing_postload(instance):
            raise ValueError("Postload failed")

        @configurable(load_config=lambda config_file: {"name": "test"}, postload=failing_postload)
        class Failing:
            @setting("name")
            def name(self): ...

        with pytest.raises(ValueError, match="Postload failed"):
            config[Failing()].load("dummy")

    def test_postload_with_config_update(self):
        def original(instance):
            instance.marker = "original"

        def updated(instance):
            instance.marker = "updated"

        @configurable(load_config=lambda config_file: {"name": "test"}, postload=original)
        class Updated:
            @setting("name")
            def name(self): ...

        Config.update(Updated, postload=updated)
        instance = Updated()
        config[instance].load("dummy")
        assert getattr(instance, "marker") == "updated", "Updated postload should be called"


class TestSettings:
    def test_read_before_load(self):
        @configurable(load_config=lambda config_file: {"alpha": 0.5})
        class Lazy:
            @setting("alpha")
            def alpha(self): ...

        with pytest.raises(SettingNotLoaded):
            Lazy().alpha

    def test_required_setting_missing(self):
        @configurable(load_config=lambda config_file: {})
        class Required:
            @setting("imaging.alpha")
            def alpha(self): ...

        with pytest.raises(KeyError):
            config[Required()].load()

    def test_config_key_selects_table(self):
        @configurable(load_config=lambda config_file: {"server": {"port": 7878}}, config_key="server")
        class Scoped:
            @setting("port")
            def port(self): ...

        instance = Scoped()
        config[instance].load()
        assert instance.port == 7878

    def test_strict_rejects_unknown_keys(self):
        @configurable(
            load_config=lambda config_file: {"imaging": {"alpha": 0.5, "gamma": 2.2}, "extra": 1},
            strict=True,
        )
        class Strict:
            @setting("imaging.alpha")
            def alpha(self): ...

        with pytest.raises(UnknownSettingError) as e:
            config[Strict()].load()
        assert e.value.keys == ["extra", "imaging.gamma"]

    def test_strict_accepts_partial_tables(self):
        @configurable(load_config=lambda config_file: {"imaging": {}}, strict=True)
        class Strict:
            @setting("imaging.alpha", default=1.0)
            def alpha(self): ...

        instance = Strict()
        config[instance].load()
        assert instance.alpha == 1.0


class TestReaders:
    def test_toml_reader(self, tmp_path):
        path = write_toml(tmp_path, "[imaging]\nalpha = 0.25\ncrop = [0, 0, 64, 48]\n")
        assert TomlReader()(path) == {"imaging": {"alpha": 0.25, "crop": [0, 0, 64, 48]}}

    def test_toml_reader_missing_file(self, tmp_path):
        with pytest.raises(ConfigFileNotFound) as e:
            TomlReader()(str(tmp_path / "absent.toml"))
        assert e.value.path.endswith("absent.toml")

    def test_toml_reader_default_path(self, tmp_path):
        assert TomlReader(str(tmp_path / "absent.toml"))(None) == {}
        path = write_toml(tmp_path, "[run]\nseed = 3\n")
        assert TomlReader(path)(None) == {"run": {"seed": 3}}

    def test_env_reader(self, monkeypatch):
        monkeypatch.setenv("MRVERIFY_TEST_LEVEL", "debug")
        monkeypatch.delenv("MRVERIFY_TEST_SEED", raising=False)
        reader = EnvReader({"MRVERIFY_TEST_LEVEL": "log.level", "MRVERIFY_TEST_SEED": "run.seed"})
        assert reader() == {"log": {"level": "debug"}}

    def test_env_file(self, tmp_path):
        path = write_toml(tmp_path, 'MRVERIFY_TEST_LEVEL = "error"\n')
        assert EnvReader({"MRVERIFY_TEST_LEVEL": "log.level"})(path) == {"log": {"level": "error"}}

    def test_env_overrides_file(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MRVERIFY_TEST_LEVEL", "warning")
        path = write_toml(tmp_path, '[log]\nlevel = "info"\nfile = "run.log"\n')

        @configurable(load_config=TomlReader(), load_env=EnvReader({"MRVERIFY_TEST_LEVEL": "log.level"}))
        class Logging:
            @setting("log.level")
            def level(self): ...

            @setting("log.file")
            def file(self): ...

        instance = Logging()
        config[instance].load(path)
        assert (instance.level, instance.file) == ("warning", "run.log")


class TestArrayHandling:
    """Test that configlib handles arrays in TOML correctly."""

    def test_array_setting_type_preservation(self, tmp_path):
        path = write_toml(
            tmp_path,
            """
            [config]
            strings = ["hello", "world"]
            integers = [10, 20, 30]
            floats = [1.1, 2.2, 3.3]
            booleans = [true, false, true]
            matrix = [[1, 2], [3, 4]]
            empty = []
            """,
        )

        @configurable(load_config=TomlReader(path))
        class Arrays:
            @setting("config.strings")
            def strings(self): ...

            @setting("config.integers")
            def integers(self): ...

            @setting("config.floats")
            def floats(self): ...

            @setting("config.booleans")
            def booleans(self): ...

            @setting("config.matrix")
            def matrix(self): ...

            @setting("config.empty")
            def empty(self): ...

            @setting("config.missing", default=[1, 2, 3])
            def missing(self): ...

        instance = Arrays()
        config[instance].load()

        assert instance.strings == ["hello", "world"]
        assert all(isinstance(i, int) for i in instance.integers)
        assert instance.floats == [1.1, 2.2, 3.3]
        assert instance.booleans == [True, False, True]
        assert instance.matrix == [[1, 2], [3, 4]]
        assert instance.empty == []
        assert instance.missing == [1, 2, 3]

    def test_array_of_tables_setting(self, tmp_path):
        path = write_toml(
            tmp_path,
            """
            [[servers]]
            name = "edge"

            [[servers.hosts]]
            ip = "192.168.1.1"
            port = 7878

            [[servers]]
            name = "backup"
            """,
        )

        @configurable(load_config=TomlReader(path))
        class Servers:
            @setting("servers")
            def servers(self): ...

        instance = Servers()
        config[instance].load()
        assert instance.servers == [
            {"name": "edge", "hosts": [{"ip": "192.168.1.1", "port": 7878}]},
            {"name": "backup"},
        ]
