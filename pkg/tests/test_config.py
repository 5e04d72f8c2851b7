import pytest

from mrverify.config import RunConfig, load_run_config
from mrverify.errors import ConfigError
from mrverify.imaging import CodecKind, CodecSpec, Region
from mrverify.log import LOG_ENV


@pytest.fixture(autouse=True)
def no_log_env(monkeypatch):
    monkeypatch.delenv(LOG_ENV, raising=False)


def write_config(tmp_path, text: str) -> str:
    path = tmp_path / "mrverify.toml"
    path.write_text(text)
    return str(path)


class TestLoading:
    def test_defaults(self):
        cfg = load_run_config()
        assert (cfg.seed, cfg.jobs, cfg.alpha, cfg.threshold) == (0, 1, 0.5, 0.5)
        assert cfg.codec_spec() == CodecSpec.lossless()
        assert cfg.crop_region() is None
        assert cfg.method == "iou"

    def test_file(self, tmp_path):
        path = write_config(
            tmp_path,
            """
            [run]
            seed = 7
            jobs = 4

            [imaging]
            alpha = 0.25
            codec = "lossy"
            quality = 70
            crop = [10, 20, 320, 240]

            [policy]
            threshold = 0.6
            """,
        )
        cfg = load_run_config(path)
        assert (cfg.seed, cfg.jobs) == (7, 4)
        assert cfg.codec_spec() == CodecSpec(CodecKind.LOSSY, 70)
        pre = cfg.preprocessor()
        assert pre.alpha == 0.25
        assert pre.crop == Region(10, 20, 320, 240)
        assert cfg.policy().threshold == 0.6

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="imaging.gamma"):
            load_run_config(write_config(tmp_path, "[imaging]\ngamma = 2.2\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "absent.toml"))

    @pytest.mark.parametrize(
        "text",
        [
            "[imaging]\nalpha = 0.0\n",
            "[imaging]\nalpha = 1.5\n",
            '[imaging]\ncodec = "webp"\n',
            '[imaging]\ncodec = "lossy"\nquality = 0\n',
            "[imaging]\ncrop = [0, 0, 10]\n",
            "[imaging]\ncrop = [0, 0, 0, 10]\n",
            "[policy]\nthreshold = 1.5\n",
            '[policy]\nmethod = "sift"\n',
            "[run]\njobs = 0\n",
            "[perturb]\nmiss_rate = 2.0\n",
            "[motion]\nbase_threshold = 0.9\n",
            '[network]\nendpoint = "localhost"\n',
            "[network]\ntimeout = 0\n",
            "[dataset]\nalignment_points = 2\n",
            "[dataset]\npositive_fraction = 1.5\n",
            '[segmenter]\nkind = "adapter"\n',
            '[embedder]\nkind = "remote"\n',
            '[log]\nlevel = "chatty"\n',
        ],
    )
    def test_invalid_values(self, tmp_path, text):
        with pytest.raises(ConfigError):
            load_run_config(write_config(tmp_path, text))

    def test_environment_overrides_file(self, tmp_path, monkeypatch):
        monkeypatch.setenv(LOG_ENV, "debug")
        cfg = load_run_config(write_config(tmp_path, '[log]\nlevel = "warning"\n'))
        assert cfg.log_level == "debug"

    def test_bad_environment_level(self, monkeypatch):
        monkeypatch.setenv(LOG_ENV, "chatty")
        with pytest.raises(ConfigError):
            load_run_config()


class TestOverride:
    def test_flags_win(self):
        cfg = load_run_config().override(alpha=0.3, seed=None, codec="lossy", quality=50)
        assert cfg.alpha == 0.3
        assert cfg.seed == 0
        assert cfg.codec_spec() == CodecSpec.lossy(50)

    def test_revalidated(self):
        with pytest.raises(ConfigError):
            load_run_config().override(alpha=2.0)

    def test_unknown_flag(self):
        with pytest.raises(ConfigError):
            load_run_config().override(gamma=1.0)


class TestBuilders:
    def test_perturbation(self):
        spec = load_run_config().override(dilate_erode_radius=-2, miss_rate=0.1, perturb_seed=5).perturbation()
        assert (spec.dilate_erode_radius, spec.miss_rate, spec.seed) == (-2, 0.1, 5)

    def test_dataset_config(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path, "[dataset]\nval_count = 10\ntest_count = 30\n[run]\nseed = 9\n"))
        dataset = cfg.dataset_config("bench")
        assert (dataset.name, dataset.val_count, dataset.test_count, dataset.seed) == ("bench", 10, 30, 9)
        assert dataset.filter.tint == (64, 160, 255)

    def test_motion(self):
        cfg = load_run_config()
        assert cfg.motion_config().base_threshold == 0.05
        assert cfg.skin_model().hue_range == (0.0, 50.0)

    def test_is_a_run_config(self):
        assert isinstance(load_run_config(), RunConfig)
