"""Run configuration: one TOML file, environment overrides and CLI flags.

```toml
[run]
seed = 7
jobs = 4

[imaging]
alpha = 0.5
codec = "lossy"
quality = 80

[policy]
threshold = 0.5
```

Every table is optional. Unknown keys are rejected. The merged result is
validated after loading and again after flags are applied, so a bad value is
reported before any command does work.
"""

from __future__ import annotations

from typing import Any

from .configlib import EnvReader, TomlReader, UnknownSettingError, config, configurable, setting
from .dataset import DatasetConfig, OverlayFilter
from .errors import ConfigError
from .imaging import CodecKind, CodecSpec, Region
from .log import LOG_ENV, LogLevel
from .motion import MotionConfig, SkinModel
from .pipeline import Preprocessor
from .protocol.server import parse_endpoint
from .segmentation import PerturbationSpec
from .verification import VerificationPolicy

__all__ = ["RunConfig", "load_run_config", "METHOD_NAMES", "SEGMENTER_KINDS", "EMBEDDER_KINDS"]

METHOD_NAMES = ("iou", "psnr", "ssim", "nrmse", "ncc", "cosine")
SEGMENTER_KINDS = ("oracle", "adapter")
EMBEDDER_KINDS = ("stub", "adapter")


def _validate(cfg: RunConfig) -> None:
    cfg.validate()


@configurable(
    load_config=TomlReader(),
    load_env=EnvReader({LOG_ENV: "log.level"}),
    postload=_validate,
    strict=True,
)
class RunConfig:
    @setting("run.seed", default=0)
    def seed(self) -> int: ...

    @setting("run.jobs", default=1)
    def jobs(self) -> int: ...

    @setting("run.out", default="out")
    def out(self) -> str: ...

    @setting("imaging.alpha", default=0.5)
    def alpha(self) -> float: ...

    @setting("imaging.codec", default="lossless")
    def codec(self) -> str: ...

    @setting("imaging.quality", default=80)
    def quality(self) -> int: ...

    @setting("imaging.crop", default=[])
    def crop(self) -> list[int]: ...

    @setting("policy.threshold", default=0.5)
    def threshold(self) -> float: ...

    @setting("policy.method", default="iou")
    def method(self) -> str: ...

    @setting("perturb.dilate_erode_radius", default=0)
    def dilate_erode_radius(self) -> int: ...

    @setting("perturb.jitter_sigma", default=0.0)
    def jitter_sigma(self) -> float: ...

    @setting("perturb.miss_rate", default=0.0)
    def miss_rate(self) -> float: ...

    @setting("perturb.spurious_rate", default=0.0)
    def spurious_rate(self) -> float: ...

    @setting("perturb.seed", default=0)
    def perturb_seed(self) -> int: ...

    @setting("motion.base_threshold", default=0.05)
    def base_threshold(self) -> float: ...

    @setting("motion.capture_period", default=100.0)
    def capture_period(self) -> float: ...

    @setting("motion.reference_distance", default=1.0)
    def reference_distance(self) -> float: ...

    @setting("motion.min_threshold", default=0.01)
    def min_threshold(self) -> float: ...

    @setting("motion.max_threshold", default=0.5)
    def max_threshold(self) -> float: ...

    @setting("motion.skin.hue", default=[0.0, 50.0])
    def skin_hue(self) -> list[float]: ...

    @setting("motion.skin.sat", default=[0.23, 0.68])
    def skin_sat(self) -> list[float]: ...

    @setting("motion.skin.val", default=[0.35, 1.0])
    def skin_val(self) -> list[float]: ...

    @setting("network.endpoint", default="127.0.0.1:7878")
    def endpoint(self) -> str: ...

    @setting("network.timeout", default=5.0)
    def timeout(self) -> float: ...

    @setting("dataset.val_count", default=200)
    def val_count(self) -> int: ...

    @setting("dataset.test_count", default=200)
    def test_count(self) -> int: ...

    @setting("dataset.class_count", default=4)
    def class_count(self) -> int: ...

    @setting("dataset.positive_fraction", default=0.5)
    def positive_fraction(self) -> float: ...

    @setting("dataset.alignment_points", default=8)
    def alignment_points(self) -> int: ...

    @setting("dataset.filter.tint", default=[64, 160, 255])
    def filter_tint(self) -> list[int]: ...

    @setting("dataset.filter.alpha", default=0.6)
    def filter_alpha(self) -> float: ...

    @setting("dataset.filter.brightness", default=20)
    def filter_brightness(self) -> int: ...

    @setting("dataset.filter.saturation", default=0.8)
    def filter_saturation(self) -> float: ...

    @setting("segmenter.kind", default="oracle")
    def segmenter_kind(self) -> str: ...

    @setting("segmenter.command", default=[])
    def segmenter_command(self) -> list[str]: ...

    @setting("embedder.kind", default="stub")
    def embedder_kind(self) -> str: ...

    @setting("embedder.command", default=[])
    def embedder_command(self) -> list[str]: ...

    @setting("log.level", default="info")
    def log_level(self) -> str: ...

    def override(self, **values: Any) -> RunConfig:
        """Apply flag values (None means "not given") and re-validate."""

        for name, value in values.items():
            if value is None:
                continue
            if not hasattr(type(self), name):
                raise ConfigError(f"unknown setting {name!r}")
            setattr(self, name, value)
        self.validate()
        return self

    def validate(self) -> None:
        if not isinstance(self.jobs, int) or self.jobs < 1:
            raise ConfigError(f"run.jobs must be a positive integer, got {self.jobs!r}")
        if not 0.0 < float(self.alpha) <= 1.0:
            raise ConfigError(f"imaging.alpha must be in (0, 1], got {self.alpha}")
        self.codec_spec()
        self.crop_region()
        if not 0.0 <= float(self.threshold) <= 1.0:
            raise ConfigError(f"policy.threshold must be in [0, 1], got {self.threshold}")
        if self.method not in METHOD_NAMES:
            raise ConfigError(f"policy.method must be one of {', '.join(METHOD_NAMES)}, got {self.method!r}")
        self.perturbation()
        self.motion_config()
        self.skin_model()
        try:
            parse_endpoint(self.endpoint)
        except ValueError as e:
            raise ConfigError(f"network.endpoint: {e}") from e
        if not float(self.timeout) > 0:
            raise ConfigError(f"network.timeout must be positive, got {self.timeout}")
        self.dataset_config()
        if self.class_count < 1:
            raise ConfigError(f"dataset.class_count must be at least 1, got {self.class_count}")
        if self.segmenter_kind not in SEGMENTER_KINDS:
            raise ConfigError(f"segmenter.kind must be one of {', '.join(SEGMENTER_KINDS)}, got {self.segmenter_kind!r}")
        if self.segmenter_kind == "adapter" and not self.segmenter_command:
            raise ConfigError("segmenter.command is required for the adapter segmenter")
        if self.embedder_kind not in EMBEDDER_KINDS:
            raise ConfigError(f"embedder.kind must be one of {', '.join(EMBEDDER_KINDS)}, got {self.embedder_kind!r}")
        if self.embedder_kind == "adapter" and not self.embedder_command:
            raise ConfigError("embedder.command is required for the adapter embedder")
        try:
            LogLevel.parse(self.log_level)
        except ValueError as e:
            raise ConfigError(f"log.level: {e}") from e

    def codec_spec(self) -> CodecSpec:
        try:
            kind = CodecKind(str(self.codec).lower())
            return CodecSpec(kind, int(self.quality) if kind == CodecKind.LOSSY else None)
        except ValueError as e:
            raise ConfigError(f"imaging codec: {e}") from e

    def crop_region(self) -> Region | None:
        if not self.crop:
            return None
        if len(self.crop) != 4:
            raise ConfigError(f"imaging.crop must be [x, y, w, h], got {self.crop}")
        x, y, w, h = (int(v) for v in self.crop)
        if x < 0 or y < 0 or w < 1 or h < 1:
            raise ConfigError(f"imaging.crop must have x, y >= 0 and w, h >= 1, got {self.crop}")
        return Region(x, y, w, h)

    def preprocessor(self) -> Preprocessor:
        return Preprocessor(alpha=float(self.alpha), codec=self.codec_spec(), crop=self.crop_region())

    def policy(self) -> VerificationPolicy:
        return VerificationPolicy(float(self.threshold))

    def perturbation(self) -> PerturbationSpec:
        try:
            return PerturbationSpec(
                dilate_erode_radius=int(self.dilate_erode_radius),
                jitter_sigma=float(self.jitter_sigma),
                miss_rate=float(self.miss_rate),
                spurious_rate=float(self.spurious_rate),
                seed=int(self.perturb_seed),
            )
        except ValueError as e:
            raise ConfigError(f"perturb: {e}") from e

    def motion_config(self) -> MotionConfig:
        return MotionConfig(
            base_threshold=float(self.base_threshold),
            capture_period=float(self.capture_period),
            reference_distance=float(self.reference_distance),
            min_threshold=float(self.min_threshold),
            max_threshold=float(self.max_threshold),
        )

    def skin_model(self) -> SkinModel:
        try:
            return SkinModel(tuple(self.skin_hue), tuple(self.skin_sat), tuple(self.skin_val))  # type: ignore[arg-type]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"motion.skin: {e}") from e

    def dataset_config(self, name: str = "desk") -> DatasetConfig:
        try:
            return DatasetConfig(
                name=name,
                val_count=int(self.val_count),
                test_count=int(self.test_count),
                positive_fraction=float(self.positive_fraction),
                seed=int(self.seed),
                alignment_points=int(self.alignment_points),
                filter=OverlayFilter(
                    tint=tuple(int(c) for c in self.filter_tint),  # type: ignore[arg-type]
                    tint_alpha=float(self.filter_alpha),
                    brightness_delta=int(self.filter_brightness),
                    saturation_scale=float(self.filter_saturation),
                ),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"dataset: {e}") from e


def load_run_config(path: str | None = None) -> RunConfig:
    """Load `path` (defaults only when None) with environment overrides applied."""

    cfg = RunConfig()
    try:
        config[cfg].load(path)
    except UnknownSettingError as e:
        raise ConfigError(str(e)) from e
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e
    except KeyError as e:
        raise ConfigError(f"missing setting: {e}") from e
    return cfg
