"""Hand detection by skin-colour proportion and the idle/busy capture state machine.

The user is modelled in two stages. While idle (no hands in view) the client
captures a reference frame of the displayed guidance; hands appearing move the
session to busy; hands disappearing again mean the step was performed, which
triggers the target capture. A new reference is taken only after the server's
feedback has refreshed the guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable

import numpy as np
from matplotlib.colors import rgb_to_hsv

from .errors import ConfigError, InvalidDistance, NotAwaiting
from .imaging import Frame

__all__ = [
    "SkinModel",
    "MotionConfig",
    "Stage",
    "MotionState",
    "MotionEventKind",
    "MotionEvent",
    "skin_proportion",
    "effective_threshold",
    "step",
    "acknowledge_feedback",
    "MotionDetector",
    "trace",
]


@dataclass(frozen=True)
class SkinModel:
    """An HSV box classifier; hue in degrees, saturation and value in [0, 1].

    A hue range with `lo > hi` wraps through 0 degrees, e.g. `(340, 20)`.
    """

    hue_range: tuple[float, float] = (0.0, 50.0)
    sat_range: tuple[float, float] = (0.23, 0.68)
    val_range: tuple[float, float] = (0.35, 1.0)

    def __post_init__(self) -> None:
        for name, (lo, hi) in (("sat_range", self.sat_range), ("val_range", self.val_range)):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})")
        lo, hi = self.hue_range
        if not (0.0 <= lo <= 360.0 and 0.0 <= hi <= 360.0):
            raise ConfigError(f"hue_range must lie in [0, 360] degrees, got ({lo}, {hi})")

    def hue_intervals(self) -> list[tuple[float, float]]:
        lo, hi = self.hue_range
        if lo <= hi:
            return [(lo, hi)]
        return [(lo, 360.0), (0.0, hi)]

    def classify(self, frame: Frame) -> np.ndarray:
        """Boolean `(h, w)` array of skin-coloured pixels."""

        hsv = rgb_to_hsv(frame.pixels.astype(np.float64) / 255.0)
        hue = hsv[..., 0] * 360.0
        sat, val = hsv[..., 1], hsv[..., 2]
        in_hue = np.zeros(hue.shape, dtype=np.bool_)
        for lo, hi in self.hue_intervals():
            in_hue |= (hue >= lo) & (hue <= hi)
        in_sat = (sat >= self.sat_range[0]) & (sat <= self.sat_range[1])
        in_val = (val >= self.val_range[0]) & (val <= self.val_range[1])
        return in_hue & in_sat & in_val


@dataclass(frozen=True)
class MotionConfig:
    base_threshold: float = 0.05
    capture_period: float = 100.0
    reference_distance: float = 1.0
    min_threshold: float = 0.01
    max_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.base_threshold < 1.0:
            raise ConfigError(f"base_threshold must be in (0, 1), got {self.base_threshold}")
        if not self.min_threshold <= self.base_threshold <= self.max_threshold:
            raise ConfigError(
                "thresholds must satisfy min <= base <= max, got "
                f"{self.min_threshold} <= {self.base_threshold} <= {self.max_threshold}"
            )
        if self.capture_period <= 0:
            raise ConfigError(f"capture_period must be positive, got {self.capture_period}")
        if self.reference_distance <= 0:
            raise ConfigError(f"reference_distance must be positive, got {self.reference_distance}")


class Stage(Enum):
    IDLE = "idle"
    BUSY = "busy"


@dataclass(frozen=True)
class MotionState:
    """FSM state. `has_reference` records a reference captured for the pending step."""

    stage: Stage = Stage.IDLE
    awaiting_feedback: bool = False
    has_reference: bool = False


class MotionEventKind(Enum):
    NONE = "none"
    CAPTURE_REFERENCE = "capture_reference"
    CAPTURE_TARGET = "capture_target"


@dataclass(frozen=True)
class MotionEvent:
    kind: MotionEventKind = MotionEventKind.NONE

    @property
    def is_capture(self) -> bool:
        return self.kind != MotionEventKind.NONE


NO_EVENT = MotionEvent()


def skin_proportion(frame: Frame, model: SkinModel) -> float:
    return float(np.count_nonzero(model.classify(frame))) / (frame.width * frame.height)


def effective_threshold(config: MotionConfig, tag_distance: float) -> float:
    """Hand threshold for a tag seen at `tag_distance`.

    Projected hand area falls with the square of the distance, so the base
    threshold is scaled by `(reference_distance / tag_distance) ** 2` and
    clamped to `[min_threshold, max_threshold]`.
    """

    if not tag_distance > 0:
        raise InvalidDistance(f"tag distance must be positive, got {tag_distance}")
    raw = config.base_threshold * (config.reference_distance / tag_distance) ** 2
    return min(max(raw, config.min_threshold), config.max_threshold)


def _transition(state: MotionState, hand: bool) -> tuple[MotionState, MotionEvent]:
    match state.stage, hand:
        case Stage.IDLE, True:
            return replace(state, stage=Stage.BUSY), NO_EVENT
        case Stage.IDLE, False:
            if not state.awaiting_feedback and not state.has_reference:
                return replace(state, has_reference=True), MotionEvent(MotionEventKind.CAPTURE_REFERENCE)
            return state, NO_EVENT
        case Stage.BUSY, True:
            return state, NO_EVENT
        case _:
            idle = replace(state, stage=Stage.IDLE)
            if state.has_reference:
                return (
                    replace(idle, has_reference=False, awaiting_feedback=True),
                    MotionEvent(MotionEventKind.CAPTURE_TARGET),
                )
            return idle, NO_EVENT


def step(
    state: MotionState, frame: Frame, model: SkinModel, threshold: float
) -> tuple[MotionState, MotionEvent]:
    """Advance the FSM by one captured frame; at most one event is emitted."""

    return _transition(state, skin_proportion(frame, model) > threshold)


def acknowledge_feedback(state: MotionState) -> MotionState:
    if not state.awaiting_feedback:
        raise NotAwaiting("no verification result is pending")
    return replace(state, awaiting_feedback=False)


def trace(hands: Iterable[bool], state: MotionState | None = None) -> list[tuple[MotionState, MotionEvent]]:
    """Run the FSM over a hand-presence script without frames.

    Feedback is acknowledged immediately after every target capture, as the
    simulator does once the server has answered.
    """

    state = state or MotionState()
    out = []
    for hand in hands:
        state, event = _transition(state, hand)
        out.append((state, event))
        if event.kind == MotionEventKind.CAPTURE_TARGET:
            state = acknowledge_feedback(state)
    return out


class MotionDetector:
    """Owns a :class:`MotionState` and feeds it frames at the capture period."""

    def __init__(self, model: SkinModel | None = None, config: MotionConfig | None = None, tag_distance: float | None = None):
        self.model = model or SkinModel()
        self.config = config or MotionConfig()
        self.state = MotionState()
        self.threshold = (
            effective_threshold(self.config, tag_distance)
            if tag_distance is not None
            else self.config.base_threshold
        )

    @property
    def capture_period_s(self) -> float:
        return self.config.capture_period / 1000.0

    def observe(self, frame: Frame) -> MotionEvent:
        self.state, event = step(self.state, frame, self.model, self.threshold)
        return event

    def acknowledge(self) -> None:
        self.state = acknowledge_feedback(self.state)
