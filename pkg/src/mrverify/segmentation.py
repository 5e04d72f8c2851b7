"""Reference masks from the virtual layer and candidate masks from a segmenter.

Two segmenters are provided. :class:`OracleSegmenter` answers from ground-truth
instance labels, projected into the geometry of the uploaded frame and degraded
by a seeded :class:`PerturbationSpec`. :class:`ExternalSegmenter` shells out to
a user-provided program and reads back PNG masks plus a JSON index.
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from threading import Lock
from typing import Mapping, NamedTuple, Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptyReferenceMask, SegmenterFailure, UnknownFrame
from .geometry import Homography, warp_mask
from .imaging import Frame, Mask, Region, binary_filter, crop_mask, scale_mask
from .log import get_logger

__all__ = [
    "InstanceLabel",
    "Candidate",
    "SegmentationOutput",
    "PerturbationSpec",
    "FrameKey",
    "FrameView",
    "Segmenter",
    "OracleSegmenter",
    "ExternalSegmenter",
    "extract_reference_mask",
    "segment",
    "perturb",
]

logger = get_logger("mrverify.segmentation")

PERTURB_STREAM = 1
SPURIOUS_STREAM = 2
ORACLE_CONFIDENCE = 1.0
SPURIOUS_CONFIDENCE = 0.5
VON_NEUMANN = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class InstanceLabel:
    class_id: int
    mask: Mask
    bbox: Region

    def __post_init__(self) -> None:
        box = self.mask.bbox()
        if box is None:
            raise ValueError("instance mask is empty")
        if box != self.bbox:
            raise ValueError(f"bbox {self.bbox.as_tuple()} is not the tight box {box.as_tuple()} of the mask")

    @classmethod
    def from_mask(cls, class_id: int, mask: Mask) -> InstanceLabel:
        box = mask.bbox()
        if box is None:
            raise ValueError("instance mask is empty")
        return cls(class_id, mask, box)


@dataclass(frozen=True)
class Candidate:
    class_id: int
    mask: Mask
    confidence: float = ORACLE_CONFIDENCE


@dataclass(frozen=True)
class SegmentationOutput:
    candidates: tuple[Candidate, ...] = ()

    def __len__(self) -> int:
        return len(self.candidates)

    def masks(self) -> list[Mask]:
        return [c.mask for c in self.candidates]

    def of_class(self, class_id: int) -> SegmentationOutput:
        return SegmentationOutput(tuple(c for c in self.candidates if c.class_id == class_id))


@dataclass(frozen=True)
class PerturbationSpec:
    """Seeded degradation applied to oracle masks."""

    dilate_erode_radius: int = 0
    jitter_sigma: float = 0.0
    miss_rate: float = 0.0
    spurious_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("miss_rate", "spurious_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.jitter_sigma < 0:
            raise ValueError(f"jitter_sigma must be non-negative, got {self.jitter_sigma}")

    @property
    def is_identity(self) -> bool:
        return (
            self.dilate_erode_radius == 0
            and self.jitter_sigma == 0
            and self.miss_rate == 0
            and self.spurious_rate == 0
        )


class FrameKey(NamedTuple):
    """Identifies a query frame: the source image and the sample (step) index."""

    model_id: int
    step_index: int


@dataclass(frozen=True)
class FrameView:
    """How a query frame was derived from its source image.

    The source was cropped to `region`, resampled to `size` and, if a
    `homography` is given, warped by it onto the reference grid.
    """

    region: Region | None = None
    size: tuple[int, int] | None = None
    homography: Homography | None = field(default=None)

    def project(self, mask: Mask) -> Mask:
        if self.region is not None:
            mask = crop_mask(mask, self.region)
        if self.size is not None:
            mask = scale_mask(mask, self.size)
        if self.homography is not None and not self.homography.is_identity():
            mask = warp_mask(mask, self.homography, mask.size)
        return mask


class Segmenter(Protocol):
    def segment(
        self, key: FrameKey, step_class: int, frame: Frame | None = None, view: FrameView | None = None
    ) -> SegmentationOutput: ...


def extract_reference_mask(virtual_layer: Frame) -> Mask:
    mask = binary_filter(virtual_layer)
    if mask.is_empty():
        raise EmptyReferenceMask("the virtual layer has no non-zero pixel")
    return mask


def segment(
    frame_id: FrameKey,
    step_class: int,
    segmenter: Segmenter,
    *,
    frame: Frame | None = None,
    view: FrameView | None = None,
) -> SegmentationOutput:
    """Candidates of `step_class` only; an empty output means the object is absent."""

    return segmenter.segment(frame_id, step_class, frame, view).of_class(step_class)


def _jitter(bits: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    dx = int(np.rint(rng.normal(0.0, sigma)))
    dy = int(np.rint(rng.normal(0.0, sigma)))
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    if len(rows) == 0:
        return bits
    height, width = bits.shape
    dx = min(max(dx, -int(cols[0])), width - 1 - int(cols[-1]))
    dy = min(max(dy, -int(rows[0])), height - 1 - int(rows[-1]))
    if dx == 0 and dy == 0:
        return bits
    return np.roll(bits, (dy, dx), axis=(0, 1))


def perturb(label_mask: Mask, spec: PerturbationSpec, instance_index: int, *, nonce: int = 0) -> Mask | None:
    """Degrade a ground-truth mask; None means the instance was missed.

    The draw sequence is fixed: miss, then morphology, then per-axis jitter
    clamped so the mask's bounding box stays in bounds. The generator is seeded
    from `(spec.seed, nonce, instance_index)`.
    """

    if spec.is_identity:
        return label_mask
    rng = np.random.default_rng([spec.seed, PERTURB_STREAM, nonce, instance_index])
    if rng.random() < spec.miss_rate:
        return None
    bits = np.array(label_mask.bits)
    radius = spec.dilate_erode_radius
    if radius > 0:
        bits = ndimage.binary_dilation(bits, structure=VON_NEUMANN, iterations=radius)
    elif radius < 0:
        bits = ndimage.binary_erosion(bits, structure=VON_NEUMANN, iterations=-radius)
    if spec.jitter_sigma > 0:
        bits = _jitter(bits, rng, spec.jitter_sigma)
    return Mask(bits)


def _spurious(
    like: Mask, step_class: int, spec: PerturbationSpec, instance_index: int, nonce: int
) -> Candidate | None:
    """A false detection: a box the size of `like`'s bbox at a random position."""

    if spec.spurious_rate <= 0:
        return None
    rng = np.random.default_rng([spec.seed, SPURIOUS_STREAM, nonce, instance_index])
    if rng.random() >= spec.spurious_rate:
        return None
    box = like.bbox()
    if box is None:
        return None
    x = int(rng.integers(0, like.width - box.w + 1))
    y = int(rng.integers(0, like.height - box.h + 1))
    region = Region(x, y, box.w, box.h)
    return Candidate(step_class, Mask.from_region(like.width, like.height, region), SPURIOUS_CONFIDENCE)


class OracleSegmenter:
    """Ground-truth segmenter keyed by source image (`model_id`)."""

    def __init__(self, labels: Mapping[int, Sequence[InstanceLabel]], spec: PerturbationSpec | None = None):
        self.labels = {int(k): tuple(v) for k, v in labels.items()}
        self.spec = spec or PerturbationSpec()

    def segment(
        self, key: FrameKey, step_class: int, frame: Frame | None = None, view: FrameView | None = None
    ) -> SegmentationOutput:
        try:
            instances = self.labels[key.model_id]
        except KeyError:
            raise UnknownFrame(f"no ground truth for model {key.model_id}") from None
        view = view or FrameView()
        candidates: list[Candidate] = []
        for index, instance in enumerate(instances):
            if instance.class_id != step_class:
                continue
            projected = view.project(instance.mask)
            if projected.is_empty():
                continue
            degraded = perturb(projected, self.spec, index, nonce=key.step_index)
            if degraded is not None:
                candidates.append(Candidate(step_class, degraded, ORACLE_CONFIDENCE))
            spurious = _spurious(projected, step_class, self.spec, index, key.step_index)
            if spurious is not None:
                candidates.append(spurious)
        if frame is not None:
            for candidate in candidates:
                if candidate.mask.size != frame.size:
                    raise SegmenterFailure(
                        f"oracle mask {candidate.mask.size} does not match the query frame {frame.size}"
                    )
        return SegmentationOutput(tuple(candidates))


class ExternalSegmenter:
    """Runs `command FRAME_PNG STEP_CLASS OUT_DIR` for every query.

    The program writes one single-channel 0/255 PNG per candidate into OUT_DIR
    plus `index.json`, a list of `{"class_id", "confidence", "file"}` objects.
    Calls are serialised; the subprocess is not assumed to be reentrant.
    """

    INDEX = "index.json"

    def __init__(self, command: Sequence[str], *, timeout: float | None = 30.0):
        if not command:
            raise ValueError("external segmenter command is empty")
        self.command = list(command)
        self.timeout = timeout
        self.__lock = Lock()

    def segment(
        self, key: FrameKey, step_class: int, frame: Frame | None = None, view: FrameView | None = None
    ) -> SegmentationOutput:
        if frame is None:
            raise SegmenterFailure("the external segmenter needs the query frame")
        with self.__lock, tempfile.TemporaryDirectory(prefix="mrverify-seg-") as workdir:
            frame_path = os.path.join(workdir, "frame.png")
            out_dir = os.path.join(workdir, "out")
            os.makedirs(out_dir)
            frame.to_image().save(frame_path, format="PNG")
            cmd = [*self.command, frame_path, str(step_class), out_dir]
            logger.debug("Running segmenter", " ".join(cmd))
            try:
                result = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise SegmenterFailure(f"cannot run {self.command[0]}: {e}") from e
            if result.returncode != 0:
                raise SegmenterFailure(
                    f"{self.command[0]} exited with {result.returncode}: {result.stderr.strip()}"
                )
            return self._read_index(out_dir, frame)

    def _read_index(self, out_dir: str, frame: Frame) -> SegmentationOutput:
        try:
            with open(os.path.join(out_dir, self.INDEX)) as f:
                entries = json.load(f)
            candidates = []
            for entry in entries:
                with Image.open(os.path.join(out_dir, entry["file"])) as image:
                    mask = Mask.from_image(image)
                if mask.size != frame.size:
                    raise SegmenterFailure(f"mask {entry['file']} is {mask.size}, expected {frame.size}")
                candidates.append(Candidate(int(entry["class_id"]), mask, float(entry["confidence"])))
        except SegmenterFailure:
            raise
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise SegmenterFailure(f"malformed segmenter output: {e}") from e
        return SegmentationOutput(tuple(candidates))
