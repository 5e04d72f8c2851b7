"""Synthetic reference/target pair datasets and their manifests.

A pair is built from one annotated instance of a source image. The target frame
is the source image itself. The virtual layer holds the instance's pixels, run
through an :class:`OverlayFilter` to look rendered, on a black background; the
reference frame is the target with that layer pasted on top. Positive pairs
paste the layer where the instance is; negative pairs shift it by half to one
bounding-box side on each axis.

Layout written by :func:`build_dataset`::

    OUT/
      sources/src_0000.png            source image (also every target frame)
      sources/src_0000_inst_00.png    instance mask, 0/255
      val/0000_reference.png
      val/0000_layer.png
      val/0000_mask.png               reference mask, 0/255
      val.json                        manifest (schema below)
      test/...
      test.json

Manifest JSON: `schema_version`, `name`, `split`, `seed`, `class_count`,
`positive_fraction`, `sources` (`model_id`, `source_id`, `image`, `width`,
`height`, `instances`: `class_id`, `bbox`, `mask`) and `samples` (`index`,
`model_id`, `instance_index`, `step_class`, `step_index`, `ground_truth`,
`shift`, `reference`, `layer`, `target`, `reference_mask`,
`alignment_points`). File references are `{"path", "crc32"}` with paths
relative to the manifest.
"""

from __future__ import annotations

import io
import json
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import (
    ChecksumMismatch,
    InsufficientSources,
    InstanceNotInImage,
    ManifestCorrupt,
    MissingFile,
    UnshiftableInstance,
)
from .imaging import CodecSpec, Frame, Mask, Region, encode
from .log import get_logger
from .progress import track
from .segmentation import InstanceLabel
from .verification import iou

__all__ = [
    "Split",
    "AnnotatedImage",
    "OverlayFilter",
    "ShiftSpec",
    "SamplePair",
    "DatasetConfig",
    "FileRef",
    "SourceRecord",
    "SampleRecord",
    "DatasetManifest",
    "rasterize_polygon",
    "read_polygon_annotations",
    "read_yolo_annotations",
    "load_sources",
    "synthesize_sources",
    "write_annotated_images",
    "alignment_grid",
    "generate_pair",
    "generate_samples",
    "build_dataset",
    "save_manifest",
    "load_manifest",
]

logger = get_logger("mrverify.dataset")

SCHEMA_VERSION = 1
MAX_SHIFT_ATTEMPTS = 16
COLLISION_IOU = 1.0 / 3.0
SPLIT_STREAMS = {"val": 0, "test": 1}


class Split(Enum):
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class AnnotatedImage:
    image: Frame
    instances: tuple[InstanceLabel, ...]
    source_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        for i, instance in enumerate(self.instances):
            if instance.mask.size != self.image.size:
                raise InstanceNotInImage(
                    f"instance {i} of {self.source_id} is {instance.mask.size}, image is {self.image.size}"
                )

    def index_of(self, instance: InstanceLabel) -> int:
        for i, candidate in enumerate(self.instances):
            if candidate is instance:
                return i
        for i, candidate in enumerate(self.instances):
            if candidate == instance:
                return i
        raise InstanceNotInImage(f"instance of class {instance.class_id} is not part of {self.source_id}")


@dataclass(frozen=True)
class OverlayFilter:
    """Makes physical pixels look like a render: desaturate, tint, brighten."""

    tint: tuple[int, int, int] = (64, 160, 255)
    tint_alpha: float = 0.6
    brightness_delta: int = 20
    saturation_scale: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.tint_alpha <= 1.0:
            raise ValueError(f"tint alpha must be in [0, 1], got {self.tint_alpha}")
        if not -128 <= self.brightness_delta <= 127:
            raise ValueError(f"brightness delta must fit a signed byte, got {self.brightness_delta}")
        if self.saturation_scale < 0:
            raise ValueError(f"saturation scale must be non-negative, got {self.saturation_scale}")

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        rgb = pixels.astype(np.float64)
        luma = (rgb @ np.array([0.299, 0.587, 0.114]))[..., None]
        rgb = luma + (rgb - luma) * self.saturation_scale
        rgb = (1.0 - self.tint_alpha) * rgb + self.tint_alpha * np.asarray(self.tint, dtype=np.float64)
        rgb = rgb + self.brightness_delta
        return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class ShiftSpec:
    lo: float = 0.5
    hi: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.lo <= self.hi:
            raise ValueError(f"shift range must satisfy 0 < lo <= hi, got ({self.lo}, {self.hi})")


@dataclass(frozen=True, eq=False)
class SamplePair:
    reference: Frame
    target: Frame
    layer: Frame
    reference_mask: Mask
    step_class: int
    step_index: int
    ground_truth: bool
    model_id: int = 0
    instance_index: int = 0
    shift: tuple[int, int] = (0, 0)
    alignment_points: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        if not (self.reference.size == self.target.size == self.layer.size == self.reference_mask.size):
            raise ValueError("reference, target, layer and mask must share dimensions")
        if self.alignment_points is not None:
            ref, tgt = self.alignment_points
            if len(ref) != len(tgt) or len(ref) < 4:
                raise ValueError("alignment point sets must have equal lengths of at least 4")


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "desk"
    val_count: int = 200
    test_count: int = 200
    positive_fraction: float = 0.5
    seed: int = 0
    alignment_points: int = 8
    filter: OverlayFilter = field(default_factory=OverlayFilter)
    shift: ShiftSpec = field(default_factory=ShiftSpec)

    def __post_init__(self) -> None:
        if self.val_count < 0 or self.test_count < 0:
            raise ValueError(f"split sizes must be non-negative, got {self.val_count} and {self.test_count}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError(f"positive fraction must be in [0, 1], got {self.positive_fraction}")
        if self.alignment_points < 4:
            raise ValueError(f"at least 4 alignment points are needed, got {self.alignment_points}")

    def count_of(self, split: Split) -> int:
        return self.val_count if split == Split.VAL else self.test_count


# Annotation ingestion


def rasterize_polygon(points: Sequence[Sequence[float]], size: tuple[int, int]) -> Mask:
    """Filled polygon with its outline; vertices are pixel centres."""

    canvas = Image.new("L", size, 0)
    flat = [(float(x), float(y)) for x, y in points]
    if len(flat) >= 2:
        ImageDraw.Draw(canvas).polygon(flat, fill=1, outline=1)
    return Mask(np.asarray(canvas) > 0)


def _instances_from_polygons(
    polygons: Iterable[tuple[int, Sequence[Sequence[float]]]], size: tuple[int, int], source_id: str
) -> tuple[InstanceLabel, ...]:
    instances = []
    for class_id, polygon in polygons:
        mask = rasterize_polygon(polygon, size)
        if mask.is_empty():
            logger.warning("Empty instance", f"{source_id}: a class {class_id} polygon covers no pixel, skipped")
            continue
        instances.append(InstanceLabel.from_mask(int(class_id), mask))
    return tuple(instances)


def _read_frame(path: str) -> Frame:
    with Image.open(path) as image:
        return Frame.from_image(image)


def read_polygon_annotations(path: str) -> AnnotatedImage:
    """Read `{"image", "source_id", "instances": [{"class_id", "polygon"}]}`."""

    try:
        with open(path) as f:
            doc = json.load(f)
        image_path = os.path.join(os.path.dirname(path), doc["image"])
        source_id = str(doc.get("source_id", os.path.splitext(os.path.basename(path))[0]))
        polygons = [(int(i["class_id"]), i["polygon"]) for i in doc["instances"]]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ManifestCorrupt(f"bad annotation file {path}: {e}") from e
    if not os.path.exists(image_path):
        raise MissingFile(f"annotation {path} references missing image {image_path}", path=image_path)
    image = _read_frame(image_path)
    return AnnotatedImage(image, _instances_from_polygons(polygons, image.size, source_id), source_id)


def read_yolo_annotations(image_path: str, label_path: str) -> AnnotatedImage:
    """Read a YOLO segmentation label file (`cls x1 y1 x2 y2 ...`, normalised)."""

    image = _read_frame(image_path)
    width, height = image.size
    polygons = []
    with open(label_path) as f:
        for number, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 7 or len(fields) % 2 == 0:
                raise ManifestCorrupt(f"{label_path}:{number}: expected a class and at least 3 points")
            coords = [float(v) for v in fields[1:]]
            points = [
                (coords[i] * (width - 1), coords[i + 1] * (height - 1)) for i in range(0, len(coords), 2)
            ]
            polygons.append((int(fields[0]), points))
    source_id = os.path.splitext(os.path.basename(image_path))[0]
    return AnnotatedImage(image, _instances_from_polygons(polygons, image.size, source_id), source_id)


def load_sources(directory: str) -> list[AnnotatedImage]:
    """Polygon JSON files in `directory`, or YOLO `images/` + `labels/` subdirectories."""

    if not os.path.isdir(directory):
        raise InsufficientSources(f"sources directory {directory} does not exist")
    jsons = sorted(f for f in os.listdir(directory) if f.endswith(".json"))
    if jsons:
        return [read_polygon_annotations(os.path.join(directory, f)) for f in jsons]
    images_dir, labels_dir = os.path.join(directory, "images"), os.path.join(directory, "labels")
    if os.path.isdir(images_dir) and os.path.isdir(labels_dir):
        sources = []
        for name in sorted(os.listdir(images_dir)):
            stem, ext = os.path.splitext(name)
            label = os.path.join(labels_dir, stem + ".txt")
            if ext.lower() in (".png", ".jpg", ".jpeg") and os.path.exists(label):
                sources.append(read_yolo_annotations(os.path.join(images_dir, name), label))
        return sources
    raise InsufficientSources(f"no annotations found in {directory}")


# Synthetic fixtures


def _gradient_background(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    width, height = size
    start = rng.uniform(60, 200, 3)
    end = rng.uniform(60, 200, 3)
    angle = rng.uniform(0, 2 * math.pi)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ramp = xs * math.cos(angle) + ys * math.sin(angle)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    pixels = start + ramp[..., None] * (end - start)
    pixels += rng.normal(0.0, 2.0, pixels.shape)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def synthesize_sources(
    count: int,
    *,
    class_count: int = 4,
    size: tuple[int, int] = (640, 640),
    seed: int = 0,
    min_side: int = 40,
    max_side: int = 120,
    max_instances: int = 4,
) -> list[AnnotatedImage]:
    """Flat-coloured rectangular "components" on smooth gradient backgrounds.

    Rectangles never overlap and keep a small gap; each class has its own base
    colour with a little per-instance variation.
    """

    rng = np.random.default_rng([seed, 0x5EED])
    palette = rng.integers(0, 256, (class_count, 3))
    width, height = size
    gap = 4
    sources = []
    for index in range(count):
        pixels = _gradient_background(rng, size)
        occupied = np.zeros((height, width), dtype=np.bool_)
        instances = []
        wanted = int(rng.integers(1, max_instances + 1))
        for _ in range(100):
            if len(instances) == wanted:
                break
            w = int(rng.integers(min_side, max_side + 1))
            h = int(rng.integers(min_side, max_side + 1))
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            y0, x0 = max(0, y - gap), max(0, x - gap)
            if occupied[y0 : y + h + gap, x0 : x + w + gap].any():
                continue
            occupied[y : y + h, x : x + w] = True
            class_id = int(rng.integers(0, class_count))
            color = np.clip(palette[class_id] + rng.integers(-12, 13, 3), 0, 255)
            pixels[y : y + h, x : x + w] = color.astype(np.uint8)
            mask = Mask.from_region(width, height, Region(x, y, w, h))
            instances.append(InstanceLabel(class_id, mask, Region(x, y, w, h)))
        sources.append(AnnotatedImage(Frame(pixels), tuple(instances), f"synth_{index:04d}"))
    return sources


def _mask_polygon(instance: InstanceLabel) -> list[list[int]]:
    """Polygon of a rectangular mask; other shapes fall back to the bbox."""

    b = instance.bbox
    return [[b.x, b.y], [b.x + b.w - 1, b.y], [b.x + b.w - 1, b.y + b.h - 1], [b.x, b.y + b.h - 1]]


def write_annotated_images(sources: Sequence[AnnotatedImage], out_dir: str) -> list[str]:
    """Write each source as `<id>.png` plus a polygon JSON `<id>.json`."""

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for source in sources:
        image_name = f"{source.source_id}.png"
        source.image.to_image().save(os.path.join(out_dir, image_name), format="PNG")
        doc = {
            "image": image_name,
            "source_id": source.source_id,
            "instances": [
                {"class_id": i.class_id, "polygon": _mask_polygon(i)} for i in source.instances
            ],
        }
        path = os.path.join(out_dir, f"{source.source_id}.json")
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)
        paths.append(path)
    return paths


# Pair generation


def alignment_grid(size: tuple[int, int], count: int = 8) -> np.ndarray:
    """`count` tag-plane sample points laid out on two rows between 20% and 80%."""

    if count < 4:
        raise ValueError(f"need at least 4 alignment points, got {count}")
    width, height = size
    columns = math.ceil(count / 2)
    xs = np.linspace(0.2, 0.8, columns) * (width - 1)
    ys = np.array([0.2, 0.8]) * (height - 1)
    grid = np.array([(x, y) for y in ys for x in xs], dtype=np.float64)
    return grid[:count]


def _axis_shift(
    rng: np.random.Generator, start: int, side: int, extent: int, shift: ShiftSpec, source_id: str
) -> int:
    minimum = math.ceil(shift.lo * side)
    rooms = {-1: start, 1: extent - (start + side)}
    signs = [sign for sign, room in rooms.items() if room >= minimum]
    if not signs:
        raise UnshiftableInstance(
            f"no in-bounds shift of at least {minimum}px for a {side}px side in {source_id}"
        )
    sign = signs[int(rng.integers(len(signs)))]
    magnitude = int(round(rng.uniform(shift.lo, shift.hi) * side))
    return sign * max(minimum, min(magnitude, rooms[sign]))


def _move(bits: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(bits)
    h, w = bits.shape
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = bits[
        max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)
    ]
    return out


def _draw_shift(
    src: AnnotatedImage, instance: InstanceLabel, shift: ShiftSpec, rng: np.random.Generator
) -> tuple[int, int]:
    box = instance.bbox
    same_class = [i for i in src.instances if i.class_id == instance.class_id]
    for _ in range(MAX_SHIFT_ATTEMPTS):
        dx = _axis_shift(rng, box.x, box.w, src.image.width, shift, src.source_id)
        dy = _axis_shift(rng, box.y, box.h, src.image.height, shift, src.source_id)
        moved = Mask(_move(instance.mask.bits, dx, dy))
        if all(iou(moved, other.mask) <= COLLISION_IOU for other in same_class):
            return dx, dy
    raise UnshiftableInstance(
        f"every shift of a class {instance.class_id} instance in {src.source_id} lands on a same-class instance"
    )


def generate_pair(
    src: AnnotatedImage,
    instance: InstanceLabel,
    polarity: bool,
    filter: OverlayFilter,
    shift: ShiftSpec,
    rng_seed: int,
    *,
    model_id: int = 0,
    step_index: int = 0,
    alignment_points: int | None = 8,
) -> SamplePair:
    """Build one reference/target pair for `instance` of `src`."""

    instance_index = src.index_of(instance)
    rng = np.random.default_rng(rng_seed)
    dx, dy = (0, 0) if polarity else _draw_shift(src, instance, shift, rng)

    ys, xs = np.nonzero(instance.mask.bits)
    filtered = filter.apply(src.image.pixels[ys, xs])
    # The layer is black outside the overlay, so overlay pixels must stay non-zero.
    filtered[~filtered.any(axis=1)] = 1
    layer = np.zeros_like(src.image.pixels)
    layer[ys + dy, xs + dx] = filtered
    reference_bits = _move(instance.mask.bits, dx, dy)
    reference = np.array(src.image.pixels)
    reference[reference_bits] = layer[reference_bits]

    reference_mask = Mask(reference_bits)
    if not polarity and instance.mask.count() == instance.bbox.w * instance.bbox.h:
        assert iou(reference_mask, instance.mask) <= COLLISION_IOU, "rectangle shift overlaps its instance"

    points = None
    if alignment_points is not None:
        grid = alignment_grid(src.image.size, alignment_points)
        points = (grid, grid.copy())
    return SamplePair(
        reference=Frame(reference),
        target=src.image,
        layer=Frame(layer),
        reference_mask=reference_mask,
        step_class=instance.class_id,
        step_index=step_index,
        ground_truth=polarity,
        model_id=model_id,
        instance_index=instance_index,
        shift=(dx, dy),
        alignment_points=points,
    )


def _check_sources(sources: Sequence[AnnotatedImage]) -> None:
    if not sources:
        raise InsufficientSources("no annotated source images")
    empty = [s.source_id for s in sources if not s.instances]
    if empty:
        raise InsufficientSources(f"sources without instances: {', '.join(empty)}")


@dataclass(frozen=True)
class _Plan:
    index: int
    model_id: int
    instance_index: int
    polarity: bool
    seed: int


def _plan(sources: Sequence[AnnotatedImage], count: int, split: Split, config: DatasetConfig) -> list[_Plan]:
    """Stratified round-robin over classes with a shuffled, balanced polarity list."""

    root = np.random.SeedSequence([config.seed, SPLIT_STREAMS[split.value]])
    rng = np.random.default_rng(root)
    by_class: dict[int, list[tuple[int, int]]] = {}
    for model_id, source in enumerate(sources):
        for instance_index, instance in enumerate(source.instances):
            by_class.setdefault(instance.class_id, []).append((model_id, instance_index))
    classes = sorted(by_class)
    queues = {c: [] for c in classes}
    positives = int(round(count * config.positive_fraction))
    polarities = np.array([True] * positives + [False] * (count - positives))
    rng.shuffle(polarities)
    seeds = root.spawn(count)
    plans = []
    for index in range(count):
        class_id = classes[index % len(classes)]
        if not queues[class_id]:
            order = rng.permutation(len(by_class[class_id]))
            queues[class_id] = [by_class[class_id][i] for i in order]
        model_id, instance_index = queues[class_id].pop(0)
        seed = int(seeds[index].generate_state(1)[0])
        plans.append(_Plan(index, model_id, instance_index, bool(polarities[index]), seed))
    return plans


def generate_samples(
    sources: Sequence[AnnotatedImage], count: int, split: Split, config: DatasetConfig
) -> list[SamplePair]:
    """In-memory pairs for one split; a pure function of its arguments."""

    _check_sources(sources)
    return [_generate(sources, plan, config) for plan in _plan(sources, count, split, config)]


def _generate(sources: Sequence[AnnotatedImage], plan: _Plan, config: DatasetConfig) -> SamplePair:
    source = sources[plan.model_id]
    return generate_pair(
        source,
        source.instances[plan.instance_index],
        plan.polarity,
        config.filter,
        config.shift,
        plan.seed,
        model_id=plan.model_id,
        step_index=plan.index,
        alignment_points=config.alignment_points,
    )


# Manifests


@dataclass(frozen=True)
class FileRef:
    path: str
    crc32: int

    def to_json(self) -> dict:
        return {"path": self.path, "crc32": self.crc32}


@dataclass(frozen=True)
class InstanceRecord:
    class_id: int
    bbox: tuple[int, int, int, int]
    mask: FileRef


@dataclass(frozen=True)
class SourceRecord:
    model_id: int
    source_id: str
    image: FileRef
    width: int
    height: int
    instances: tuple[InstanceRecord, ...]


@dataclass(frozen=True)
class SampleRecord:
    index: int
    model_id: int
    instance_index: int
    step_class: int
    step_index: int
    ground_truth: bool
    shift: tuple[int, int]
    reference: FileRef
    layer: FileRef
    target: FileRef
    reference_mask: FileRef
    alignment_points: tuple[tuple[tuple[float, float], ...], tuple[tuple[float, float], ...]] | None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: Split
    seed: int
    class_count: int
    positive_fraction: float
    sources: tuple[SourceRecord, ...]
    samples: tuple[SampleRecord, ...]
    root: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def resolve(self, ref: FileRef) -> str:
        return os.path.join(self.root, ref.path)

    def load_pair(self, index: int) -> SamplePair:
        record = self.samples[index]
        points = None
        if record.alignment_points is not None:
            points = tuple(np.asarray(p, dtype=np.float64) for p in record.alignment_points)
        return SamplePair(
            reference=_read_frame(self.resolve(record.reference)),
            target=_read_frame(self.resolve(record.target)),
            layer=_read_frame(self.resolve(record.layer)),
            reference_mask=_read_mask(self.resolve(record.reference_mask)),
            step_class=record.step_class,
            step_index=record.step_index,
            ground_truth=record.ground_truth,
            model_id=record.model_id,
            instance_index=record.instance_index,
            shift=record.shift,
            alignment_points=points,  # type: ignore[arg-type]
        )

    def pairs(self) -> Iterable[SamplePair]:
        for index in range(len(self.samples)):
            yield self.load_pair(index)

    def ground_truth(self) -> dict[int, list[InstanceLabel]]:
        """Instance labels per `model_id`, read from the source mask files."""

        labels = {}
        for source in self.sources:
            labels[source.model_id] = [
                InstanceLabel.from_mask(i.class_id, _read_mask(self.resolve(i.mask))) for i in source.instances
            ]
        return labels

    def source_images(self) -> dict[int, Frame]:
        return {s.model_id: _read_frame(self.resolve(s.image)) for s in self.sources}

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "split": self.split.value,
            "seed": self.seed,
            "class_count": self.class_count,
            "positive_fraction": self.positive_fraction,
            "sources": [
                {
                    "model_id": s.model_id,
                    "source_id": s.source_id,
                    "image": s.image.to_json(),
                    "width": s.width,
                    "height": s.height,
                    "instances": [
                        {"class_id": i.class_id, "bbox": list(i.bbox), "mask": i.mask.to_json()}
                        for i in s.instances
                    ],
                }
                for s in self.sources
            ],
            "samples": [
                {
                    "index": r.index,
                    "model_id": r.model_id,
                    "instance_index": r.instance_index,
                    "step_class": r.step_class,
                    "step_index": r.step_index,
                    "ground_truth": r.ground_truth,
                    "shift": list(r.shift),
                    "reference": r.reference.to_json(),
                    "layer": r.layer.to_json(),
                    "target": r.target.to_json(),
                    "reference_mask": r.reference_mask.to_json(),
                    "alignment_points": None
                    if r.alignment_points is None
                    else {"reference": [list(p) for p in r.alignment_points[0]], "target": [list(p) for p in r.alignment_points[1]]},
                }
                for r in self.samples
            ],
        }


def _read_mask(path: str) -> Mask:
    with Image.open(path) as image:
        return Mask.from_image(image)


def _write_bytes(root: str, relative: str, data: bytes) -> FileRef:
    path = os.path.join(root, relative)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    return FileRef(relative.replace(os.sep, "/"), zlib.crc32(data))


def _png(frame: Frame) -> bytes:
    return encode(frame, CodecSpec.lossless())


def _mask_png(mask: Mask) -> bytes:
    buffer = io.BytesIO()
    mask.to_image().save(buffer, format="PNG")
    return buffer.getvalue()


def _write_sources(sources: Sequence[AnnotatedImage], out_dir: str) -> tuple[SourceRecord, ...]:
    records = []
    for model_id, source in enumerate(sources):
        image = _write_bytes(out_dir, f"sources/src_{model_id:04d}.png", _png(source.image))
        instances = tuple(
            InstanceRecord(
                i.class_id,
                i.bbox.as_tuple(),
                _write_bytes(out_dir, f"sources/src_{model_id:04d}_inst_{k:02d}.png", _mask_png(i.mask)),
            )
            for k, i in enumerate(source.instances)
        )
        records.append(SourceRecord(model_id, source.source_id, image, source.image.width, source.image.height, instances))
    return tuple(records)


def _points_tuple(points: tuple[np.ndarray, np.ndarray] | None):
    if points is None:
        return None
    return tuple(tuple((float(x), float(y)) for x, y in p) for p in points)


def _write_sample(
    sources: Sequence[AnnotatedImage],
    source_records: Sequence[SourceRecord],
    plan: _Plan,
    split: Split,
    config: DatasetConfig,
    out_dir: str,
) -> SampleRecord:
    pair = _generate(sources, plan, config)
    stem = f"{split.value}/{plan.index:04d}"
    return SampleRecord(
        index=plan.index,
        model_id=pair.model_id,
        instance_index=pair.instance_index,
        step_class=pair.step_class,
        step_index=pair.step_index,
        ground_truth=pair.ground_truth,
        shift=pair.shift,
        reference=_write_bytes(out_dir, f"{stem}_reference.png", _png(pair.reference)),
        layer=_write_bytes(out_dir, f"{stem}_layer.png", _png(pair.layer)),
        target=source_records[pair.model_id].image,
        reference_mask=_write_bytes(out_dir, f"{stem}_mask.png", _mask_png(pair.reference_mask)),
        alignment_points=_points_tuple(pair.alignment_points),
    )


def build_dataset(
    sources: Sequence[AnnotatedImage],
    config: DatasetConfig,
    out_dir: str,
    *,
    jobs: int = 1,
    progress: bool = False,
) -> dict[Split, DatasetManifest]:
    """Generate and write the val and test splits; returns the saved manifests."""

    _check_sources(sources)
    os.makedirs(out_dir, exist_ok=True)
    total = config.val_count + config.test_count
    class_count = len({i.class_id for s in sources for i in s.instances})
    source_records = _write_sources(sources, out_dir) if total > 0 else ()
    manifests = {}
    for split in Split:
        plans = _plan(sources, config.count_of(split), split, config)
        logger.info("Building split", f"{config.name}/{split.value}: {len(plans)} samples, {jobs} jobs")
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            futures = pool.map(
                lambda plan: _write_sample(sources, source_records, plan, split, config, out_dir), plans
            )
            records = tuple(track(futures, f"{split.value} pairs", total=len(plans), enabled=progress))
        manifest = DatasetManifest(
            name=config.name,
            split=split,
            seed=config.seed,
            class_count=class_count,
            positive_fraction=config.positive_fraction,
            sources=source_records if records else (),
            samples=records,
            root=os.path.abspath(out_dir),
        )
        save_manifest(manifest, os.path.join(out_dir, f"{split.value}.json"))
        manifests[split] = manifest
    return manifests


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest.to_json(), f, indent=1)


def _file_ref(doc: dict) -> FileRef:
    return FileRef(str(doc["path"]), int(doc["crc32"]))


def _parse_manifest(doc: dict, root: str) -> DatasetManifest:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ManifestCorrupt(f"unsupported schema version {doc.get('schema_version')!r}")
    sources = tuple(
        SourceRecord(
            model_id=int(s["model_id"]),
            source_id=str(s["source_id"]),
            image=_file_ref(s["image"]),
            width=int(s["width"]),
            height=int(s["height"]),
            instances=tuple(
                InstanceRecord(int(i["class_id"]), tuple(int(v) for v in i["bbox"]), _file_ref(i["mask"]))  # type: ignore[arg-type]
                for i in s["instances"]
            ),
        )
        for s in doc["sources"]
    )
    samples = []
    for r in doc["samples"]:
        points = r.get("alignment_points")
        samples.append(
            SampleRecord(
                index=int(r["index"]),
                model_id=int(r["model_id"]),
                instance_index=int(r["instance_index"]),
                step_class=int(r["step_class"]),
                step_index=int(r["step_index"]),
                ground_truth=bool(r["ground_truth"]),
                shift=(int(r["shift"][0]), int(r["shift"][1])),
                reference=_file_ref(r["reference"]),
                layer=_file_ref(r["layer"]),
                target=_file_ref(r["target"]),
                reference_mask=_file_ref(r["reference_mask"]),
                alignment_points=None
                if points is None
                else (
                    tuple((float(x), float(y)) for x, y in points["reference"]),
                    tuple((float(x), float(y)) for x, y in points["target"]),
                ),
            )
        )
    return DatasetManifest(
        name=str(doc["name"]),
        split=Split(doc["split"]),
        seed=int(doc["seed"]),
        class_count=int(doc["class_count"]),
        positive_fraction=float(doc["positive_fraction"]),
        sources=sources,
        samples=tuple(samples),
        root=root,
    )


def _verify_file(manifest: DatasetManifest, ref: FileRef, size: tuple[int, int], sample: int | None) -> None:
    path = manifest.resolve(ref)
    where = f"sample {sample}" if sample is not None else "source"
    if not os.path.exists(path):
        raise MissingFile(f"{where}: {ref.path} is missing", sample=sample, path=path)
    with open(path, "rb") as f:
        data = f.read()
    if zlib.crc32(data) != ref.crc32:
        raise ChecksumMismatch(f"{where}: {ref.path} does not match its recorded CRC-32", sample=sample, path=path)
    try:
        with Image.open(io.BytesIO(data)) as image:
            actual = image.size
    except OSError as e:
        raise ManifestCorrupt(f"{where}: {ref.path} is not an image: {e}") from e
    if actual != size:
        raise ManifestCorrupt(f"{where}: {ref.path} is {actual[0]}x{actual[1]}, expected {size[0]}x{size[1]}")


def load_manifest(path: str) -> DatasetManifest:
    """Parse a manifest and check every referenced file's presence, checksum and size."""

    try:
        with open(path) as f:
            doc = json.load(f)
        manifest = _parse_manifest(doc, os.path.dirname(os.path.abspath(path)))
    except FileNotFoundError:
        raise MissingFile(f"manifest {path} does not exist", path=path) from None
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise ManifestCorrupt(f"malformed manifest {path}: {e}") from e
    sizes = {}
    for source in manifest.sources:
        size = (source.width, source.height)
        sizes[source.model_id] = size
        _verify_file(manifest, source.image, size, None)
        for instance in source.instances:
            _verify_file(manifest, instance.mask, size, None)
    for record in manifest.samples:
        if record.model_id not in sizes:
            raise ManifestCorrupt(f"sample {record.index} references unknown model {record.model_id}")
        size = sizes[record.model_id]
        for ref in (record.reference, record.layer, record.target, record.reference_mask):
            _verify_file(manifest, ref, size, record.index)
    return manifest
