"""Raster primitives: frames, masks, crop/scale, the binary layer filter and the codec.

Frames are RGB8 rasters stored as read-only `uint8` arrays of shape `(h, w, 3)`,
row-major with a top-left origin. Masks are read-only `bool` arrays of shape
`(h, w)`. Both are immutable, so every operation here is a pure function.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from PIL import Image

from .errors import CorruptStream, InvalidAlpha, InvalidFrame, RegionOutOfBounds

__all__ = [
    "Frame",
    "Mask",
    "Region",
    "CodecKind",
    "CodecSpec",
    "crop",
    "crop_mask",
    "scale",
    "scale_layer",
    "scale_mask",
    "scaled_size",
    "binary_filter",
    "centered_region",
    "encode",
    "decode",
]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
JPEG_SIGNATURE = b"\xff\xd8\xff"
PNG_COMPRESS_LEVEL = 3


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Frame:
    """An RGB8 raster."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidFrame(f"expected an (h, w, 3) array, got shape {pixels.shape}")
        if pixels.dtype != np.uint8:
            raise InvalidFrame(f"expected uint8 pixels, got {pixels.dtype}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise InvalidFrame(f"frame must be at least 1x1, got {pixels.shape[1]}x{pixels.shape[0]}")
        object.__setattr__(self, "pixels", _readonly(pixels))

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Frame({self.width}x{self.height})"

    @classmethod
    def blank(cls, width: int, height: int, color: tuple[int, int, int] = (0, 0, 0)) -> Frame:
        pixels = np.empty((height, width, 3), dtype=np.uint8)
        pixels[:] = color
        return cls(pixels)

    @classmethod
    def from_rgb_bytes(cls, width: int, height: int, data: bytes) -> Frame:
        if len(data) != width * height * 3:
            raise InvalidFrame(f"{len(data)} bytes do not make a {width}x{height} RGB8 frame")
        return cls(np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3))

    def to_rgb_bytes(self) -> bytes:
        return self.pixels.tobytes()

    def to_image(self) -> Image.Image:
        return Image.fromarray(np.ascontiguousarray(self.pixels))

    @classmethod
    def from_image(cls, image: Image.Image) -> Frame:
        return cls(np.asarray(image.convert("RGB"), dtype=np.uint8))


@dataclass(frozen=True, eq=False)
class Mask:
    """A binary raster."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise InvalidFrame(f"expected a non-empty (h, w) array, got shape {bits.shape}")
        if bits.dtype != np.bool_:
            if not np.isin(bits, (0, 1)).all():
                raise InvalidFrame("mask elements must be 0 or 1")
            bits = bits.astype(np.bool_)
        object.__setattr__(self, "bits", _readonly(bits))

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()

    def bbox(self) -> Region | None:
        """The tight bounding box of the set bits, or None for an empty mask."""

        ys = np.flatnonzero(self.bits.any(axis=1))
        xs = np.flatnonzero(self.bits.any(axis=0))
        if len(xs) == 0:
            return None
        return Region(int(xs[0]), int(ys[0]), int(xs[-1] - xs[0] + 1), int(ys[-1] - ys[0] + 1))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Mask({self.width}x{self.height}, {self.count()} set)"

    @classmethod
    def empty(cls, width: int, height: int) -> Mask:
        return cls(np.zeros((height, width), dtype=np.bool_))

    @classmethod
    def from_region(cls, width: int, height: int, region: Region) -> Mask:
        bits = np.zeros((height, width), dtype=np.bool_)
        bits[region.y : region.y + region.h, region.x : region.x + region.w] = True
        return cls(bits)

    def to_image(self) -> Image.Image:
        """Single-channel 0/255 image, the mask exchange format."""

        return Image.fromarray(np.where(self.bits, 255, 0).astype(np.uint8))

    @classmethod
    def from_image(cls, image: Image.Image) -> Mask:
        return cls(np.asarray(image.convert("L")) > 127)


@dataclass(frozen=True)
class Region:
    """An axis-aligned pixel rectangle `(x, y, w, h)`."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w < 1 or self.h < 1:
            raise RegionOutOfBounds(f"region {self} must be at least 1x1")
        if self.x < 0 or self.y < 0:
            raise RegionOutOfBounds(f"region {self} has a negative origin")

    def fits(self, width: int, height: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def compose(self, inner: Region) -> Region:
        """The region of `inner` (relative to this one) in this region's parent."""

        return Region(self.x + inner.x, self.y + inner.y, inner.w, inner.h)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.w, self.h

    @classmethod
    def full(cls, width: int, height: int) -> Region:
        return cls(0, 0, width, height)


class CodecKind(Enum):
    LOSSLESS = "lossless"
    LOSSY = "lossy"


@dataclass(frozen=True)
class CodecSpec:
    """Lossless (PNG) or Lossy (JPEG with a 1-100 quality)."""

    kind: CodecKind
    quality: int | None = None

    def __post_init__(self) -> None:
        if self.kind == CodecKind.LOSSY:
            if self.quality is None or not 1 <= self.quality <= 100:
                raise ValueError(f"lossy quality must be in 1..100, got {self.quality}")
        elif self.quality is not None:
            raise ValueError("lossless codec takes no quality")

    @classmethod
    def lossless(cls) -> CodecSpec:
        return cls(CodecKind.LOSSLESS)

    @classmethod
    def lossy(cls, quality: int) -> CodecSpec:
        return cls(CodecKind.LOSSY, quality)

    @classmethod
    def parse(cls, text: str) -> CodecSpec:
        """`"lossless"`, `"png"`, `"lossy:80"` or `"jpeg:80"`."""

        name, _, quality = text.strip().lower().partition(":")
        if name in ("lossless", "png"):
            if quality:
                raise ValueError(f"lossless codec takes no quality: {text!r}")
            return cls.lossless()
        if name in ("lossy", "jpeg", "jpg"):
            return cls.lossy(int(quality) if quality else 80)
        raise ValueError(f"unknown codec {text!r}")

    @property
    def wire_code(self) -> int:
        """0 for Lossless, the quality for Lossy."""

        return 0 if self.kind == CodecKind.LOSSLESS else int(self.quality or 0)

    @classmethod
    def from_wire_code(cls, code: int) -> CodecSpec:
        return cls.lossless() if code == 0 else cls.lossy(code)

    def __str__(self) -> str:
        return "lossless" if self.kind == CodecKind.LOSSLESS else f"lossy:{self.quality}"


def crop(frame: Frame, region: Region) -> Frame:
    if not region.fits(frame.width, frame.height):
        raise RegionOutOfBounds(f"region {region.as_tuple()} exceeds a {frame.width}x{frame.height} frame")
    if region == Region.full(frame.width, frame.height):
        return frame
    return Frame(frame.pixels[region.y : region.y + region.h, region.x : region.x + region.w])


def crop_mask(mask: Mask, region: Region) -> Mask:
    if not region.fits(mask.width, mask.height):
        raise RegionOutOfBounds(f"region {region.as_tuple()} exceeds a {mask.width}x{mask.height} mask")
    if region == Region.full(mask.width, mask.height):
        return mask
    return Mask(mask.bits[region.y : region.y + region.h, region.x : region.x + region.w])


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha <= 1.0) or math.isnan(alpha):
        raise InvalidAlpha(f"alpha must be in (0, 1], got {alpha}")


def scaled_size(width: int, height: int, alpha: float) -> tuple[int, int]:
    """`floor(alpha * side)` per axis with a minimum of 1."""

    _check_alpha(alpha)
    # The epsilon keeps products like 0.29 * 100 from flooring one pixel short.
    return (
        max(1, math.floor(alpha * width + 1e-9)),
        max(1, math.floor(alpha * height + 1e-9)),
    )


def scale(frame: Frame, alpha: float) -> Frame:
    """Downscale by `alpha` in (0, 1] with bilinear resampling."""

    size = scaled_size(frame.width, frame.height, alpha)
    if size == frame.size:
        return frame
    return Frame.from_image(frame.to_image().resize(size, Image.Resampling.BILINEAR))


def scale_layer(layer: Frame, alpha: float) -> Frame:
    """Downscale a virtual layer with nearest neighbour.

    Bilinear blending would leak non-zero values into black background pixels,
    so the layer keeps the same sampling grid as :func:`scale_mask`.
    """

    size = scaled_size(layer.width, layer.height, alpha)
    if size == layer.size:
        return layer
    return Frame.from_image(layer.to_image().resize(size, Image.Resampling.NEAREST))


def scale_mask(mask: Mask, size: tuple[int, int]) -> Mask:
    """Resample a mask to `size` with nearest neighbour so it stays binary."""

    if size == mask.size:
        return mask
    resized = mask.to_image().resize(size, Image.Resampling.NEAREST)
    return Mask.from_image(resized)


def binary_filter(layer: Frame) -> Mask:
    """Set exactly the pixels where any channel is non-zero."""

    return Mask(layer.pixels.any(axis=2))


def centered_region(mask: Mask, crop_size: tuple[int, int]) -> Region:
    """A `crop_size` window centred on the mask's bbox, shifted to stay in bounds.

    An empty mask centres the window on the frame.
    """

    cw, ch = min(crop_size[0], mask.width), min(crop_size[1], mask.height)
    box = mask.bbox()
    if box is None:
        cx, cy = mask.width / 2, mask.height / 2
    else:
        cx, cy = box.x + box.w / 2, box.y + box.h / 2
    x = int(round(cx - cw / 2))
    y = int(round(cy - ch / 2))
    x = min(max(x, 0), mask.width - cw)
    y = min(max(y, 0), mask.height - ch)
    return Region(x, y, cw, ch)


def encode(frame: Frame, codec: CodecSpec) -> bytes:
    buffer = io.BytesIO()
    image = frame.to_image()
    match codec.kind:
        case CodecKind.LOSSLESS:
            image.save(buffer, format="PNG", compress_level=PNG_COMPRESS_LEVEL)
        case CodecKind.LOSSY:
            image.save(buffer, format="JPEG", quality=codec.quality)
    return buffer.getvalue()


def decode(data: bytes) -> Frame:
    """Decode a PNG or JPEG stream produced by :func:`encode`."""

    if not (data.startswith(PNG_SIGNATURE) or data.startswith(JPEG_SIGNATURE)):
        raise CorruptStream("stream is neither PNG nor JPEG")
    try:
        with Image.open(io.BytesIO(data)) as image:
            image.load()
            return Frame.from_image(image)
    except (OSError, SyntaxError, ValueError, Image.DecompressionBombError) as e:
        raise CorruptStream(f"cannot decode frame: {e}") from e
