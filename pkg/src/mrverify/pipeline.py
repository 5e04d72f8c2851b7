"""The client and server halves of one verification step.

:class:`Preprocessor` is what the client does to a captured pair before upload
(crop, downscale, map the alignment points, encode). :class:`PairVerifier` is
what the edge server does with the decoded frames (reference mask, alignment,
segmentation, threshold policy). The network server and the offline evaluator
both go through these two classes, so their decisions are identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Homography, alignment_homography, warp_frame
from .imaging import CodecSpec, Frame, Region, crop, decode, encode, scale, scale_layer, scaled_size
from .errors import DimensionMismatch
from .segmentation import FrameKey, FrameView, Segmenter, extract_reference_mask, segment
from .verification import VerificationDecision, VerificationPolicy, verify

__all__ = ["Preprocessor", "EncodedFrame", "ServerTimings", "PairVerifier", "quantize_points"]


def quantize_points(points: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """Round-trip through float32, the precision alignment points have on the wire."""

    return np.asarray(points, dtype=np.float32).reshape(-1, 2).astype(np.float64)


@dataclass(frozen=True)
class EncodedFrame:
    payload: bytes
    points: np.ndarray | None
    size: tuple[int, int]
    preproc_ms: float
    encode_ms: float


@dataclass(frozen=True)
class Preprocessor:
    """Client-side preparation of reference layers and target frames.

    Layers always travel losslessly; `codec` applies to target frames.
    """

    alpha: float = 0.5
    codec: CodecSpec = field(default_factory=CodecSpec.lossless)
    crop: Region | None = None

    def region_for(self, frame: Frame) -> Region:
        return self.crop if self.crop is not None else Region.full(frame.width, frame.height)

    def uploaded_size(self, frame: Frame) -> tuple[int, int]:
        region = self.region_for(frame)
        return scaled_size(region.w, region.h, self.alpha)

    def prepare_target(self, frame: Frame) -> Frame:
        return scale(crop(frame, self.region_for(frame)), self.alpha)

    def prepare_layer(self, layer: Frame) -> Frame:
        return scale_layer(crop(layer, self.region_for(layer)), self.alpha)

    def map_points(self, points: np.ndarray | None, frame: Frame) -> np.ndarray | None:
        """Source-pixel points to uploaded-frame pixels, at wire precision."""

        if points is None:
            return None
        region = self.region_for(frame)
        width, height = self.uploaded_size(frame)
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        mapped = (p - [region.x, region.y]) * [width / region.w, height / region.h]
        return quantize_points(mapped)

    def encode_layer(self, layer: Frame, points: np.ndarray | None = None) -> EncodedFrame:
        return self._encode(layer, points, self.prepare_layer, CodecSpec.lossless())

    def encode_target(self, target: Frame, points: np.ndarray | None = None) -> EncodedFrame:
        return self._encode(target, points, self.prepare_target, self.codec)

    def _encode(self, frame: Frame, points, prepare, codec: CodecSpec) -> EncodedFrame:
        t0 = time.perf_counter()
        prepared = prepare(frame)
        mapped = self.map_points(points, frame)
        t1 = time.perf_counter()
        payload = encode(prepared, codec)
        t2 = time.perf_counter()
        return EncodedFrame(payload, mapped, prepared.size, (t1 - t0) * 1e3, (t2 - t1) * 1e3)


@dataclass(frozen=True)
class ServerTimings:
    decode_ms: float = 0.0
    postproc_ms: float = 0.0


class PairVerifier:
    """Server-side verification of one decoded reference layer / target pair.

    Args:
        segmenter: Shared, read-only segmenter.
        policy: IoU threshold policy.
        crop: The crop region clients apply, so the oracle can project its
            ground truth into the uploaded frame geometry.
    """

    def __init__(self, segmenter: Segmenter, policy: VerificationPolicy, crop: Region | None = None):
        self.segmenter = segmenter
        self.policy = policy
        self.crop = crop

    def verify(
        self,
        key: FrameKey,
        step_class: int,
        layer: Frame,
        target: Frame,
        ref_points: np.ndarray | None = None,
        tgt_points: np.ndarray | None = None,
    ) -> VerificationDecision:
        if layer.size != target.size:
            raise DimensionMismatch(f"layer is {layer.size} but target is {target.size}")
        reference_mask = extract_reference_mask(layer)
        homography: Homography | None = None
        aligned = target
        if ref_points is not None and tgt_points is not None and len(ref_points) > 0:
            h = alignment_homography(ref_points, tgt_points)
            if not h.is_identity():
                homography = h
                aligned = warp_frame(target, h, layer.size)
        view = FrameView(region=self.crop, size=layer.size, homography=homography)
        output = segment(key, step_class, self.segmenter, frame=aligned, view=view)
        return verify(reference_mask, output, self.policy)

    def verify_encoded(
        self,
        key: FrameKey,
        step_class: int,
        layer_payload: bytes,
        target_payload: bytes,
        ref_points: np.ndarray | None = None,
        tgt_points: np.ndarray | None = None,
    ) -> tuple[VerificationDecision, ServerTimings]:
        """Decode and verify, timed the way the edge server times a step.

        The layer arrives with the reference and is decoded ahead of the
        target, so `decode_ms` covers the target decode only.
        """

        layer = decode(layer_payload)
        t0 = time.perf_counter()
        target = decode(target_payload)
        t1 = time.perf_counter()
        decision = self.verify(key, step_class, layer, target, ref_points, tgt_points)
        t2 = time.perf_counter()
        return decision, ServerTimings((t1 - t0) * 1e3, (t2 - t1) * 1e3)
