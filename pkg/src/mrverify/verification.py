"""The IoU threshold policy and the image-similarity baselines it is compared with.

A step passes when the best candidate mask overlaps the reference mask with an
IoU strictly greater than the policy threshold. The baselines score a
reference/target frame pair directly: PSNR, SSIM, NRMSE and NCC on pixels, and
cosine similarity on class embeddings produced by an :class:`Embedder`.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import tempfile
from dataclasses import dataclass
from enum import Enum
from threading import Lock
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyReferenceMask,
    EmptyUnion,
    FrameTooSmall,
    SegmenterFailure,
    ZeroVariance,
    ZeroVector,
)
from .imaging import Frame, Mask
from .segmentation import SegmentationOutput

__all__ = [
    "VerificationPolicy",
    "VerificationDecision",
    "BaselineMetric",
    "BaselineScore",
    "iou",
    "verify",
    "psnr",
    "ssim",
    "nrmse",
    "ncc",
    "embedding_cosine",
    "baseline_score",
    "Embedder",
    "StubEmbedder",
    "ExternalEmbedder",
]

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 255.0
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class VerificationPolicy:
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0 or math.isnan(self.threshold):
            raise ValueError(f"IoU threshold must be in [0, 1], got {self.threshold}")


@dataclass(frozen=True)
class VerificationDecision:
    iou: float
    passed: bool
    chosen_index: int | None
    candidate_count: int
    threshold: float

    @property
    def iou_micro(self) -> int:
        """IoU in millionths, the unit carried on the wire."""

        return int(round(self.iou * 1_000_000))

    def to_dict(self) -> dict:
        return {
            "iou": self.iou,
            "iou_micro": self.iou_micro,
            "passed": self.passed,
            "chosen_index": self.chosen_index,
            "candidate_count": self.candidate_count,
            "threshold": self.threshold,
        }


class BaselineMetric(Enum):
    PSNR = "psnr"
    SSIM = "ssim"
    NRMSE = "nrmse"
    NCC = "ncc"
    EMBEDDING_COSINE = "cosine"


@dataclass(frozen=True)
class BaselineScore:
    metric: BaselineMetric
    value: float

    @property
    def detection_score(self) -> float:
        """Larger means more similar for every metric, so NRMSE is negated."""

        return -self.value if self.metric == BaselineMetric.NRMSE else self.value


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def iou(a: Mask, b: Mask) -> float:
    _check_same_shape(a.bits, b.bits)
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        raise EmptyUnion("both masks are empty")
    return float(np.count_nonzero(a.bits & b.bits)) / float(union)


def verify(reference: Mask, candidates: SegmentationOutput, policy: VerificationPolicy) -> VerificationDecision:
    """Pick the candidate with maximal IoU (lowest index on ties) and apply the threshold."""

    if reference.is_empty():
        raise EmptyReferenceMask("reference mask is empty")
    scores = [iou(reference, c.mask) for c in candidates.candidates]
    if not scores:
        return VerificationDecision(0.0, False, None, 0, policy.threshold)
    chosen = int(np.argmax(scores))
    best = scores[chosen]
    return VerificationDecision(best, best > policy.threshold, chosen, len(scores), policy.threshold)


def _pixels(x: Frame | np.ndarray) -> np.ndarray:
    return (x.pixels if isinstance(x, Frame) else np.asarray(x)).astype(np.float64)


def _luma(x: Frame | np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB frame; 2-D arrays are taken as luma already."""

    pixels = _pixels(x)
    return pixels @ LUMA if pixels.ndim == 3 else pixels


def psnr(a: Frame, b: Frame) -> float:
    """Peak signal-to-noise ratio in dB; `inf` for identical frames."""

    pa, pb = _pixels(a), _pixels(b)
    _check_same_shape(pa, pb)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DYNAMIC_RANGE**2 / mse)


def _box_means(x: np.ndarray, k: int) -> np.ndarray:
    """Means of every fully contained k x k window, via an integral image."""

    integral = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    integral[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    sums = integral[k:, k:] - integral[:-k, k:] - integral[k:, :-k] + integral[:-k, :-k]
    return sums / (k * k)


def ssim(a: Frame | np.ndarray, b: Frame | np.ndarray) -> float:
    """Mean structural similarity on luma over 8x8 uniform windows."""

    la, lb = _luma(a), _luma(b)
    _check_same_shape(la, lb)
    if min(la.shape) < SSIM_WINDOW:
        raise FrameTooSmall(f"SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {la.shape[1]}x{la.shape[0]}")
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
    mu_a = _box_means(la, SSIM_WINDOW)
    mu_b = _box_means(lb, SSIM_WINDOW)
    var_a = np.maximum(_box_means(la * la, SSIM_WINDOW) - mu_a**2, 0.0)
    var_b = np.maximum(_box_means(lb * lb, SSIM_WINDOW) - mu_b**2, 0.0)
    cov = _box_means(la * lb, SSIM_WINDOW) - mu_a * mu_b
    local = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(np.clip(local.mean(), -1.0, 1.0))


def nrmse(a: Frame, b: Frame) -> float:
    pa, pb = _pixels(a), _pixels(b)
    _check_same_shape(pa, pb)
    return math.sqrt(float(np.mean((pa - pb) ** 2))) / DYNAMIC_RANGE


def ncc(a: Frame | np.ndarray, b: Frame | np.ndarray) -> float:
    """Pearson correlation of the two luma rasters.

    One constant input gives 0; two constant inputs raise :class:`ZeroVariance`.
    """

    la, lb = _luma(a), _luma(b)
    _check_same_shape(la, lb)
    za = la.ravel() - la.mean()
    zb = lb.ravel() - lb.mean()
    na, nb = float(np.linalg.norm(za)), float(np.linalg.norm(zb))
    if na == 0.0 and nb == 0.0:
        raise ZeroVariance("both frames are constant")
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(za, zb) / (na * nb), -1.0, 1.0))


def embedding_cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    va = np.asarray(a, dtype=np.float64).ravel()
    vb = np.asarray(b, dtype=np.float64).ravel()
    if va.shape != vb.shape or va.size == 0:
        raise DimensionMismatch(f"embedding lengths differ or are empty: {va.size} vs {vb.size}")
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


class Embedder(Protocol):
    def embed(self, frame: Frame) -> np.ndarray: ...


class StubEmbedder:
    """A 4x4x4 RGB histogram, L2-normalised. Stands in for a classifier's class scores."""

    BINS = 4

    def embed(self, frame: Frame) -> np.ndarray:
        quantised = (frame.pixels.astype(np.intp) * self.BINS) // 256
        codes = (quantised[..., 0] * self.BINS + quantised[..., 1]) * self.BINS + quantised[..., 2]
        histogram = np.bincount(codes.ravel(), minlength=self.BINS**3).astype(np.float64)
        return histogram / np.linalg.norm(histogram)


class ExternalEmbedder:
    """Runs `command FRAME_PNG` and parses a JSON list of floats from its stdout."""

    def __init__(self, command: Sequence[str], *, timeout: float | None = 30.0):
        if not command:
            raise ValueError("external embedder command is empty")
        self.command = list(command)
        self.timeout = timeout
        self.__lock = Lock()

    def embed(self, frame: Frame) -> np.ndarray:
        with self.__lock, tempfile.TemporaryDirectory(prefix="mrverify-emb-") as workdir:
            path = os.path.join(workdir, "frame.png")
            frame.to_image().save(path, format="PNG")
            try:
                result = subprocess.run(
                    [*self.command, path], capture_output=True, text=True, timeout=self.timeout
                )
            except (OSError, subprocess.TimeoutExpired) as e:
                raise SegmenterFailure(f"cannot run {self.command[0]}: {e}") from e
            if result.returncode != 0:
                raise SegmenterFailure(f"{self.command[0]} exited with {result.returncode}: {result.stderr.strip()}")
            try:
                vector = np.asarray(json.loads(result.stdout), dtype=np.float64)
            except (ValueError, TypeError) as e:
                raise SegmenterFailure(f"embedder output is not a JSON vector: {e}") from e
            return vector.ravel()


def baseline_score(
    metric: BaselineMetric, reference: Frame, target: Frame, *, embedder: Embedder | None = None
) -> BaselineScore:
    match metric:
        case BaselineMetric.PSNR:
            value = psnr(reference, target)
        case BaselineMetric.SSIM:
            value = ssim(reference, target)
        case BaselineMetric.NRMSE:
            value = nrmse(reference, target)
        case BaselineMetric.NCC:
            value = ncc(reference, target)
        case BaselineMetric.EMBEDDING_COSINE:
            if embedder is None:
                raise ValueError("cosine scoring needs an embedder")
            value = embedding_cosine(embedder.embed(reference), embedder.embed(target))
    return BaselineScore(metric, value)
