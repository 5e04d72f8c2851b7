"""Offline evaluation of a manifest: score every sample, then sweep thresholds.

The IoU method runs each pair through the same encode, decode and
:class:`~mrverify.pipeline.PairVerifier` path the edge server uses, so its
decisions match an online run sample for sample. Baseline methods compare the
prepared and codec-roundtripped reference and target frames directly.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .dataset import DatasetManifest, SamplePair
from .errors import ConfigError
from .imaging import decode
from .log import get_logger
from .metrics import EvaluationReport, build_report
from .pipeline import PairVerifier, Preprocessor
from .progress import track
from .segmentation import FrameKey, OracleSegmenter, PerturbationSpec
from .verification import BaselineMetric, Embedder, VerificationDecision, baseline_score

__all__ = [
    "IOU_METHOD",
    "METHODS",
    "SampleScore",
    "oracle_for",
    "verify_pair",
    "baseline_pair",
    "score_samples",
    "evaluate",
    "evaluate_with_validation",
]

logger = get_logger("mrverify.evaluation")

IOU_METHOD = "iou"
METHODS = (IOU_METHOD, *(m.value for m in BaselineMetric))


@dataclass(frozen=True)
class SampleScore:
    index: int
    model_id: int
    step_class: int
    step_index: int
    ground_truth: bool
    score: float
    iou_micro: int | None = None
    passed: bool | None = None
    tgt_bytes: int = 0
    latency_ms: float = field(default=0.0, compare=False)


def oracle_for(manifest: DatasetManifest, spec: PerturbationSpec | None = None) -> OracleSegmenter:
    return OracleSegmenter(manifest.ground_truth(), spec)


def verify_pair(pair: SamplePair, verifier: PairVerifier, preprocessor: Preprocessor) -> tuple[VerificationDecision, int]:
    """The server-side decision for one pair, and the uploaded target size in bytes."""

    ref_points, tgt_points = pair.alignment_points if pair.alignment_points is not None else (None, None)
    layer = preprocessor.encode_layer(pair.layer, ref_points)
    target = preprocessor.encode_target(pair.target, tgt_points)
    decision = verifier.verify(
        FrameKey(pair.model_id, pair.step_index),
        pair.step_class,
        decode(layer.payload),
        decode(target.payload),
        layer.points,
        target.points,
    )
    return decision, len(target.payload)


def baseline_pair(
    metric: BaselineMetric, pair: SamplePair, preprocessor: Preprocessor, embedder: Embedder | None = None
) -> tuple[float, int]:
    """The detection score (larger = more similar) and the uploaded target size."""

    reference = preprocessor.encode_target(pair.reference)
    target = preprocessor.encode_target(pair.target)
    score = baseline_score(metric, decode(reference.payload), decode(target.payload), embedder=embedder)
    return score.detection_score, len(target.payload)


def _check_method(method: str, verifier: PairVerifier | None, embedder: Embedder | None) -> None:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if method == IOU_METHOD and verifier is None:
        raise ConfigError("the iou method needs a segmenter")
    if method == BaselineMetric.EMBEDDING_COSINE.value and embedder is None:
        raise ConfigError("the cosine method needs an embedder")


def score_samples(
    manifest: DatasetManifest,
    method: str,
    *,
    preprocessor: Preprocessor,
    verifier: PairVerifier | None = None,
    embedder: Embedder | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> list[SampleScore]:
    """Score every sample of `manifest`, in sample order.

    `latency_ms` is the wall-clock time of one pair's scoring, from the
    client-side encode to the decision, without reading the pair from disk.
    """

    _check_method(method, verifier, embedder)

    def score(i: int) -> SampleScore:
        pair = manifest.load_pair(i)
        record = manifest.samples[i]
        common = dict(
            index=record.index,
            model_id=pair.model_id,
            step_class=pair.step_class,
            step_index=pair.step_index,
            ground_truth=pair.ground_truth,
        )
        start = time.perf_counter()
        if method == IOU_METHOD:
            assert verifier is not None
            decision, size = verify_pair(pair, verifier, preprocessor)
            elapsed = (time.perf_counter() - start) * 1e3
            return SampleScore(
                **common,
                score=decision.iou,
                iou_micro=decision.iou_micro,
                passed=decision.passed,
                tgt_bytes=size,
                latency_ms=elapsed,
            )
        value, size = baseline_pair(BaselineMetric(method), pair, preprocessor, embedder)
        return SampleScore(**common, score=value, tgt_bytes=size, latency_ms=(time.perf_counter() - start) * 1e3)

    indices = range(len(manifest))
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(track(pool.map(score, indices), f"{method} scores", total=len(indices), enabled=progress))


def evaluate(
    manifest: DatasetManifest,
    method: str,
    *,
    preprocessor: Preprocessor,
    verifier: PairVerifier | None = None,
    embedder: Embedder | None = None,
    threshold: float | None = None,
    grid: Sequence[float] | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> EvaluationReport:
    """Score `manifest` and build a report at `threshold` (the best swept one if None)."""

    scores = score_samples(
        manifest,
        method,
        preprocessor=preprocessor,
        verifier=verifier,
        embedder=embedder,
        jobs=jobs,
        progress=progress,
    )
    report = build_report(
        method,
        [s.score for s in scores],
        [s.ground_truth for s in scores],
        threshold=threshold,
        grid=grid,
        records=[asdict(s) for s in scores],
        latencies=[s.latency_ms for s in scores],
    )
    logger.info(
        "Evaluated",
        f"{manifest.name}/{manifest.split.value} {method}: acc={report.acc:.4f} auc={report.auc:.4f} "
        f"at threshold {report.threshold:.4f}, {report.latency_ms['mean']:.2f} ms/sample",
    )
    return report


def evaluate_with_validation(
    val_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    method: str,
    *,
    preprocessor: Preprocessor,
    verifier: PairVerifier | None = None,
    embedder: Embedder | None = None,
    grid: Sequence[float] | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> tuple[EvaluationReport, EvaluationReport]:
    """Pick the best threshold on the validation split, then report the test split at it."""

    kwargs = dict(preprocessor=preprocessor, verifier=verifier, embedder=embedder, jobs=jobs, progress=progress)
    val_report = evaluate(val_manifest, method, grid=grid, **kwargs)
    test_report = evaluate(test_manifest, method, threshold=val_report.best_threshold, grid=grid, **kwargs)
    return val_report, test_report
