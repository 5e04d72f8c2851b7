"""Benchmarks over a dataset manifest: codecs, scaling factors and similarity CDFs.

Every benchmark returns a :class:`pandas.DataFrame`; the CLI writes it as CSV.
Latency columns are wall-clock measurements and differ between runs, every
other column is deterministic for a given manifest.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
import pandas as pd

from .dataset import DatasetManifest, SamplePair
from .errors import ConfigError
from .imaging import CodecSpec, decode
from .log import get_logger
from .metrics import auc, best_threshold, sweep
from .pipeline import PairVerifier, Preprocessor
from .progress import track
from .segmentation import FrameKey
from .verification import BaselineMetric, baseline_score

__all__ = [
    "DEFAULT_ALPHAS",
    "DEFAULT_CODECS",
    "SIMILARITY_METRICS",
    "measure_pair",
    "bench_codec",
    "bench_alpha",
    "bench_similarity",
    "similarity_latency",
]

logger = get_logger("mrverify.bench")

DEFAULT_ALPHAS = tuple(round(0.1 * i, 1) for i in range(1, 11))
DEFAULT_CODECS = (CodecSpec.lossless(), CodecSpec.lossy(95), CodecSpec.lossy(80), CodecSpec.lossy(50))
SIMILARITY_METRICS = (BaselineMetric.PSNR, BaselineMetric.SSIM, BaselineMetric.NRMSE, BaselineMetric.NCC)
IOU_METRIC = "iou"


def measure_pair(pair: SamplePair, verifier: PairVerifier, preprocessor: Preprocessor) -> dict:
    """Sizes, stage timings and the decision for one pair, without a network hop."""

    ref_points, tgt_points = pair.alignment_points if pair.alignment_points is not None else (None, None)
    layer = preprocessor.encode_layer(pair.layer, ref_points)
    target = preprocessor.encode_target(pair.target, tgt_points)
    decision, timings = verifier.verify_encoded(
        FrameKey(pair.model_id, pair.step_index),
        pair.step_class,
        layer.payload,
        target.payload,
        layer.points,
        target.points,
    )
    return {
        "ground_truth": pair.ground_truth,
        "width": target.size[0],
        "height": target.size[1],
        "ref_bytes": len(layer.payload),
        "tgt_bytes": len(target.payload),
        "preproc_ms": target.preproc_ms,
        "encode_ms": target.encode_ms,
        "decode_ms": timings.decode_ms,
        "postproc_ms": timings.postproc_ms,
        "iou": decision.iou,
        "passed": decision.passed,
    }


def _measure_all(
    manifest: DatasetManifest,
    verifier: PairVerifier,
    preprocessor: Preprocessor,
    *,
    label: str,
    jobs: int,
    progress: bool,
) -> pd.DataFrame:
    def run(i: int) -> dict:
        return measure_pair(manifest.load_pair(i), verifier, preprocessor)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        rows = list(track(pool.map(run, range(len(manifest))), label, total=len(manifest), enabled=progress))
    return pd.DataFrame(rows)


def _accuracy(df: pd.DataFrame) -> tuple[float, float]:
    curve = sweep(df["iou"].to_numpy(), df["ground_truth"].to_numpy())
    return best_threshold(curve)[1], auc(curve)


def _separation(df: pd.DataFrame) -> tuple[float, float, float]:
    positives = df.loc[df["ground_truth"], "iou"]
    negatives = df.loc[~df["ground_truth"], "iou"]
    pos = float(positives.median()) if len(positives) else float("nan")
    neg = float(negatives.median()) if len(negatives) else float("nan")
    return pos, neg, pos - neg


def bench_codec(
    manifest: DatasetManifest,
    verifier: PairVerifier,
    codecs: Sequence[CodecSpec] = DEFAULT_CODECS,
    *,
    alpha: float = 0.5,
    jobs: int = 1,
    progress: bool = False,
) -> pd.DataFrame:
    """One row per codec: target sizes, codec latency and verification accuracy.

    `size_ratio` is the mean target size relative to the Lossless row, when
    one is present.
    """

    if not codecs:
        raise ConfigError("no codecs to benchmark")
    rows = []
    for codec in codecs:
        preprocessor = Preprocessor(alpha=alpha, codec=codec, crop=verifier.crop)
        df = _measure_all(manifest, verifier, preprocessor, label=str(codec), jobs=jobs, progress=progress)
        acc, area = _accuracy(df)
        rows.append(
            {
                "codec": str(codec),
                "samples": len(df),
                "mean_bytes": df["tgt_bytes"].mean(),
                "median_bytes": df["tgt_bytes"].median(),
                "encode_ms": df["encode_ms"].mean(),
                "decode_ms": df["decode_ms"].mean(),
                "acc": acc,
                "auc": area,
            }
        )
        logger.info("Codec measured", f"{codec}: {rows[-1]['mean_bytes']:.0f} B, acc={acc:.4f}")
    table = pd.DataFrame(rows)
    lossless = table.loc[table["codec"] == str(CodecSpec.lossless()), "mean_bytes"]
    table["size_ratio"] = table["mean_bytes"] / float(lossless.iloc[0]) if len(lossless) else np.nan
    return table


def bench_alpha(
    manifest: DatasetManifest,
    verifier: PairVerifier,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    *,
    codec: CodecSpec | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> pd.DataFrame:
    """One row per scaling factor: upload size, stage latency and IoU separation.

    `separation` is the gap between the median IoU of positive and of
    negative pairs.
    """

    for alpha in alphas:
        if not 0.0 < alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    codec = codec or CodecSpec.lossless()
    rows = []
    for alpha in alphas:
        preprocessor = Preprocessor(alpha=alpha, codec=codec, crop=verifier.crop)
        df = _measure_all(manifest, verifier, preprocessor, label=f"alpha {alpha:g}", jobs=jobs, progress=progress)
        pos, neg, gap = _separation(df)
        acc, area = _accuracy(df)
        rows.append(
            {
                "alpha": alpha,
                "width": int(df["width"].iloc[0]) if len(df) else 0,
                "height": int(df["height"].iloc[0]) if len(df) else 0,
                "mean_bytes": df["tgt_bytes"].mean(),
                "preproc_ms": df["preproc_ms"].mean(),
                "encode_ms": df["encode_ms"].mean(),
                "decode_ms": df["decode_ms"].mean(),
                "postproc_ms": df["postproc_ms"].mean(),
                "pos_median_iou": pos,
                "neg_median_iou": neg,
                "separation": gap,
                "acc": acc,
                "auc": area,
            }
        )
        logger.info("Alpha measured", f"{alpha:g}: {rows[-1]['mean_bytes']:.0f} B, separation={gap:.4f}")
    return pd.DataFrame(rows)


def bench_similarity(
    manifest: DatasetManifest,
    preprocessor: Preprocessor,
    metrics: Sequence[BaselineMetric] = SIMILARITY_METRICS,
    *,
    verifier: PairVerifier | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> pd.DataFrame:
    """Empirical CDFs of raw similarity values, split by pair polarity.

    Long format: `metric, polarity, value, latency_ms, cdf`, sorted by value
    within each metric and polarity. With a `verifier`, the verification IoU
    of each pair is added as metric `iou`. `latency_ms` times the metric
    alone: the server-side verification for `iou`, the score computation on
    the decoded frames for pixel metrics.
    """

    if BaselineMetric.EMBEDDING_COSINE in metrics:
        raise ConfigError("the similarity benchmark covers pixel metrics only")

    def run(i: int) -> list[dict]:
        pair = manifest.load_pair(i)
        polarity = "positive" if pair.ground_truth else "negative"
        reference = decode(preprocessor.encode_target(pair.reference).payload)
        target = decode(preprocessor.encode_target(pair.target).payload)
        rows = []
        for m in metrics:
            start = time.perf_counter()
            value = baseline_score(m, reference, target).value
            rows.append(
                {"metric": m.value, "polarity": polarity, "value": value, "latency_ms": _ms_since(start)}
            )
        if verifier is not None:
            measured = measure_pair(pair, verifier, preprocessor)
            rows.append(
                {
                    "metric": IOU_METRIC,
                    "polarity": polarity,
                    "value": measured["iou"],
                    "latency_ms": measured["postproc_ms"],
                }
            )
        return rows

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        batches = list(
            track(pool.map(run, range(len(manifest))), "similarity", total=len(manifest), enabled=progress)
        )
    df = pd.DataFrame(
        [row for batch in batches for row in batch], columns=["metric", "polarity", "value", "latency_ms"]
    )
    df = df.sort_values(["metric", "polarity", "value"], kind="stable").reset_index(drop=True)
    groups = df.groupby(["metric", "polarity"])
    df["cdf"] = groups.cumcount().add(1) / groups["value"].transform("size")
    return df


def similarity_latency(df: pd.DataFrame) -> pd.DataFrame:
    """Mean, median and p95 calculation latency per metric of a :func:`bench_similarity` table."""

    latency = df.groupby("metric")["latency_ms"]
    return pd.DataFrame(
        {
            "mean_ms": latency.mean(),
            "p50_ms": latency.median(),
            "p95_ms": latency.quantile(0.95),
        }
    ).reset_index()


def _ms_since(start: float) -> float:
    return (time.perf_counter() - start) * 1e3
