"""The `mrverify` command line.

Global options (`--config`, `--seed`, `--jobs`, `--out`) come before the
command; command flags override the TOML file, and the merged configuration is
validated before the command starts. Any :class:`MrVerifyError` ends the
command with its message on stderr and exit status 1.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from typing import Any, Callable

import click
import numpy as np
from rich.console import Console
from rich.table import Table

from .bench import DEFAULT_ALPHAS, DEFAULT_CODECS, bench_alpha, bench_codec, bench_similarity, similarity_latency
from .config import METHOD_NAMES, RunConfig, load_run_config
from .dataset import build_dataset, load_manifest, load_sources, synthesize_sources, write_annotated_images
from .errors import ConfigError, ConnectionLost, MrVerifyError, ServerError, StepTimeout
from .evaluation import IOU_METHOD, evaluate, evaluate_with_validation, oracle_for
from .imaging import CodecSpec
from .log import LogLevel, get_logger, set_level
from .metrics import EvaluationReport
from .motion import MotionDetector
from .pipeline import PairVerifier
from .protocol import EdgeServer, SessionLog, run_motion_session, run_sessions, serve
from .segmentation import ExternalSegmenter
from .verification import ExternalEmbedder, StubEmbedder

__all__ = ["main"]

logger = get_logger("mrverify.cli")
console = Console()


@dataclass
class _Globals:
    config_path: str | None = None
    flags: dict[str, Any] = field(default_factory=dict)

    def load(self, **flags: Any) -> RunConfig:
        cfg = load_run_config(self.config_path)
        cfg.override(**self.flags, **flags)
        set_level(LogLevel.parse(cfg.log_level))
        return cfg


def _reports_errors[F: Callable[..., Any]](command: F) -> F:
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MrVerifyError as e:
            raise click.ClickException(str(e)) from e

    return wrapper  # type: ignore[return-value]


def _codec(ctx: click.Context, param: click.Parameter, value: str | None) -> CodecSpec | None:
    if value is None:
        return None
    try:
        return CodecSpec.parse(value)
    except ValueError as e:
        raise click.BadParameter(str(e), ctx, param) from e


def _codec_flags(codec: CodecSpec | None) -> dict[str, Any]:
    if codec is None:
        return {}
    return {"codec": codec.kind.value, "quality": codec.quality}


def _verifier(cfg: RunConfig, manifest) -> PairVerifier:
    if cfg.segmenter_kind == "adapter":
        segmenter = ExternalSegmenter(cfg.segmenter_command, timeout=float(cfg.timeout) * 6)
    else:
        segmenter = oracle_for(manifest, cfg.perturbation())
    return PairVerifier(segmenter, cfg.policy(), cfg.crop_region())


def _embedder(cfg: RunConfig, stub: bool):
    if stub or cfg.embedder_kind == "stub":
        return StubEmbedder()
    return ExternalEmbedder(cfg.embedder_command)


REPORT_COLUMNS = ("split", "method", "threshold", "acc", "ppv", "tpr", "fpr", "auc", "tp", "fn", "fp", "tn", "ms/sample")


def _report_table(title: str, *reports: tuple[str, EvaluationReport]) -> Table:
    table = Table(title=title)
    for column in REPORT_COLUMNS:
        table.add_column(column, justify="left" if column in ("split", "method") else "right")
    for name, r in reports:
        table.add_row(
            name,
            r.method,
            f"{r.threshold:.4f}",
            f"{r.acc:.4f}",
            f"{r.ppv:.4f}",
            f"{r.tpr:.4f}",
            f"{r.fpr:.4f}",
            f"{r.auc:.4f}",
            *(str(v) for v in r.counts.to_dict().values()),
            f"{r.latency_ms['mean']:.2f}" if r.latency_ms else "-",
        )
    return table


def _frame_table(title: str, df) -> Table:
    table = Table(title=title)
    for column in df.columns:
        table.add_column(str(column), justify="right")
    for row in df.itertuples(index=False):
        table.add_row(*(f"{v:.4f}" if isinstance(v, float | np.floating) else str(v) for v in row))
    return table


perturb_options = [
    click.option("--dilate", "dilate_erode_radius", type=int, help="Oracle dilation (>0) or erosion (<0) radius."),
    click.option("--jitter", "jitter_sigma", type=float, help="Oracle mask jitter, pixels."),
    click.option("--miss-rate", type=float, help="Probability the oracle misses an instance."),
    click.option("--spurious-rate", type=float, help="Probability of a spurious oracle detection."),
    click.option("--perturb-seed", type=int),
]

pipeline_options = [
    click.option("--alpha", type=float, help="Scaling factor in (0, 1]."),
    click.option("--codec", callback=_codec, help="lossless or lossy:QUALITY."),
    click.option("--threshold", type=float, help="IoU threshold of the verification policy."),
    click.option("--segmenter", "segmenter_kind", type=click.Choice(["oracle", "adapter"])),
]


def _with(options: list) -> Callable:
    def decorator(f):
        for option in reversed(options):
            f = option(f)
        return f

    return decorator


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML configuration file.")
@click.option("--seed", type=int, help="Master seed.")
@click.option("--jobs", type=int, help="Worker threads.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, seed: int | None, jobs: int | None, out: str | None) -> None:
    """Operation verification for mixed-reality guidance."""

    ctx.obj = _Globals(config_path, {"seed": seed, "jobs": jobs, "out": out})


@main.command("gen-fixtures")
@click.option("--count", type=int, default=20, show_default=True, help="Number of annotated images.")
@click.option("--size", type=int, default=640, show_default=True, help="Square image side.")
@click.option("--dest", type=click.Path(file_okay=False), help="Directory (default: OUT/fixtures).")
@click.pass_obj
@_reports_errors
def gen_fixtures(g: _Globals, count: int, size: int, dest: str | None) -> None:
    """Write synthetic annotated source images in the polygon JSON format."""

    cfg = g.load()
    dest = dest or os.path.join(cfg.out, "fixtures")
    min_side = max(4, size // 16)
    sources = synthesize_sources(
        count,
        class_count=int(cfg.class_count),
        size=(size, size),
        seed=int(cfg.seed),
        min_side=min_side,
        max_side=max(min_side, 3 * size // 16),
    )
    paths = write_annotated_images(sources, dest)
    console.print(f"Wrote {len(paths)} annotated images to {dest}")


@main.command("gen-dataset")
@click.option("--sources", "sources_dir", type=click.Path(), required=True, help="Annotated source directory.")
@click.option("--count", type=int, help="Pairs per split (validation and test).")
@click.option("--name", default="desk", show_default=True)
@click.pass_obj
@_reports_errors
def gen_dataset(g: _Globals, sources_dir: str, count: int | None, name: str) -> None:
    """Generate balanced validation and test splits from annotated sources."""

    cfg = g.load(val_count=count, test_count=count)
    sources = load_sources(sources_dir)
    manifests = build_dataset(sources, cfg.dataset_config(name), cfg.out, jobs=int(cfg.jobs), progress=True)
    table = Table(title=f"Dataset {name}")
    for column in ("split", "samples", "positives", "negatives", "manifest"):
        table.add_column(column)
    for split, manifest in manifests.items():
        positives = sum(r.ground_truth for r in manifest.samples)
        table.add_row(
            split.value,
            str(len(manifest)),
            str(positives),
            str(len(manifest) - positives),
            os.path.join(cfg.out, f"{split.value}.json"),
        )
    console.print(table)


@main.command("evaluate")
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("--method", type=click.Choice(METHOD_NAMES))
@click.option("--val-manifest", type=click.Path(dir_okay=False), help="Choose the threshold on this split.")
@click.option("--stub-embeddings", is_flag=True, help="Use the histogram stub for the cosine method.")
@_with(pipeline_options)
@_with(perturb_options)
@click.pass_obj
@_reports_errors
def evaluate_cmd(
    g: _Globals, manifest_path: str, val_manifest: str | None, stub_embeddings: bool, codec, **flags
) -> None:
    """Score a manifest and write `<method>.json`, `_roc.csv` and `_samples.csv`."""

    threshold_given = flags.get("threshold") is not None
    cfg = g.load(**flags, **_codec_flags(codec))
    manifest = load_manifest(manifest_path)
    method = cfg.method
    kwargs = dict(
        preprocessor=cfg.preprocessor(),
        verifier=_verifier(cfg, manifest) if method == IOU_METHOD else None,
        embedder=_embedder(cfg, stub_embeddings) if method == "cosine" else None,
        jobs=int(cfg.jobs),
        progress=True,
    )
    if val_manifest is not None:
        val_report, report = evaluate_with_validation(load_manifest(val_manifest), manifest, method, **kwargs)
        val_report.write(cfg.out, f"{method}_val")
        rows = [("val", val_report), (manifest.split.value, report)]
    else:
        report = evaluate(manifest, method, threshold=float(cfg.threshold) if threshold_given else None, **kwargs)
        rows = [(manifest.split.value, report)]
    paths = report.write(cfg.out, method)
    console.print(_report_table(f"Evaluation of {manifest.name}", *rows))
    logger.info("Report written", ", ".join(paths))


@main.command("sweep")
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("--method", type=click.Choice(METHOD_NAMES))
@click.option("--grid-min", type=float, help="Lowest threshold of an evenly spaced grid.")
@click.option("--grid-max", type=float, help="Highest threshold of an evenly spaced grid.")
@click.option("--grid-steps", type=int, default=101, show_default=True)
@click.option("--stub-embeddings", is_flag=True)
@_with(pipeline_options)
@_with(perturb_options)
@click.pass_obj
@_reports_errors
def sweep_cmd(
    g: _Globals,
    manifest_path: str,
    grid_min: float | None,
    grid_max: float | None,
    grid_steps: int,
    stub_embeddings: bool,
    codec,
    **flags,
) -> None:
    """Write the ROC/accuracy curve and print the best threshold."""

    cfg = g.load(**flags, **_codec_flags(codec))
    grid = None
    if grid_min is not None or grid_max is not None:
        if grid_min is None or grid_max is None or grid_max < grid_min or grid_steps < 2:
            raise ConfigError("--grid-min and --grid-max must both be given with min <= max and at least 2 steps")
        grid = np.linspace(grid_min, grid_max, grid_steps)
    manifest = load_manifest(manifest_path)
    method = cfg.method
    report = evaluate(
        manifest,
        method,
        preprocessor=cfg.preprocessor(),
        verifier=_verifier(cfg, manifest) if method == IOU_METHOD else None,
        embedder=_embedder(cfg, stub_embeddings) if method == "cosine" else None,
        grid=grid,
        jobs=int(cfg.jobs),
        progress=True,
    )
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"sweep_{method}.csv")
    report.curve.to_frame().to_csv(path, index=False)
    console.print(
        f"best threshold {report.best_threshold:.6f} (acc {report.best_acc:.4f}, auc {report.auc:.4f}); curve in {path}"
    )


@main.command("serve")
@click.argument("manifest_path", type=click.Path(dir_okay=False), required=False)
@click.option("--endpoint", help="host:port to listen on.")
@_with(pipeline_options)
@_with(perturb_options)
@click.pass_obj
@_reports_errors
def serve_cmd(g: _Globals, manifest_path: str | None, endpoint: str | None, codec, **flags) -> None:
    """Run the edge server. The oracle segmenter reads its ground truth from MANIFEST."""

    cfg = g.load(endpoint=endpoint, **flags, **_codec_flags(codec))
    if cfg.segmenter_kind == "oracle" and manifest_path is None:
        raise ConfigError("the oracle segmenter needs a MANIFEST for its ground truth")
    manifest = load_manifest(manifest_path) if manifest_path is not None else None
    serve(cfg.endpoint, _verifier(cfg, manifest), cfg.codec_spec())


@main.command("simulate")
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("--endpoint", help="Connect to this server instead of an in-process loopback one.")
@click.option("--sessions", type=int, default=1, show_default=True, help="Parallel connections.")
@click.option("--limit", type=int, help="Replay only the first N samples.")
@click.option("--motion", is_flag=True, help="Trigger captures through the motion detector.")
@click.option("--tag-distance", type=float, help="Tag distance for the adaptive hand threshold.")
@_with(pipeline_options)
@_with(perturb_options)
@click.pass_obj
@_reports_errors
def simulate_cmd(
    g: _Globals,
    manifest_path: str,
    endpoint: str | None,
    sessions: int,
    limit: int | None,
    motion: bool,
    tag_distance: float | None,
    codec,
    **flags,
) -> None:
    """Replay a manifest against a server and write the latency log."""

    cfg = g.load(**flags, **_codec_flags(codec))
    manifest = load_manifest(manifest_path)
    count = len(manifest) if limit is None else min(limit, len(manifest))
    pairs = [manifest.load_pair(i) for i in range(count)]
    preprocessor = cfg.preprocessor()
    timeout = float(cfg.timeout)

    def run(target: str) -> SessionLog:
        if motion:
            detector = MotionDetector(cfg.skin_model(), cfg.motion_config(), tag_distance)
            return run_motion_session(pairs, target, preprocessor, detector=detector, timeout=timeout)
        return run_sessions(pairs, target, preprocessor, sessions=sessions, timeout=timeout)

    try:
        if endpoint is not None:
            log = run(endpoint)
        else:
            with EdgeServer("127.0.0.1:0", _verifier(cfg, manifest), codec=cfg.codec_spec()) as server:
                log = run(server.endpoint)
    except (ConnectionLost, StepTimeout, ServerError) as e:
        if e.partial_log is not None:
            paths = e.partial_log.write(cfg.out, "session")
            logger.warning("Partial log written", f"{len(e.partial_log)} steps in {paths[0]}")
        raise
    paths = log.write(cfg.out, "session")
    summary = log.summary().reset_index(names="field")
    console.print(_frame_table(f"Latency over {len(log)} steps", summary))
    console.print(f"{100 * log.within_budget():.1f}% of steps under 273 ms; log in {paths[0]}")


@main.command("bench-codec")
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("--codecs", help="Comma-separated codecs, e.g. lossless,lossy:80.")
@_with(pipeline_options)
@_with(perturb_options)
@click.pass_obj
@_reports_errors
def bench_codec_cmd(g: _Globals, manifest_path: str, codecs: str | None, codec, **flags) -> None:
    """Compare target sizes, codec latency and accuracy across codecs."""

    cfg = g.load(**flags, **_codec_flags(codec))
    try:
        specs = tuple(CodecSpec.parse(c) for c in codecs.split(",")) if codecs else DEFAULT_CODECS
    except ValueError as e:
        raise ConfigError(f"--codecs: {e}") from e
    manifest = load_manifest(manifest_path)
    table = bench_codec(
        manifest, _verifier(cfg, manifest), specs, alpha=float(cfg.alpha), jobs=int(cfg.jobs), progress=True
    )
    os.makedirs(cfg.out, exist_ok=True)
    table.to_csv(os.path.join(cfg.out, "bench_codec.csv"), index=False)
    console.print(_frame_table("Codec comparison", table))


@main.command("bench-alpha")
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("--alphas", help="Comma-separated scaling factors (default 0.1 to 1.0).")
@_with(pipeline_options)
@_with(perturb_options)
@click.pass_obj
@_reports_errors
def bench_alpha_cmd(g: _Globals, manifest_path: str, alphas: str | None, codec, **flags) -> None:
    """Sweep the scaling factor: upload size, latency and IoU separation."""

    cfg = g.load(**flags, **_codec_flags(codec))
    try:
        values = tuple(float(a) for a in alphas.split(",")) if alphas else DEFAULT_ALPHAS
    except ValueError as e:
        raise ConfigError(f"--alphas: {e}") from e
    manifest = load_manifest(manifest_path)
    table = bench_alpha(
        manifest, _verifier(cfg, manifest), values, codec=cfg.codec_spec(), jobs=int(cfg.jobs), progress=True
    )
    os.makedirs(cfg.out, exist_ok=True)
    table.to_csv(os.path.join(cfg.out, "bench_alpha.csv"), index=False)
    console.print(_frame_table("Scaling factor sweep", table))


@main.command("bench-similarity")
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("--iou/--no-iou", default=True, show_default=True, help="Add the verification IoU as a metric.")
@_with(pipeline_options)
@_with(perturb_options)
@click.pass_obj
@_reports_errors
def bench_similarity_cmd(g: _Globals, manifest_path: str, iou: bool, codec, **flags) -> None:
    """Empirical CDFs and calculation latency of IoU, PSNR, SSIM, NRMSE and NCC by pair polarity."""

    cfg = g.load(**flags, **_codec_flags(codec))
    manifest = load_manifest(manifest_path)
    verifier = _verifier(cfg, manifest) if iou else None
    df = bench_similarity(manifest, cfg.preprocessor(), verifier=verifier, jobs=int(cfg.jobs), progress=True)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "bench_similarity.csv")
    df.to_csv(path, index=False)
    latency = similarity_latency(df)
    latency.to_csv(os.path.join(cfg.out, "bench_similarity_latency.csv"), index=False)
    medians = df.groupby(["metric", "polarity"], as_index=False)["value"].median()
    console.print(_frame_table("Median similarity", medians))
    console.print(_frame_table("Calculation latency", latency))
    console.print(f"CDFs written to {path}")


if __name__ == "__main__":
    main()
