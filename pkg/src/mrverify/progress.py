"""Rich progress bars for dataset builds, evaluations and benchmarks."""

from __future__ import annotations

from datetime import timedelta
from typing import Iterable, Iterator

from rich.console import Console
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    Task,
    TextColumn,
    TimeRemainingColumn,
)
from rich.text import Text

__all__ = ["LenientTimeRemainingColumn", "make_progress", "track"]


class LenientTimeRemainingColumn(TimeRemainingColumn):
    """Time remaining, falling back to a global average when rich has no estimate.

    Per-sample work here is bursty (a slow first JPEG encode, a segmenter warm-up),
    so rich's windowed speed estimate is often unavailable early in a run.
    """

    def render(self, task: Task) -> Text:
        remaining = super().render(task)
        if remaining.plain not in ("-:--:--", "--:--"):
            return remaining
        if not task.started or task.total is None or task.finished:
            return remaining
        elapsed = task.elapsed
        if elapsed is None or task.completed <= 0:
            return remaining
        seconds = elapsed / task.completed * (task.total - task.completed)
        return Text(str(timedelta(seconds=int(seconds))), style="progress.remaining")


def make_progress(console: Console | None = None, *, transient: bool = True) -> Progress:
    return Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        LenientTimeRemainingColumn(),
        console=console,
        transient=transient,
    )


def track[T](
    items: Iterable[T],
    description: str,
    *,
    total: int | None = None,
    enabled: bool = True,
    console: Console | None = None,
) -> Iterator[T]:
    """Iterate `items` while showing a progress bar (a plain pass-through when disabled)."""

    if not enabled:
        yield from items
        return
    if total is None and hasattr(items, "__len__"):
        total = len(items)  # type: ignore[arg-type]
    with make_progress(console) as progress:
        task = progress.add_task(description, total=total)
        for item in items:
            yield item
            progress.advance(task)
