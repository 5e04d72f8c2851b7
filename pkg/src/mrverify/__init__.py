from . import (
    configlib,
    dataset,
    errors,
    geometry,
    imaging,
    log,
    metrics,
    motion,
    pipeline,
    protocol,
    segmentation,
    verification,
)
from .errors import MrVerifyError

__version__ = "0.1.0"

__all__ = [
    "configlib",
    "dataset",
    "errors",
    "geometry",
    "imaging",
    "log",
    "metrics",
    "motion",
    "pipeline",
    "protocol",
    "segmentation",
    "verification",
    "MrVerifyError",
]
