"""Point-cloud classification with local feature aggregation and vector attention."""

from ._core import (
    Model,
    ball_query,
    count_costs,
    fps,
    grad_suite,
    knn,
    load_cloud,
    metrics,
    normalize,
    resample,
    synth,
)

__all__ = [
    "Model",
    "ball_query",
    "count_costs",
    "fps",
    "grad_suite",
    "knn",
    "load_cloud",
    "metrics",
    "normalize",
    "resample",
    "synth",
]
