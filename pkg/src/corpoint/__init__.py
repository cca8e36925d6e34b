"""corpoint: tooling for point-prediction data with step-by-step rationales.

Submodules:

- cor: reasoning-document grammar (parse, serialize, compose)
- masks, metric: binary region masks and the points-in-mask score
- scenes: synthetic relational scene benchmark generator
- preprocess: training records, padding, mixing, length batching
- endpoint, pipeline: generation client (with mocks) and dataset builder
- evalrun: cached, multi-run endpoint evaluation
- stats: Welch/pooled t-tests, trend fits, own t tail
- attention, plotting: attention dump overlays and report figures
- cli: the `corpoint` command
"""

from .cor import (
    AffordanceSubtype,
    CorDocument,
    PointSet,
    StepKind,
    compose_document,
    format_points,
    parse_document,
    parse_points,
    serialize,
)
from .masks import MaskImage
from .metric import EvalReport, ImageScore, aggregate, contains, format_pct, point_pixel, score_image

__version__ = "0.1.0"

__all__ = [
    "AffordanceSubtype", "CorDocument", "PointSet", "StepKind",
    "compose_document", "format_points", "parse_document", "parse_points",
    "serialize", "MaskImage", "EvalReport", "ImageScore", "aggregate",
    "contains", "format_pct", "point_pixel", "score_image", "__version__",
]
