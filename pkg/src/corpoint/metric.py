"""Points-in-mask accuracy: per-point containment, per-image scores, and
mean/spread aggregation across evaluation runs.

Pixel convention: a normalized point (x, y) lands on pixel
(clamp(floor(x*W), 0, W-1), clamp(floor(y*H), 0, H-1)), so the metric is
total on the closed unit square (x=1.0 maps to the last column).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .cor import PointSet
from .errors import CorpointError
from .masks import MaskImage


class RunMismatchError(CorpointError):
    code = "RunMismatch"


@dataclass(frozen=True)
class ImageScore:
    image_id: str
    n_points: int
    n_inside: int
    accuracy: float
    empty_prediction: bool = False


@dataclass(frozen=True)
class EvalReport:
    """Accuracy aggregated over images per run, then over runs.

    ``spread`` is the sample standard deviation (n-1) of the per-run means;
    a single run reports spread 0 with ``single_run`` set.
    """

    per_run: tuple[tuple[str, float], ...]
    mean: float
    spread: float
    single_run: bool = False


def point_pixel(x: float, y: float, width: int, height: int) -> tuple[int, int]:
    """Map a normalized point to its (col, row) pixel."""
    col = min(max(int(math.floor(x * width)), 0), width - 1)
    row = min(max(int(math.floor(y * height)), 0), height - 1)
    return col, row


def contains(mask: MaskImage, point: tuple[float, float]) -> bool:
    col, row = point_pixel(point[0], point[1], mask.width, mask.height)
    return bool(mask.inside[row, col])


def score_image(mask: MaskImage, pts: PointSet, image_id: str = "") -> ImageScore:
    """Fraction of points inside the mask; empty predictions score 0 and are
    flagged rather than dropped."""
    if len(pts) == 0:
        return ImageScore(image_id, 0, 0, 0.0, empty_prediction=True)
    n_inside = sum(1 for p in pts.points if contains(mask, p))
    return ImageScore(image_id, len(pts), n_inside, n_inside / len(pts))


def aggregate(scores_by_run: dict[str, list[ImageScore]]) -> EvalReport:
    """Per-run unweighted mean over images, then mean/spread over runs.

    Every run must cover the same image set.
    """
    if not scores_by_run:
        raise ValueError("no runs to aggregate")
    run_ids = list(scores_by_run)
    image_sets = {rid: sorted(s.image_id for s in scores_by_run[rid]) for rid in run_ids}
    first = image_sets[run_ids[0]]
    for rid in run_ids[1:]:
        if image_sets[rid] != first:
            raise RunMismatchError(
                f"run {rid!r} covers a different image set than {run_ids[0]!r}"
            )
    if not first:
        raise ValueError("runs contain no image scores")
    per_run = tuple(
        (rid, sum(s.accuracy for s in scores_by_run[rid]) / len(scores_by_run[rid]))
        for rid in run_ids
    )
    means = [m for _, m in per_run]
    mean = sum(means) / len(means)
    if len(means) < 2:
        return EvalReport(per_run, mean, 0.0, single_run=True)
    var = sum((m - mean) ** 2 for m in means) / (len(means) - 1)
    return EvalReport(per_run, mean, math.sqrt(var))


def format_pct(mean: float, spread: float) -> str:
    """Render a fraction pair as percent with one decimal: '48.1% ± 0.1'."""
    return f"{mean * 100:.1f}% ± {spread * 100:.1f}"
