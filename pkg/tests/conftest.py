"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the library's own code paths: pixel
mapping is redone in exact rational arithmetic, the t tail is numerical
integration of the density, and heat aggregation is plain Python loops.
"""

from __future__ import annotations

import math
import random
from fractions import Fraction

import numpy as np
import pytest

from corpoint.cor import (
    AffordanceSubtype,
    CANONICAL_LABEL,
    CANONICAL_ORDER,
    CorDocument,
    PointSet,
    ReasoningStep,
    StepKind,
)
from corpoint.masks import MaskImage


# ---------------------------------------------------------------------------
# pixel containment oracle (exact arithmetic, no shared helpers)


def oracle_pixel(x: float, y: float, width: int, height: int) -> tuple[int, int]:
    """floor(x*W) clamped, computed on exact rationals."""
    col = math.floor(Fraction(x) * width)
    row = math.floor(Fraction(y) * height)
    col = 0 if col < 0 else (width - 1 if col > width - 1 else col)
    row = 0 if row < 0 else (height - 1 if row > height - 1 else row)
    return col, row


def oracle_contains(mask: MaskImage, point: tuple[float, float]) -> bool:
    col, row = oracle_pixel(point[0], point[1], mask.width, mask.height)
    return bool(mask.inside[row][col])


def oracle_score(mask: MaskImage, points) -> float:
    pts = list(points)
    if not pts:
        return 0.0
    inside = 0
    for p in pts:
        if oracle_contains(mask, p):
            inside += 1
    return inside / len(pts)


# ---------------------------------------------------------------------------
# t-distribution tail oracle (quadrature over the density)


def oracle_t_two_sided_p(t: float, df: float) -> float:
    import mpmath as mp

    with mp.workdps(40):
        t = mp.mpf(abs(t))
        v = mp.mpf(df)
        coef = mp.gamma((v + 1) / 2) / (mp.sqrt(v * mp.pi) * mp.gamma(v / 2))

        def pdf(u):
            return coef * (1 + u * u / v) ** (-(v + 1) / 2)

        tail = mp.quad(pdf, [t, mp.inf])
        return float(2 * tail)


def oracle_betainc(a: float, b: float, x: float) -> float:
    import mpmath as mp

    with mp.workdps(40):
        return float(mp.betainc(a, b, 0, x, regularized=True))


# ---------------------------------------------------------------------------
# random inputs


def random_mask(rng: np.random.Generator, width: int, height: int,
                fill: float | None = None) -> MaskImage:
    p = rng.uniform(0.1, 0.9) if fill is None else fill
    return MaskImage(width=width, height=height,
                     inside=rng.random((height, width)) < p)


_EXTRA_WORDS = (
    "the region sits beside the marked object",
    "scan the area and keep clear of clutter",
    "the open surface extends toward the edge",
    "candidate spots were filtered for overlap",
)

_SUBTYPE_PHRASES = (
    "Placement Affordance",
    "Object Reference",
    "Free Space Reference",
)


def random_document(rng: random.Random, n_points: int | None = None) -> CorDocument:
    """A complete in-memory document with varied texts and points."""
    if n_points is None:
        n_points = rng.randint(1, 12)
    subtype_phrase = rng.choice(_SUBTYPE_PHRASES)
    texts = {
        StepKind.IDENTIFY_REFERENCE: (
            f"The reference object is the {rng.choice(['red box', 'blue cup', 'green tray'])}. "
            + rng.choice(_EXTRA_WORDS)
        ),
        StepKind.DETERMINE_SUBTYPE: f"The goal's subtype is a {subtype_phrase}.",
        StepKind.DEFINE_SEARCH_SPACE: (
            f"The search space is the area {rng.choice(['left of', 'behind', 'next to'])} "
            f"the reference. " + rng.choice(_EXTRA_WORDS)
        ),
        StepKind.GENERATE_OUTPUT: "Sampled valid points from the region. "
        + rng.choice(_EXTRA_WORDS),
    }
    steps = tuple(
        ReasoningStep(kind=k, text=texts[k], ordinal=i + 1)
        for i, k in enumerate(CANONICAL_ORDER)
    )
    pts = tuple(
        (round(rng.random(), 3), round(rng.random(), 3)) for _ in range(n_points)
    )
    return CorDocument(
        steps=steps,
        subtype=AffordanceSubtype(subtype_phrase),
        points=PointSet(pts),
        complete=True,
    )


# canonical text with deliberate formatting variation, still parseable
_HEADER_VARIANTS = (
    "Step {n} — {label}: {text}",
    "Step {n} - {label}: {text}",
    "step {n}. {label}: {text}",
    "{n}) {label}: {text}",
    "{label}: {text}",
)

_ALIAS_CHOICES = {
    StepKind.IDENTIFY_REFERENCE: (
        "Identify Reference Object", "Identify Reference Objects",
    ),
    StepKind.DETERMINE_SUBTYPE: (
        "Determine Goal's Subtype", "Determine the Goal's Subtype",
        "Determine Subtype",
    ),
    StepKind.DEFINE_SEARCH_SPACE: (
        "Define Search Space", "Define Target Area", "Define the Target Area",
    ),
    StepKind.GENERATE_OUTPUT: (
        "Generate Output", "Generate Final Coordinates",
    ),
}


def messy_document_text(rng: random.Random, doc: CorDocument) -> str:
    """Render a document with alias labels and loose list formatting."""
    lines = []
    for s in doc.steps:
        label = rng.choice(_ALIAS_CHOICES[s.kind] + (CANONICAL_LABEL[s.kind],))
        tmpl = rng.choice(_HEADER_VARIANTS)
        lines.append(tmpl.format(n=s.ordinal, label=label, text=s.text))
    pts = doc.points.points
    decimals = rng.choice((3, 4, 6))
    body = ", ".join(f"({x:.{decimals}f}, {y:.{decimals}f})" for x, y in pts)
    wrapped = rng.choice(("[{}]", "[ {} ]", "({})")).format(body)
    if rng.random() < 0.5:
        lines.append("Answer: " + wrapped)
    else:
        lines.append(wrapped)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# fixtures


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


@pytest.fixture()
def pyrng() -> random.Random:
    return random.Random(20240817)
