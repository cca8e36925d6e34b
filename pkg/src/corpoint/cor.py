"""Reasoning-document model: parse and serialize step-labeled rationales.

A response document is four labeled reasoning steps followed by a bracketed
list of normalized (x, y) points.  The canonical emitted form is::

    Step 1 — Identify Reference Object: <text>
    Step 2 — Determine Goal's Subtype: <text>
    Step 3 — Define Search Space: <text>
    Step 4 — Generate Output: <text>
    [(0.320, 0.450), (0.610, 0.470)]

The parser is deliberately more tolerant than the serializer: it accepts
bare prose labels ("Define Target Area:"), numbered variants ("(3)",
"3.", "Step 3 -"), any decimal precision, and square or round outer
brackets around the point list.  It never raises on malformed input;
structural defects are reported as diagnostics on the returned document.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .errors import CorpointError


class OutOfRangeError(CorpointError):
    """A parsed coordinate fell outside [0, 1] under policy='reject'."""

    code = "OutOfRange"

    def __init__(self, index: int, point: tuple[float, float]):
        super().__init__(f"point {index} out of range: {point}")
        self.index = index
        self.point = point


class IncompleteDocumentError(CorpointError):
    code = "IncompleteDocument"


class StepKind(str, Enum):
    IDENTIFY_REFERENCE = "IdentifyReference"
    DETERMINE_SUBTYPE = "DetermineSubtype"
    DEFINE_SEARCH_SPACE = "DefineSearchSpace"
    GENERATE_OUTPUT = "GenerateOutput"


#: the four kinds in their required order
CANONICAL_ORDER = (
    StepKind.IDENTIFY_REFERENCE,
    StepKind.DETERMINE_SUBTYPE,
    StepKind.DEFINE_SEARCH_SPACE,
    StepKind.GENERATE_OUTPUT,
)

#: label emitted by the serializer for each step kind
CANONICAL_LABEL = {
    StepKind.IDENTIFY_REFERENCE: "Identify Reference Object",
    StepKind.DETERMINE_SUBTYPE: "Determine Goal's Subtype",
    StepKind.DEFINE_SEARCH_SPACE: "Define Search Space",
    StepKind.GENERATE_OUTPUT: "Generate Output",
}

# Accepted header labels, canonical first.  Matching is case-insensitive
# and tolerant of apostrophe variants and extra internal whitespace.
_LABEL_ALIASES = {
    StepKind.IDENTIFY_REFERENCE: (
        "Identify Reference Object",
        "Identify Reference Objects",
        "Identifying Reference Objects",
        "Identify Reference",
    ),
    StepKind.DETERMINE_SUBTYPE: (
        "Determine Goal's Subtype",
        "Determine the Goal's Subtype",
        "Determining the Goal's Subtype",
        "Determine Goal Subtype",
        "Determine Subtype",
    ),
    StepKind.DEFINE_SEARCH_SPACE: (
        "Define Search Space",
        "Define the Search Space",
        "Defining the Search Space",
        "Define Target Area",
        "Define the Target Area",
        "Defining the Specific Target Area",
        "Define Specific Target Area",
    ),
    StepKind.GENERATE_OUTPUT: (
        "Generate Output",
        "Generating Output",
        "Generate the Output",
        "Generate Final Coordinates",
    ),
}


def _alias_pattern(alias: str) -> str:
    # flexible whitespace, optional apostrophes
    parts = [re.escape(w).replace("'", "['’]?") for w in alias.split()]
    return r"[ \t]+".join(parts)


_KIND_BY_GROUP: list[StepKind] = []
_alts = []
for _kind, _aliases in _LABEL_ALIASES.items():
    for _a in sorted(_aliases, key=len, reverse=True):
        _alts.append(f"(?P<k{len(_KIND_BY_GROUP)}>{_alias_pattern(_a)})")
        _KIND_BY_GROUP.append(_kind)

_HEADER_RE = re.compile(
    r"^[ \t]*(?:step[ \t]*)?(?:\(?\d+\)?[ \t]*)?(?:[—–:.)-][ \t]*)?"
    r"(?:" + "|".join(_alts) + r")[ \t]*:",
    re.IGNORECASE | re.MULTILINE,
)

_NUM = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_TUPLE_RE = re.compile(rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*\)")
# square-bracket group (innermost) and round-outer tuple list
_SQUARE_RE = re.compile(r"\[[^][]*\]")
_ROUND_LIST_RE = re.compile(
    rf"\((?:\s*\(\s*{_NUM}\s*,\s*{_NUM}\s*\)\s*,)*\s*\(\s*{_NUM}\s*,\s*{_NUM}\s*\)\s*,?\s*\)"
)

_SUBTYPE_KEYWORDS = (
    ("placement affordance", "Placement Affordance"),
    ("object reference", "Object Reference"),
    ("free space reference", "Free Space Reference"),
)
_SUBTYPE_PHRASE_RE = re.compile(
    r"subtype[^:.\n]*?\b(?:is|as)\b[ \t]*(?:classified[ \t]+as[ \t]+)?"
    r"[\"'“”‘’`]*\s*(?:a|an)?[ \t]*([A-Za-z][A-Za-z \t-]*)",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class AffordanceSubtype:
    """Task subtype named in the second reasoning step.

    ``text`` is the subtype phrase; for the three known families it is the
    canonical phrase, for ``other=True`` it is the verbatim phrase found in
    the step text (never empty).
    """

    text: str
    other: bool = False

    PLACEMENT = "Placement Affordance"
    OBJECT_REFERENCE = "Object Reference"
    FREE_SPACE_REFERENCE = "Free Space Reference"

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("subtype text must be non-empty")

    @classmethod
    def from_text(cls, text: str) -> "AffordanceSubtype":
        """Extract the subtype from a Determine-Subtype step text."""
        low = text.lower()
        hits = [(low.find(kw), canon) for kw, canon in _SUBTYPE_KEYWORDS if kw in low]
        if hits:
            return cls(min(hits)[1])
        m = _SUBTYPE_PHRASE_RE.search(text)
        if m and m.group(1).strip():
            return cls(m.group(1).strip(), other=True)
        return cls(text.strip(), other=True)


@dataclass(frozen=True)
class PointSet:
    """Ordered normalized 2D points; ``empty`` marks the unparsed/no-list state."""

    points: tuple[tuple[float, float], ...] = ()
    empty: bool = False
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.empty and self.points:
            raise ValueError("empty-flagged PointSet must carry no points")
        for x, y in self.points:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"coordinate out of [0,1]: ({x}, {y})")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty_set(cls, *warnings: str) -> "PointSet":
        return cls((), empty=True, warnings=tuple(warnings))


@dataclass(frozen=True)
class ReasoningStep:
    """One labeled rationale step; char span covers the step's region in the
    source text (header included, through the start of the next header)."""

    kind: StepKind
    text: str
    ordinal: int
    char_start: int = field(default=0, compare=False)
    char_end: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("step text must be non-empty")
        if self.ordinal not in (1, 2, 3, 4):
            raise ValueError(f"ordinal must be 1..4, got {self.ordinal}")


@dataclass(frozen=True)
class Diagnostic:
    code: str
    detail: str = ""


@dataclass(frozen=True)
class CorDocument:
    """Parsed reasoning document.

    ``subtype`` is derived from the Determine-Subtype step text (``None``
    when that step is missing).  ``complete`` is true only for documents
    with all four steps in canonical order and at least one point.
    Equality compares steps, subtype, points, and completeness; the raw
    text and diagnostics are carried for audit only.
    """

    steps: tuple[ReasoningStep, ...]
    subtype: AffordanceSubtype | None
    points: PointSet
    complete: bool
    raw_text: str = field(default="", compare=False)
    diagnostics: tuple[Diagnostic, ...] = field(default=(), compare=False)


def format_points(points: "Iterable[tuple[float, float]] | PointSet") -> str:
    """Canonical point-list text, 3 decimal places, square brackets."""
    if isinstance(points, PointSet):
        points = points.points
    return "[" + ", ".join(f"({x:.3f}, {y:.3f})" for x, y in points) + "]"


def _find_point_list(text: str) -> re.Match | None:
    """Locate the final bracketed tuple list (square wins over an
    overlapping round-outer match)."""
    candidates = [m for m in _SQUARE_RE.finditer(text) if _TUPLE_RE.search(m.group(0))]
    spans = [(m.start(), m.end()) for m in candidates]
    for m in _ROUND_LIST_RE.finditer(text):
        if not any(s < m.end() and m.start() < e for s, e in spans):
            candidates.append(m)
    if not candidates:
        return None
    return max(candidates, key=lambda m: m.start())


def parse_points(text: str, policy: str = "clamp") -> PointSet:
    """Extract the final bracketed coordinate list from response text.

    policy='clamp' pulls out-of-range coordinates to the nearest bound and
    records a warning; policy='reject' raises OutOfRangeError instead.
    Returns an empty-flagged PointSet when no list is present.
    """
    if policy not in ("clamp", "reject"):
        raise ValueError(f"unknown policy: {policy!r}")
    m = _find_point_list(text)
    if m is None:
        return PointSet.empty_set("no point list found")
    points: list[tuple[float, float]] = []
    warnings: list[str] = []
    for i, tup in enumerate(_TUPLE_RE.finditer(m.group(0))):
        x, y = float(tup.group(1)), float(tup.group(2))
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            if policy == "reject":
                raise OutOfRangeError(i, (x, y))
            cx = min(max(x, 0.0), 1.0)
            cy = min(max(y, 0.0), 1.0)
            warnings.append(f"clamped point {i}: ({x}, {y}) -> ({cx}, {cy})")
            x, y = cx, cy
        points.append((x, y))
    return PointSet(tuple(points), warnings=tuple(warnings))


def parse_document(text: str, policy: str = "clamp") -> CorDocument:
    """Segment response text into labeled steps plus the final point list.

    Total over arbitrary input: missing or disordered steps yield a partial
    document (complete=False) with diagnostics, never an exception.
    """
    diagnostics: list[Diagnostic] = []
    headers = list(_HEADER_RE.finditer(text))
    list_match = _find_point_list(text)
    list_start = list_match.start() if list_match else len(text)
    list_end = list_match.end() if list_match else len(text)

    steps: list[ReasoningStep] = []
    kinds_seen: set[StepKind] = set()
    for i, hm in enumerate(headers):
        kind = next(
            _KIND_BY_GROUP[int(name[1:])]
            for name, val in hm.groupdict().items()
            if val is not None
        )
        seg_end = headers[i + 1].start() if i + 1 < len(headers) else len(text)
        text_end = seg_end
        if hm.end() <= list_start < seg_end:
            text_end = list_start
            trailing = text[list_end:seg_end].strip()
            if trailing:
                diagnostics.append(Diagnostic("trailing_text", trailing[:80]))
        step_text = text[hm.end():text_end].strip()
        if kind in kinds_seen:
            diagnostics.append(Diagnostic("duplicate_step", kind.value))
            continue
        if len(steps) >= 4:
            diagnostics.append(Diagnostic("extra_step", kind.value))
            continue
        if not step_text:
            diagnostics.append(Diagnostic("empty_step_text", kind.value))
            continue
        kinds_seen.add(kind)
        steps.append(
            ReasoningStep(
                kind=kind,
                text=step_text,
                ordinal=len(steps) + 1,
                char_start=hm.start(),
                char_end=seg_end,
            )
        )

    for kind in CANONICAL_ORDER:
        if kind not in kinds_seen:
            diagnostics.append(Diagnostic("missing_step", kind.value))
    ordered = [s.kind for s in steps] == list(CANONICAL_ORDER[: len(steps)])
    if steps and not ordered:
        diagnostics.append(
            Diagnostic("out_of_order", ",".join(s.kind.value for s in steps))
        )

    try:
        points = parse_points(text, policy=policy)
    except OutOfRangeError:
        raise
    for w in points.warnings:
        diagnostics.append(Diagnostic("clamped_point", w))
    if points.empty:
        diagnostics.append(Diagnostic("no_point_list"))

    subtype = None
    for s in steps:
        if s.kind is StepKind.DETERMINE_SUBTYPE:
            subtype = AffordanceSubtype.from_text(s.text)
            break

    complete = len(steps) == 4 and ordered and not points.empty and len(points) >= 1
    return CorDocument(
        steps=tuple(steps),
        subtype=subtype,
        points=points,
        complete=complete,
        raw_text=text,
        diagnostics=tuple(diagnostics),
    )


def serialize(doc: CorDocument) -> str:
    """Emit the canonical text form of a complete document.

    Step texts containing header-like lines or bracketed tuple lists of
    their own would not survive a reparse; downstream validation reparses
    every emitted document, so such degenerate texts are caught there.
    """
    if not doc.complete:
        raise IncompleteDocumentError("cannot serialize an incomplete document")
    lines = [
        f"Step {s.ordinal} — {CANONICAL_LABEL[s.kind]}: {s.text}" for s in doc.steps
    ]
    lines.append(format_points(doc.points.points))
    return "\n".join(lines)


def compose_document(
    reference_labels: Sequence[str],
    subtype: AffordanceSubtype,
    region_phrase: str,
    points: Sequence[tuple[float, float]],
) -> CorDocument:
    """Build a complete, self-consistent document from structured parts.

    The subtype phrase is embedded in the second step's text so the
    document survives a serialize/parse round trip.
    """
    refs = list(reference_labels)
    if not refs:
        raise ValueError("at least one reference label required")
    if len(refs) == 1:
        ref_text = f"The reference object is the {refs[0]}."
    else:
        ref_text = "The reference objects are the " + " and the ".join(refs) + "."
    texts = {
        StepKind.IDENTIFY_REFERENCE: ref_text,
        StepKind.DETERMINE_SUBTYPE: f"The goal's subtype is a {subtype.text}.",
        StepKind.DEFINE_SEARCH_SPACE: f"The search space is the {region_phrase}.",
        StepKind.GENERATE_OUTPUT: (
            "The points below were drawn from the identified region."
        ),
    }
    steps = tuple(
        ReasoningStep(kind=k, text=texts[k], ordinal=i + 1)
        for i, k in enumerate(CANONICAL_ORDER)
    )
    ps = PointSet(tuple((float(x), float(y)) for x, y in points))
    if len(ps) < 1:
        raise ValueError("a complete document needs at least one point")
    return CorDocument(steps=steps, subtype=subtype, points=ps, complete=True)
