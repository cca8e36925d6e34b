"""Training-data shaping: square padding, record mixing, length batching.

TrainingRecord is a two-turn conversation (human instruction, assistant
response).  Reasoning records carry a serialized step document as the
response; standard records carry a bare point list.  Mixing and ablation
subsetting are deterministic under a seed, and ablation subsets are
nested: a smaller fraction's reasoning records are a prefix of a larger
fraction's.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .cor import PointSet, format_points
from .errors import CorpointError
from .masks import MaskImage

MID_GRAY = (127, 127, 127)


class InsufficientRecordsError(CorpointError):
    code = "InsufficientRecords"


class RecordKind(str, Enum):
    REASONING = "Reasoning"
    STANDARD = "Standard"


@dataclass(frozen=True)
class TrainingRecord:
    id: str
    kind: RecordKind
    conversation: tuple[dict, ...]
    image: str | None = None

    def __post_init__(self):
        if len(self.conversation) != 2:
            raise ValueError("conversation must have exactly 2 turns")
        froms = tuple(t.get("from") for t in self.conversation)
        if froms != ("human", "assistant"):
            raise ValueError(f"conversation turns must be human, assistant; got {froms}")

    @property
    def modality(self) -> str:
        return "image" if self.image else "text"

    @property
    def length(self) -> int:
        # whitespace-token count over both turns; a cheap stand-in for
        # tokenizer length that preserves relative ordering
        return sum(len(t["value"].split()) for t in self.conversation)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "image": self.image,
            "conversations": [dict(t) for t in self.conversation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingRecord":
        return cls(
            id=d["id"],
            kind=RecordKind(d["kind"]),
            conversation=tuple(d["conversations"]),
            image=d.get("image"),
        )


def conversation(instruction: str, response: str) -> tuple[dict, dict]:
    return ({"from": "human", "value": instruction}, {"from": "assistant", "value": response})


def reasoning_record(record_id: str, instruction: str, document_text: str,
                     image: str | None = None) -> TrainingRecord:
    return TrainingRecord(
        id=record_id,
        kind=RecordKind.REASONING,
        conversation=conversation(instruction, document_text),
        image=image,
    )


def standard_record(record_id: str, instruction: str, points: PointSet,
                    image: str | None = None) -> TrainingRecord:
    return TrainingRecord(
        id=record_id,
        kind=RecordKind.STANDARD,
        conversation=conversation(instruction, format_points(points)),
        image=image,
    )


# ---------------------------------------------------------------------------
# square padding


@dataclass(frozen=True)
class PadTransform:
    width: int
    height: int
    side: int
    off_x: int
    off_y: int

    @classmethod
    def for_size(cls, width: int, height: int) -> "PadTransform":
        side = max(width, height)
        return cls(
            width=width,
            height=height,
            side=side,
            off_x=(side - width) // 2,
            off_y=(side - height) // 2,
        )

    @property
    def identity(self) -> bool:
        return self.width == self.height

    def apply_point(self, x: float, y: float) -> tuple[float, float]:
        return (
            (x * self.width + self.off_x) / self.side,
            (y * self.height + self.off_y) / self.side,
        )

    def invert_point(self, x: float, y: float) -> tuple[float, float]:
        return (
            (x * self.side - self.off_x) / self.width,
            (y * self.side - self.off_y) / self.height,
        )

    def apply_points(self, points: PointSet) -> PointSet:
        return PointSet(
            tuple(self.apply_point(x, y) for x, y in points.points),
            empty=points.empty,
        )


def pad_to_square(image: np.ndarray, fill=MID_GRAY) -> tuple[np.ndarray, PadTransform]:
    """Center the image on a square canvas of side max(W, H).

    Already-square images pass through untouched (idempotent).  Returns
    the padded image and the point-coordinate transform.
    """
    if image.ndim not in (2, 3):
        raise ValueError("image must be HxW or HxWxC")
    height, width = image.shape[:2]
    t = PadTransform.for_size(width, height)
    if t.identity:
        return image, t
    if image.ndim == 2:
        canvas = np.full((t.side, t.side), fill if np.isscalar(fill) else fill[0],
                         dtype=image.dtype)
    else:
        canvas = np.empty((t.side, t.side, image.shape[2]), dtype=image.dtype)
        canvas[:] = fill[: image.shape[2]]
    canvas[t.off_y:t.off_y + height, t.off_x:t.off_x + width] = image
    return canvas, t


def pad_mask(mask: MaskImage) -> tuple[MaskImage, PadTransform]:
    """Pad a mask the same way images are padded; padding is outside."""
    t = PadTransform.for_size(mask.width, mask.height)
    if t.identity:
        return mask, t
    canvas = np.zeros((t.side, t.side), dtype=bool)
    canvas[t.off_y:t.off_y + mask.height, t.off_x:t.off_x + mask.width] = mask.inside
    return MaskImage(width=t.side, height=t.side, inside=canvas), t


# ---------------------------------------------------------------------------
# mixing and ablation subsets


def mix_datasets(
    reasoning: Sequence[TrainingRecord],
    standard: Sequence[TrainingRecord],
    size: int,
    ratio: float,
    seed: int,
) -> list[TrainingRecord]:
    """Blend the two pools at the requested reasoning ratio.

    Takes round(ratio * size) reasoning records and fills the rest with
    standard ones, both as prefixes of seeded permutations, then shuffles
    the combined order.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must be in [0, 1]")
    n_reason = round(ratio * size)
    n_std = size - n_reason
    if n_reason > len(reasoning):
        raise InsufficientRecordsError(
            f"need {n_reason} reasoning records, have {len(reasoning)}"
        )
    if n_std > len(standard):
        raise InsufficientRecordsError(
            f"need {n_std} standard records, have {len(standard)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    picked = [reasoning[int(i)] for i in rng.permutation(len(reasoning))[:n_reason]]
    picked += [standard[int(i)] for i in rng.permutation(len(standard))[:n_std]]
    order = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(len(picked))
    return [picked[int(i)] for i in order]


def ablation_subsets(
    reasoning: Sequence[TrainingRecord],
    standard: Sequence[TrainingRecord],
    fractions: Sequence[float],
    seed: int,
) -> dict[float, list[TrainingRecord]]:
    """Training sets that sweep how much reasoning data is added.

    Every subset keeps the full standard pool; fraction f adds
    round(f * len(reasoning)) reasoning records on top, drawn as a prefix
    of one seeded permutation so subsets nest as f grows.  Fraction 0 is
    standard-only and subset sizes differ across fractions by design.
    """
    fractions = list(fractions)
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"fraction {f} outside [0, 1]")
    rng_r = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    perm_r = [reasoning[int(i)] for i in rng_r.permutation(len(reasoning))]
    base = list(standard)
    out: dict[float, list[TrainingRecord]] = {}
    for k, f in enumerate(fractions):
        n_reason = round(f * len(reasoning))
        if n_reason > len(perm_r):
            raise InsufficientRecordsError(
                f"fraction {f}: need {n_reason} reasoning records"
            )
        subset = base + perm_r[:n_reason]
        order = np.random.default_rng(np.random.SeedSequence([seed, 2, k]))
        subset = [subset[int(i)] for i in order.permutation(len(subset))]
        out[f] = subset
    return out


# ---------------------------------------------------------------------------
# length-grouped batching


def group_by_length(
    records: Sequence[TrainingRecord],
    batch_size: int,
    seed: int,
    *,
    drop_last: bool = False,
) -> list[list[TrainingRecord]]:
    """Batch records so lengths within a batch are close.

    Sorts by (modality, length), chunks consecutively, then shuffles the
    batch order.  The flattened output is a permutation of the input.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = sorted(range(len(records)), key=lambda i: (records[i].modality, records[i].length, i))
    batches = [
        [records[i] for i in order[k:k + batch_size]]
        for k in range(0, len(order), batch_size)
    ]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    rng = np.random.default_rng(seed)
    return [batches[int(i)] for i in rng.permutation(len(batches))]


def mean_length_range(batches: Sequence[Sequence[TrainingRecord]]) -> float:
    """Mean over batches of (max length - min length); lower is tighter."""
    if not batches:
        return 0.0
    ranges = [
        max(r.length for r in b) - min(r.length for r in b) for b in batches if b
    ]
    return float(sum(ranges) / len(ranges))


def write_training_jsonl(records: Sequence[TrainingRecord], path) -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")


def read_training_jsonl(path) -> list[TrainingRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TrainingRecord.from_dict(json.loads(line)))
    return out


__all__ = [
    "RecordKind", "TrainingRecord", "conversation", "reasoning_record",
    "standard_record", "PadTransform", "pad_to_square", "pad_mask",
    "mix_datasets", "ablation_subsets", "group_by_length",
    "mean_length_range", "write_training_jsonl", "read_training_jsonl",
    "MID_GRAY", "InsufficientRecordsError",
]
