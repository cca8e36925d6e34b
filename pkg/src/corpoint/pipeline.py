"""Dataset builder: scenes in, validated two-turn training records out.

For each scene the builder emits either a reasoning record (endpoint
generates a step document, which must reparse as complete and put its
points inside the scene mask) or a standard record (bare ground-truth
point list, no endpoint involved).  Which scenes become reasoning
records is a seeded choice honoring the requested ratio.  Output order
always follows manifest order, so a rerun with the same seed against a
deterministic backend reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .cor import (
    AffordanceSubtype,
    CorDocument,
    OutOfRangeError,
    parse_document,
    serialize,
)
from .endpoint import EndpointClient, context_line, encode_image
from .errors import CorpointError
from .jsonlog import log_event
from .masks import MaskImage
from .metric import contains
from .parallel import Gauge, bounded_map
from .preprocess import TrainingRecord, reasoning_record, standard_record
from .scenes import REL_PHRASES, Relation, SceneRecord, SourceTag, iter_manifest

logger = logging.getLogger("corpoint.pipeline")

PROMPT_HEADER = (
    "Answer with four reasoning steps named Identify Reference Object, "
    "Determine Goal's Subtype, Define Search Space, and Generate Output, "
    "then a final point list."
)


class BuildError(CorpointError):
    code = "Build"


@dataclass
class PipelineStats:
    """Build counters.

    `requested` counts scenes sent for document generation; `retried`
    counts extra generation attempts taken after a rejected reply.
    `elapsed` (wall seconds) stays out of to_dict so the stats file is
    reproducible byte for byte.
    """

    requested: int = 0
    succeeded: int = 0
    rejected_schema: int = 0
    rejected_points: int = 0
    retried: int = 0
    standard_records: int = 0
    endpoint_attempts: int = 0
    max_in_flight: int = 0
    elapsed: float = 0.0

    def check(self) -> None:
        if self.requested != self.succeeded + self.rejected_schema + self.rejected_points:
            raise AssertionError(
                f"stats out of balance: {self.requested} != "
                f"{self.succeeded} + {self.rejected_schema} + {self.rejected_points}"
            )

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out.pop("elapsed")
        return out


@dataclass(frozen=True)
class RejectEntry:
    record_id: str
    reason: str
    attempts: int

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "reason": self.reason, "attempts": self.attempts}


@dataclass
class BuildResult:
    records: list[TrainingRecord] | None
    rejects: list[RejectEntry]
    stats: PipelineStats
    out_path: Path | None = None
    rejects_path: Path | None = None


def region_phrase(scene: SceneRecord) -> str:
    labels = [scene.object_by_id(oid).label for oid in scene.reference_ids]
    if scene.source_tag is SourceTag.OBJECT_REFERENCE and scene.target_id:
        return f"pixels of the {scene.object_by_id(scene.target_id).label}"
    if scene.relation is Relation.BETWEEN:
        where = f"between the {labels[0]} and the {labels[1]}"
    else:
        where = f"{REL_PHRASES[scene.relation]} the {labels[0]}"
    return f"area {where}, excluding occupied pixels"


def scene_context(scene: SceneRecord) -> dict:
    subtype = (
        AffordanceSubtype.OBJECT_REFERENCE
        if scene.source_tag is SourceTag.OBJECT_REFERENCE
        else AffordanceSubtype.FREE_SPACE_REFERENCE
    )
    return {
        "id": scene.id,
        "references": [scene.object_by_id(oid).label for oid in scene.reference_ids],
        "subtype": subtype,
        "region": region_phrase(scene),
        "points": [[x, y] for x, y in scene.gt_points.points],
    }


def build_prompt(scene: SceneRecord, *, include_context: bool = True) -> str:
    lines = [PROMPT_HEADER, f"Instruction: {scene.instruction}"]
    if include_context:
        lines.append(context_line(scene_context(scene)))
    return "\n".join(lines)


def scene_image_payload(scene: SceneRecord, base_dir: Path | None = None) -> str | None:
    if scene.image is not None:
        return encode_image(scene.image)
    if scene.image_path:
        path = Path(scene.image_path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if path.exists():
            return encode_image(path.read_bytes())
    return None


def validate_response(
    text: str, mask: MaskImage, *, min_inside: float = 1.0
) -> tuple[CorDocument | None, str | None]:
    """Parse and check one endpoint reply; returns (doc, reject_reason)."""
    try:
        doc = parse_document(text, policy="reject")
    except OutOfRangeError as exc:
        return None, f"points: out of range {exc}"
    if not doc.complete:
        codes = sorted({d.code for d in doc.diagnostics}) or ["incomplete"]
        return None, "schema: " + ",".join(codes)
    pts = doc.points.points
    n_in = sum(1 for p in pts if contains(mask, p))
    if n_in < min_inside * len(pts):
        return None, f"points: {n_in}/{len(pts)} inside mask (need {min_inside:g})"
    return doc, None


def _count_scenes(source) -> int:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return sum(1 for line in fh if line.strip())
    return len(source)


def _iter_scenes(source) -> Iterator[SceneRecord]:
    if isinstance(source, (str, Path)):
        yield from iter_manifest(source)
    else:
        yield from iter(source)


def build_dataset(
    source,
    client: EndpointClient,
    *,
    ratio: float,
    seed: int,
    concurrency: int = 4,
    min_inside: float = 1.0,
    validation_retries: int = 3,
    include_images: bool = False,
    out_path=None,
    rejects_path=None,
    keep_records: bool | None = None,
) -> BuildResult:
    """Run the build over a manifest path or an iterable of scenes.

    `ratio` is the reasoning share: round(ratio * N) scenes get endpoint
    documents, the rest become bare-point records.  A rejected reply is
    regenerated with a fresh request seed up to `validation_retries`
    times; records still failing are logged and dropped (the output
    shrinks; nothing is backfilled).
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must be in [0, 1]")
    if validation_retries < 0:
        raise ValueError("validation_retries must be >= 0")
    total = _count_scenes(source)
    n_reason = round(ratio * total)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0])).permutation(total)
    reason_idx = frozenset(int(i) for i in order[:n_reason])
    base_dir = Path(source).parent if isinstance(source, (str, Path)) else None

    stats = PipelineStats()
    rejects: list[RejectEntry] = []
    gauge = Gauge()
    started = time.monotonic()
    log_event(logger, "info", "build.start",
              scenes=total, reasoning=n_reason, ratio=ratio, concurrency=concurrency)

    def task(item: tuple[int, SceneRecord]):
        index, scene = item
        if index not in reason_idx:
            rec = standard_record(
                f"{scene.id}-std", scene.instruction, scene.gt_points,
                image=scene.image_path,
            )
            return scene, "standard", rec, 0, 0
        prompt = build_prompt(scene)
        image = scene_image_payload(scene, base_dir) if include_images else None
        transport_attempts = 0
        reason = "schema: no reply"
        for try_no in range(validation_retries + 1):
            # fresh request seed per attempt so regeneration resamples
            req_seed = int(
                np.random.SeedSequence([seed, 3, index, try_no]).generate_state(1)[0]
            )
            reply = client.generate(prompt, image=image, seed=req_seed)
            transport_attempts += reply.attempts
            doc, reason = validate_response(reply.text, scene.mask, min_inside=min_inside)
            if reason is None:
                rec = reasoning_record(
                    f"{scene.id}-cor", scene.instruction, serialize(doc),
                    image=scene.image_path,
                )
                return scene, "reasoning", rec, transport_attempts, try_no
        return scene, reason, None, transport_attempts, validation_retries

    if keep_records is None:
        keep_records = out_path is None
    kept: list[TrainingRecord] | None = [] if keep_records else None
    out_fh = None
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_fh = open(out_path, "w", encoding="utf-8")
    try:
        items = enumerate(_iter_scenes(source))
        for scene, status, rec, attempts, gen_retries in bounded_map(
            task, items, concurrency, gauge=gauge
        ):
            stats.endpoint_attempts += attempts
            stats.retried += gen_retries
            if status == "standard":
                stats.standard_records += 1
            elif status == "reasoning":
                stats.requested += 1
                stats.succeeded += 1
            else:
                stats.requested += 1
                if status.startswith("schema"):
                    stats.rejected_schema += 1
                else:
                    stats.rejected_points += 1
                entry = RejectEntry(scene.id, status, 1 + gen_retries)
                rejects.append(entry)
                log_event(logger, "warning", "build.reject", **entry.to_dict())
                continue
            if rec is not None:
                if kept is not None:
                    kept.append(rec)
                if out_fh is not None:
                    out_fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")
    finally:
        if out_fh is not None:
            out_fh.close()

    stats.max_in_flight = gauge.peak
    stats.elapsed = time.monotonic() - started
    stats.check()
    if rejects_path is not None:
        rejects_path = Path(rejects_path)
        rejects_path.parent.mkdir(parents=True, exist_ok=True)
        with open(rejects_path, "w", encoding="utf-8") as fh:
            for entry in rejects:
                fh.write(json.dumps(entry.to_dict(), separators=(",", ":")) + "\n")
    log_event(logger, "info", "build.done", **stats.to_dict())
    return BuildResult(
        records=kept, rejects=rejects, stats=stats,
        out_path=out_path, rejects_path=rejects_path,
    )


__all__ = [
    "PipelineStats", "RejectEntry", "BuildResult", "BuildError",
    "build_prompt", "scene_context", "region_phrase", "validate_response",
    "build_dataset", "scene_image_payload", "PROMPT_HEADER",
]
