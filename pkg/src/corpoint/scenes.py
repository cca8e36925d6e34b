"""Synthetic relational tabletop scenes with ground-truth region masks.

Scenes are colored axis-aligned rectangles on a plain background; the
target mask is defined by a spatial relation to one or two reference
objects.  Free-space records mask the relation region minus all occupied
pixels; object-reference records mask the pixels of a target object that
satisfies the relation.  Generation is fully deterministic for a given
(seed, config).

Image-plane conventions (camera facing the table): "in front of" means
below the reference in image coordinates, "behind" means above.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .cor import PointSet
from .errors import CorpointError
from .masks import MaskImage
from .metric import contains


class EmptyMaskError(CorpointError):
    code = "EmptyMask"


class UnsatisfiableError(CorpointError):
    code = "Unsatisfiable"


class Relation(str, Enum):
    LEFT_OF = "LeftOf"
    RIGHT_OF = "RightOf"
    IN_FRONT_OF = "InFrontOf"
    BEHIND = "Behind"
    BETWEEN = "Between"
    NEXT_TO = "NextTo"
    ON_TOP_OF = "OnTopOf"


class SourceTag(str, Enum):
    FREE_SPACE = "FreeSpaceReference"
    OBJECT_REFERENCE = "ObjectReference"


REL_PHRASES = {
    Relation.LEFT_OF: "to the left of",
    Relation.RIGHT_OF: "to the right of",
    Relation.IN_FRONT_OF: "in front of",
    Relation.BEHIND: "behind",
    Relation.NEXT_TO: "next to",
    Relation.ON_TOP_OF: "on top of",
    Relation.BETWEEN: "between",
}

COLOR_RGB = {
    "red": (200, 60, 50),
    "blue": (60, 90, 200),
    "green": (70, 160, 80),
    "yellow": (220, 200, 70),
    "purple": (140, 80, 180),
    "orange": (230, 140, 50),
}
SHAPES = ("box", "block", "cup", "plate", "book", "tray")
BACKGROUND_RGB = (212, 209, 200)


@dataclass(frozen=True)
class SceneObject:
    id: str
    label: str
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)

    def occupied(self, width: int, height: int) -> np.ndarray:
        x0, y0, x1, y1 = self.bbox
        occ = np.zeros((height, width), dtype=bool)
        occ[y0:y1, x0:x1] = True
        return occ

    @property
    def center(self) -> tuple[int, int]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) // 2, (y0 + y1) // 2


@dataclass(frozen=True)
class SceneConfig:
    width: int = 128
    height: int = 96
    min_objects: int = 3
    max_objects: int = 6
    min_object_frac: float = 0.12
    max_object_frac: float = 0.28
    relations: tuple[Relation, ...] = tuple(Relation)
    points_per_scene: int = 10
    object_ref_fraction: float = 0.0
    next_to_margin_frac: float = 0.18
    on_top_band_frac: float = 1.0  # in units of reference bbox height
    min_mask_pixels: int = 8
    max_attempts: int = 40

    def validate(self) -> None:
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("invalid object count range")
        if Relation.BETWEEN in self.relations and self.max_objects < 2:
            raise ValueError("Between requires scenes with >= 2 objects")
        if not self.relations:
            raise ValueError("no relations enabled")


@dataclass
class SceneRecord:
    id: str
    width: int
    height: int
    instruction: str
    relation: Relation
    reference_ids: tuple[str, ...]
    mask: MaskImage
    gt_points: PointSet
    source_tag: SourceTag
    holdout: bool
    objects: tuple[SceneObject, ...] = ()
    target_id: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)
    image_path: str | None = None

    def __post_init__(self):
        expected = 2 if self.relation is Relation.BETWEEN else 1
        if len(self.reference_ids) != expected:
            raise ValueError(
                f"{self.relation.value} requires {expected} reference ids, "
                f"got {len(self.reference_ids)}"
            )

    def object_by_id(self, oid: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise KeyError(oid)


def relation_mask(
    relation: Relation,
    refs: list[SceneObject],
    width: int,
    height: int,
    *,
    next_to_margin: int,
    on_top_band: int,
) -> np.ndarray:
    """Boolean raster of pixels satisfying the relation w.r.t. the refs."""
    rows, cols = np.ogrid[0:height, 0:width]
    if relation is Relation.BETWEEN:
        if len(refs) != 2:
            raise ValueError("Between needs exactly 2 references")
        a, b = refs
        if a.bbox[0] > b.bbox[0]:
            a, b = b, a
        if a.bbox[2] <= b.bbox[0]:  # horizontal gap
            lo_r = min(a.bbox[1], b.bbox[1])
            hi_r = max(a.bbox[3], b.bbox[3])
            return ((cols >= a.bbox[2]) & (cols < b.bbox[0])
                    & (rows >= lo_r) & (rows < hi_r))
        a, b = refs
        if a.bbox[1] > b.bbox[1]:
            a, b = b, a
        if a.bbox[3] <= b.bbox[1]:  # vertical gap
            lo_c = min(a.bbox[0], b.bbox[0])
            hi_c = max(a.bbox[2], b.bbox[2])
            return ((rows >= a.bbox[3]) & (rows < b.bbox[1])
                    & (cols >= lo_c) & (cols < hi_c))
        return np.zeros((height, width), dtype=bool)

    if len(refs) != 1:
        raise ValueError(f"{relation.value} needs exactly 1 reference")
    x0, y0, x1, y1 = refs[0].bbox
    if relation is Relation.LEFT_OF:
        return np.broadcast_to(cols < x0, (height, width)).copy()
    if relation is Relation.RIGHT_OF:
        return np.broadcast_to(cols >= x1, (height, width)).copy()
    if relation is Relation.BEHIND:
        return np.broadcast_to(rows < y0, (height, width)).copy()
    if relation is Relation.IN_FRONT_OF:
        return np.broadcast_to(rows >= y1, (height, width)).copy()
    if relation is Relation.NEXT_TO:
        dx = np.maximum(np.maximum(x0 - cols, cols - (x1 - 1)), 0)
        dy = np.maximum(np.maximum(y0 - rows, rows - (y1 - 1)), 0)
        dist = np.maximum(dx, dy)
        return (dist > 0) & (dist <= next_to_margin)
    if relation is Relation.ON_TOP_OF:
        return ((cols >= x0) & (cols < x1)
                & (rows < y0) & (rows >= y0 - on_top_band))
    raise ValueError(f"unknown relation: {relation}")


def sample_points(mask: MaskImage, k: int, seed) -> PointSet:
    """Draw k pixels uniformly with replacement from the inside pixels and
    emit each as its pixel center ((col+0.5)/W, (row+0.5)/H)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if mask.n_inside == 0:
        raise EmptyMaskError("mask has no inside pixels")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = np.flatnonzero(mask.inside.ravel())
    picks = flat[rng.integers(0, flat.size, size=k)]
    rows, cols = np.divmod(picks, mask.width)
    pts = tuple(
        (float((c + 0.5) / mask.width), float((r + 0.5) / mask.height))
        for r, c in zip(rows.tolist(), cols.tolist())
    )
    return PointSet(pts)


def _place_objects(rng: np.random.Generator, config: SceneConfig) -> list[SceneObject]:
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    base = min(config.width, config.height)
    colors = sorted(COLOR_RGB)
    objects: list[SceneObject] = []
    for i in range(n):
        side_lo = max(3, int(config.min_object_frac * base))
        side_hi = max(side_lo + 1, int(config.max_object_frac * base))
        for _ in range(30):
            w = int(rng.integers(side_lo, side_hi + 1))
            h = int(rng.integers(side_lo, side_hi + 1))
            x0 = int(rng.integers(0, config.width - w + 1))
            y0 = int(rng.integers(0, config.height - h + 1))
            bbox = (x0, y0, x0 + w, y0 + h)
            if all(
                bbox[2] <= o.bbox[0] or o.bbox[2] <= bbox[0]
                or bbox[3] <= o.bbox[1] or o.bbox[3] <= bbox[1]
                for o in objects
            ):
                color = colors[int(rng.integers(0, len(colors)))]
                shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
                objects.append(
                    SceneObject(id=f"obj-{i}", label=f"{color} {shape}", bbox=bbox)
                )
                break
    return objects


def render_scene(objects: Iterable[SceneObject], width: int, height: int) -> np.ndarray:
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    for obj in objects:
        color = COLOR_RGB[obj.label.split()[0]]
        x0, y0, x1, y1 = obj.bbox
        img[y0:y1, x0:x1] = color
        img[y0:y1, x0] = img[y0:y1, x1 - 1] = tuple(c // 2 for c in color)
        img[y0, x0:x1] = img[y1 - 1, x0:x1] = tuple(c // 2 for c in color)
    return img


def _instruction(relation: Relation, refs: list[SceneObject],
                 source_tag: SourceTag, target: SceneObject | None) -> str:
    phrase = REL_PHRASES[relation]
    if relation is Relation.BETWEEN:
        where = f"between the {refs[0].label} and the {refs[1].label}"
    else:
        where = f"{phrase} the {refs[0].label}"
    if source_tag is SourceTag.FREE_SPACE:
        return f"Find vacant spots {where}."
    return f"Point to the {target.label} {where}."


def generate_scene(
    seed,
    config: SceneConfig,
    *,
    scene_id: str = "scene-00000",
    allowed_relations: tuple[Relation, ...] | None = None,
    holdout: bool = False,
    source_tag: SourceTag | None = None,
) -> SceneRecord:
    """Generate one scene; deterministic for a given (seed, config).

    Retries internally (consuming the same RNG stream) when the drawn
    relation has no satisfying free pixels, and raises Unsatisfiable after
    the configured attempt bound.
    """
    config.validate()
    relations = allowed_relations or config.relations
    if not relations:
        raise ValueError("no relations available")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    margin = max(1, int(config.next_to_margin_frac * min(config.width, config.height)))

    for _ in range(config.max_attempts):
        objects = _place_objects(rng, config)
        if not objects:
            continue
        relation = relations[int(rng.integers(0, len(relations)))]
        if relation is Relation.BETWEEN and len(objects) < 2:
            continue
        tag = source_tag
        if tag is None:
            tag = (
                SourceTag.OBJECT_REFERENCE
                if rng.random() < config.object_ref_fraction
                else SourceTag.FREE_SPACE
            )

        n_refs = 2 if relation is Relation.BETWEEN else 1
        occupied = np.zeros((config.height, config.width), dtype=bool)
        for o in objects:
            occupied |= o.occupied(config.width, config.height)

        target: SceneObject | None = None
        if tag is SourceTag.FREE_SPACE:
            idx = rng.choice(len(objects), size=n_refs, replace=False)
            refs = [objects[int(i)] for i in idx]
            band = max(1, int(config.on_top_band_frac * (refs[0].bbox[3] - refs[0].bbox[1])))
            region = relation_mask(
                relation, refs, config.width, config.height,
                next_to_margin=margin, on_top_band=band,
            )
            mask_arr = region & ~occupied
        else:
            candidates = []
            for t in objects:
                others = [o for o in objects if o.id != t.id]
                if len(others) < n_refs:
                    continue
                if n_refs == 1:
                    ref_sets = [[o] for o in others]
                else:
                    ref_sets = [
                        [a, b] for ai, a in enumerate(others) for b in others[ai + 1:]
                    ]
                for rs in ref_sets:
                    band = max(1, int(config.on_top_band_frac * (rs[0].bbox[3] - rs[0].bbox[1])))
                    region = relation_mask(
                        relation, rs, config.width, config.height,
                        next_to_margin=margin, on_top_band=band,
                    )
                    cx, cy = t.center
                    if region[cy, cx]:
                        candidates.append((t, rs))
            if not candidates:
                continue
            target, refs = candidates[int(rng.integers(0, len(candidates)))]
            mask_arr = target.occupied(config.width, config.height)

        if int(mask_arr.sum()) < config.min_mask_pixels:
            continue

        mask = MaskImage(width=config.width, height=config.height, inside=mask_arr)
        gt = sample_points(mask, config.points_per_scene, rng)
        return SceneRecord(
            id=scene_id,
            width=config.width,
            height=config.height,
            instruction=_instruction(relation, refs, tag, target),
            relation=relation,
            reference_ids=tuple(r.id for r in refs),
            mask=mask,
            gt_points=gt,
            source_tag=tag,
            holdout=holdout,
            objects=tuple(objects),
            target_id=target.id if target else None,
            image=render_scene(objects, config.width, config.height),
        )
    raise UnsatisfiableError(
        f"no satisfiable scene after {config.max_attempts} attempts "
        f"(relations={[r.value for r in relations]})"
    )


# ---------------------------------------------------------------------------
# manifest I/O


def record_to_dict(record: SceneRecord, mask_format: str = "rle") -> dict:
    d = {
        "id": record.id,
        "width": record.width,
        "height": record.height,
        "instruction": record.instruction,
        "relation": record.relation.value,
        "reference_ids": list(record.reference_ids),
        "source_tag": record.source_tag.value,
        "holdout": record.holdout,
        "gt_points": [[x, y] for x, y in record.gt_points.points],
        "mask_area": record.mask.area_fraction,
        "objects": [
            {"id": o.id, "label": o.label, "bbox": list(o.bbox)} for o in record.objects
        ],
        "target_id": record.target_id,
        "image": record.image_path,
    }
    if mask_format == "rle":
        d["mask_rle"] = record.mask.to_rle()
    elif mask_format == "png":
        d["mask_path"] = f"masks/{record.id}.png"
    else:
        raise ValueError(f"unknown mask format: {mask_format!r}")
    return d


def record_from_dict(d: dict, base_dir: Path | None = None) -> SceneRecord:
    if "mask_rle" in d:
        mask = MaskImage.from_rle(d["mask_rle"], d["width"], d["height"])
    else:
        path = Path(d["mask_path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        mask = MaskImage.from_png(path)
    return SceneRecord(
        id=d["id"],
        width=d["width"],
        height=d["height"],
        instruction=d["instruction"],
        relation=Relation(d["relation"]),
        reference_ids=tuple(d["reference_ids"]),
        mask=mask,
        gt_points=PointSet(tuple((float(x), float(y)) for x, y in d["gt_points"])),
        source_tag=SourceTag(d["source_tag"]),
        holdout=d["holdout"],
        objects=tuple(
            SceneObject(o["id"], o["label"], tuple(o["bbox"])) for o in d.get("objects", [])
        ),
        target_id=d.get("target_id"),
        image_path=d.get("image"),
    )


def json_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)


def write_manifest(records: Iterable[SceneRecord], path, mask_format: str = "rle") -> dict:
    """Write a line-delimited manifest; returns summary metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    area_sum = 0.0
    relation_counts: dict[str, int] = {}
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json_line(record_to_dict(rec, mask_format=mask_format)) + "\n")
            count += 1
            area_sum += rec.mask.area_fraction
            relation_counts[rec.relation.value] = (
                relation_counts.get(rec.relation.value, 0) + 1
            )
    return {
        "count": count,
        "mean_mask_area": (area_sum / count) if count else 0.0,
        "relation_counts": dict(sorted(relation_counts.items())),
    }


def iter_manifest(path) -> Iterator[SceneRecord]:
    """Stream records one line at a time (the manifest never loads whole)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield record_from_dict(json.loads(line), base_dir=path.parent)


def load_manifest(path) -> list[SceneRecord]:
    return list(iter_manifest(path))


def build_benchmark(
    n_scenes: int,
    holdout_relations: tuple[Relation, ...],
    seed: int,
    *,
    config: SceneConfig | None = None,
    out_dir=None,
    holdout_fraction: float = 0.3,
    write_images: bool = True,
    mask_format: str = "rle",
) -> tuple[list[SceneRecord], list[SceneRecord]]:
    """Generate main and holdout scene sets; optionally write manifests.

    Holdout scenes use only the holdout relations; main scenes never use
    them.  With out_dir set, writes main.jsonl / holdout.jsonl, per-set
    .meta.json summaries, and PNG images (and mask PNGs for mask_format
    'png').
    """
    config = config or SceneConfig()
    config.validate()
    holdout_relations = tuple(holdout_relations)
    main_relations = tuple(r for r in config.relations if r not in holdout_relations)
    if not main_relations:
        raise ValueError("holdout set covers every enabled relation")
    n_hold = round(n_scenes * holdout_fraction) if holdout_relations else 0
    n_main = n_scenes - n_hold

    main: list[SceneRecord] = []
    for i in range(n_main):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0, i]))
        main.append(
            generate_scene(
                rng, config, scene_id=f"main-{i:05d}", allowed_relations=main_relations
            )
        )
    holdout: list[SceneRecord] = []
    for i in range(n_hold):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        holdout.append(
            generate_scene(
                rng, config, scene_id=f"hold-{i:05d}",
                allowed_relations=holdout_relations, holdout=True,
            )
        )

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        if mask_format == "png":
            (out_dir / "masks").mkdir(exist_ok=True)
        for rec in main + holdout:
            if write_images and rec.image is not None:
                from PIL import Image

                rec.image_path = f"images/{rec.id}.png"
                Image.fromarray(rec.image, mode="RGB").save(
                    out_dir / rec.image_path, format="PNG"
                )
            if mask_format == "png":
                rec.mask.to_png(out_dir / "masks" / f"{rec.id}.png")
        for name, recs in (("main", main), ("holdout", holdout)):
            if name == "holdout" and not holdout_relations:
                continue
            meta = write_manifest(recs, out_dir / f"{name}.jsonl", mask_format=mask_format)
            meta.update(
                seed=seed,
                holdout_relations=[r.value for r in holdout_relations],
                width=config.width,
                height=config.height,
                points_per_scene=config.points_per_scene,
            )
            with open(out_dir / f"{name}.meta.json", "w", encoding="utf-8") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
                fh.write("\n")

    return main, holdout


def check_record(record: SceneRecord) -> None:
    """Raise if a record violates the ground-truth containment invariant."""
    for p in record.gt_points.points:
        if not contains(record.mask, p):
            raise AssertionError(f"gt point {p} outside mask in record {record.id}")


__all__ = [
    "Relation", "SourceTag", "SceneObject", "SceneConfig", "SceneRecord",
    "relation_mask", "sample_points", "generate_scene", "render_scene",
    "build_benchmark", "write_manifest", "iter_manifest", "load_manifest",
    "record_to_dict", "record_from_dict", "json_line", "check_record",
    "EmptyMaskError", "UnsatisfiableError",
]
