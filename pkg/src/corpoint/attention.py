"""Attention dumps: token-to-step maps, patch heat aggregation, overlays.

Dump file layout: one JSON header line (text, token offsets, patch grid
shape, dtype, byte order), then a newline, then the raw little-endian
float32 matrix with one row per token and one column per patch.

Aggregation for a step averages its tokens' rows and min-max normalizes
the result; an all-zero map stays zero and is flagged, a constant
nonzero map normalizes to all ones.  Upsampling to image size is plain
bilinear interpolation aligned on pixel centers, which keeps the hottest
patch the hottest pixel block.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cor import StepKind, parse_document
from .errors import CorpointError
from .metric import point_pixel

DUMP_VERSION = 1


class DumpFormatError(CorpointError):
    code = "DumpFormat"


class SpanMismatchError(DumpFormatError):
    """Token offsets point past the end of the dump's text."""

    code = "SpanMismatch"


class EmptyRangeError(CorpointError):
    code = "EmptyRange"


@dataclass(frozen=True)
class TokenSpan:
    text: str
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"bad token span [{self.start}, {self.end})")

    @property
    def midpoint(self) -> float:
        return (self.start + self.end) / 2.0


@dataclass
class AttentionDump:
    text: str
    tokens: tuple[TokenSpan, ...]
    grid: tuple[int, int]  # (rows, cols) of the patch lattice
    matrix: np.ndarray  # (n_tokens, rows*cols) float32
    image_ref: str | None = None

    def __post_init__(self):
        gh, gw = self.grid
        if gh < 1 or gw < 1:
            raise DumpFormatError(f"bad grid {self.grid}")
        if self.matrix.shape != (len(self.tokens), gh * gw):
            raise DumpFormatError(
                f"matrix shape {self.matrix.shape} does not match "
                f"{len(self.tokens)} tokens and grid {self.grid}"
            )
        for tok in self.tokens:
            if tok.end > len(self.text):
                raise SpanMismatchError(
                    f"token span [{tok.start}, {tok.end}) exceeds text "
                    f"length {len(self.text)}"
                )


def write_dump(dump: AttentionDump, path) -> None:
    header = {
        "version": DUMP_VERSION,
        "text": dump.text,
        "tokens": [{"text": t.text, "start": t.start, "end": t.end} for t in dump.tokens],
        "grid": list(dump.grid),
        "image_ref": dump.image_ref,
        "dtype": "float32",
        "byte_order": "little",
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(dump.matrix, dtype="<f4").tobytes())


def read_dump(path) -> AttentionDump:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        raw = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DumpFormatError(f"unreadable header: {exc}") from exc
    if header.get("version") != DUMP_VERSION:
        raise DumpFormatError(f"unsupported dump version: {header.get('version')!r}")
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise DumpFormatError("dump must be little-endian float32")
    tokens = tuple(TokenSpan(t["text"], t["start"], t["end"]) for t in header["tokens"])
    gh, gw = (int(v) for v in header["grid"])
    expected = len(tokens) * gh * gw * 4
    if len(raw) != expected:
        raise DumpFormatError(f"matrix payload is {len(raw)} bytes, expected {expected}")
    matrix = np.frombuffer(raw, dtype="<f4").reshape(len(tokens), gh * gw)
    return AttentionDump(
        text=header["text"], tokens=tokens, grid=(gh, gw),
        matrix=matrix, image_ref=header.get("image_ref"),
    )


# ---------------------------------------------------------------------------
# token -> step segmentation


def step_spans(text: str) -> dict[StepKind, tuple[int, int]]:
    """Char span of each step present in the text.

    A step's span runs from its header to the next header; the last
    step's span extends to the end of the text, so the final point list
    belongs to the step that produced it.
    """
    doc = parse_document(text)
    return {s.kind: (s.char_start, s.char_end) for s in doc.steps}


def token_step_map(dump: AttentionDump) -> list[StepKind | None]:
    """Assign each token to the step whose span contains its midpoint."""
    spans = step_spans(dump.text)
    out: list[StepKind | None] = []
    for tok in dump.tokens:
        mid = tok.midpoint
        hit = None
        for kind, (start, end) in spans.items():
            if start <= mid < end:
                hit = kind
                break
        out.append(hit)
    return out


def step_token_rows(dump: AttentionDump, kind: StepKind) -> np.ndarray:
    idx = [i for i, k in enumerate(token_step_map(dump)) if k is kind]
    return dump.matrix[idx]


@dataclass(frozen=True)
class HeatResult:
    heat: np.ndarray  # (rows, cols) in [0, 1]
    flag: str | None  # None | "no_tokens" | "all_zero" | "constant"


def normalize_heat(raw: np.ndarray) -> HeatResult:
    """Min-max normalize a nonnegative heat map to [0, 1].

    All-zero input stays zero (flag "all_zero"); constant nonzero input
    becomes all ones (flag "constant").
    """
    raw = np.asarray(raw, dtype=np.float64)
    hi = float(raw.max()) if raw.size else 0.0
    lo = float(raw.min()) if raw.size else 0.0
    if hi == 0.0:
        return HeatResult(np.zeros_like(raw), "all_zero")
    if hi == lo:
        return HeatResult(np.ones_like(raw), "constant")
    return HeatResult((raw - lo) / (hi - lo), None)


def _reduce_rows(rows: np.ndarray, reducer: str) -> np.ndarray:
    if reducer == "mean":
        return rows.mean(axis=0)
    if reducer == "max":
        return rows.max(axis=0)
    raise ValueError(f"unknown reducer {reducer!r} (use 'mean' or 'max')")


def aggregate_range(
    dump: AttentionDump, token_indices, *, reducer: str = "mean"
) -> HeatResult:
    """Reduce an explicit token index range, then min-max normalize.

    The range must be non-empty; reducer is "mean" (default) or "max".
    """
    idx = list(token_indices)
    if not idx:
        raise EmptyRangeError("token range is empty")
    gh, gw = dump.grid
    raw = _reduce_rows(dump.matrix[idx], reducer).reshape(gh, gw)
    return normalize_heat(raw)


def aggregate_step(
    dump: AttentionDump, kind: StepKind, *, reducer: str = "mean"
) -> HeatResult:
    """Reduce attention over the step's tokens, min-max normalized.

    A step with no tokens comes back as flagged zeros rather than an
    error so render loops survive partial documents.
    """
    idx = [i for i, k in enumerate(token_step_map(dump)) if k is kind]
    gh, gw = dump.grid
    try:
        return aggregate_range(dump, idx, reducer=reducer)
    except EmptyRangeError:
        return HeatResult(np.zeros((gh, gw)), "no_tokens")


def aggregate_all(dump: AttentionDump, *, reducer: str = "mean") -> HeatResult:
    gh, gw = dump.grid
    if dump.matrix.shape[0] == 0:
        return HeatResult(np.zeros((gh, gw)), "no_tokens")
    return normalize_heat(
        _reduce_rows(dump.matrix, reducer).reshape(gh, gw)
    )


# ---------------------------------------------------------------------------
# upsampling and overlay rendering


def upsample_bilinear(heat: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear upsampling.

    Output pixel (r, c) samples the grid at
    ((r + 0.5) * gh / out_h - 0.5, (c + 0.5) * gw / out_w - 0.5), clamped
    to the grid; values never exceed the input maximum, and the input's
    argmax patch contains the output's argmax pixel when the output size
    is an integer multiple of the grid.
    """
    heat = np.asarray(heat, dtype=np.float64)
    gh, gw = heat.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    rr = np.clip((np.arange(out_h) + 0.5) * gh / out_h - 0.5, 0, gh - 1)
    cc = np.clip((np.arange(out_w) + 0.5) * gw / out_w - 0.5, 0, gw - 1)
    r0 = np.floor(rr).astype(int)
    c0 = np.floor(cc).astype(int)
    r1 = np.minimum(r0 + 1, gh - 1)
    c1 = np.minimum(c0 + 1, gw - 1)
    wr = (rr - r0)[:, None]
    wc = (cc - c0)[None, :]
    top = heat[r0][:, c0] * (1.0 - wc) + heat[r0][:, c1] * wc
    bot = heat[r1][:, c0] * (1.0 - wc) + heat[r1][:, c1] * wc
    return top * (1.0 - wr) + bot * wr


def heat_to_rgb(heat01: np.ndarray, cmap: str = "viridis") -> np.ndarray:
    import matplotlib

    lut = matplotlib.colormaps[cmap]
    rgba = lut(np.clip(np.asarray(heat01, dtype=np.float64), 0.0, 1.0))
    return np.floor(rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def draw_points(
    image: np.ndarray,
    points,
    color: tuple[int, int, int] = (255, 64, 48),
    radius: int = 3,
) -> np.ndarray:
    """Filled circles at normalized points, using the metric's pixel map."""
    out = np.array(image, copy=True)
    h, w = out.shape[:2]
    yy, xx = np.ogrid[:h, :w]
    for x, y in points:
        cx, cy = point_pixel(x, y, w, h)
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
        out[disk] = color
    return out


def overlay_heatmap(
    image: np.ndarray,
    heat01: np.ndarray,
    *,
    alpha: float = 0.45,
    cmap: str = "viridis",
    points=None,
    point_color: tuple[int, int, int] = (255, 64, 48),
    point_radius: int = 3,
) -> np.ndarray:
    """Blend a [0,1] heat field over an RGB image; optionally mark points."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    if img.shape[:2] != heat01.shape:
        heat01 = upsample_bilinear(heat01, img.shape[0], img.shape[1])
    heat_rgb = heat_to_rgb(heat01, cmap)
    blended = np.floor(
        (1.0 - alpha) * img.astype(np.float64) + alpha * heat_rgb.astype(np.float64) + 0.5
    ).astype(np.uint8)
    if points is not None:
        blended = draw_points(blended, points, color=point_color, radius=point_radius)
    return blended


def png_bytes(image: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.asarray(image)
    mode = "RGB" if arr.ndim == 3 else "L"
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def render_step_overlays(
    dump: AttentionDump,
    image: np.ndarray,
    *,
    alpha: float = 0.45,
    cmap: str = "viridis",
    mark_points: bool = True,
) -> dict[str, bytes]:
    """One overlay PNG per present step plus an all-token aggregate.

    Keys are step kind values plus "all"; point markers come from the
    dump text's final list when present.
    """
    doc = parse_document(dump.text)
    pts = doc.points.points if mark_points and not doc.points.empty else None
    out: dict[str, bytes] = {}
    for kind in (s.kind for s in doc.steps):
        res = aggregate_step(dump, kind)
        img = overlay_heatmap(image, res.heat, alpha=alpha, cmap=cmap, points=pts)
        out[kind.value] = png_bytes(img)
    res = aggregate_all(dump)
    out["all"] = png_bytes(
        overlay_heatmap(image, res.heat, alpha=alpha, cmap=cmap, points=pts)
    )
    return out


# ---------------------------------------------------------------------------
# synthetic dumps (demo and test fixture)


def whitespace_tokens(text: str) -> tuple[TokenSpan, ...]:
    """Offsets of whitespace-delimited tokens; a cheap tokenizer stand-in."""
    out = []
    i = 0
    n = len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        out.append(TokenSpan(text[i:j], i, j))
        i = j
    return tuple(out)


def synthesize_dump(
    text: str,
    *,
    grid: tuple[int, int] = (24, 24),
    seed: int = 0,
    image_ref: str | None = None,
) -> AttentionDump:
    """Fabricate a plausible dump for a document text.

    Tokens of each step share a hot patch (seeded per step) over a low
    noise floor, so per-step overlays differ visibly.  Only a fixture:
    real dumps come from a model hook, not from this function.
    """
    tokens = whitespace_tokens(text)
    gh, gw = grid
    rng = np.random.default_rng(np.random.SeedSequence([seed, gh, gw]))
    hot = {
        kind: (int(rng.integers(0, gh)), int(rng.integers(0, gw)))
        for kind in StepKind
    }
    spans = step_spans(text)
    matrix = rng.random((len(tokens), gh * gw)).astype(np.float32) * 0.05
    for i, tok in enumerate(tokens):
        for kind, (start, end) in spans.items():
            if start <= tok.midpoint < end:
                r, c = hot[kind]
                matrix[i, r * gw + c] += 1.0
                break
    return AttentionDump(
        text=text, tokens=tokens, grid=grid, matrix=matrix, image_ref=image_ref
    )


__all__ = [
    "DUMP_VERSION", "DumpFormatError", "SpanMismatchError", "EmptyRangeError",
    "TokenSpan", "AttentionDump",
    "write_dump", "read_dump", "step_spans", "token_step_map",
    "step_token_rows", "HeatResult", "normalize_heat", "aggregate_range",
    "aggregate_step", "aggregate_all", "upsample_bilinear", "heat_to_rgb",
    "draw_points", "overlay_heatmap", "png_bytes", "render_step_overlays",
    "whitespace_tokens", "synthesize_dump",
]
