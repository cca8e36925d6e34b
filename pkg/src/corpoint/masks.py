"""Binary region masks: raster representation, RLE codec, PNG I/O.

RLE convention: run counts alternate outside/inside starting with an
outside run, over the row-major flattened raster.  8-bit raster inputs
binarize at value > 127.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import CorpointError


class MaskDecodeError(CorpointError):
    code = "MaskDecode"


@dataclass(eq=False)
class MaskImage:
    """Immutable boolean raster, shape (height, width), row-major."""

    width: int
    height: int
    inside: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("mask dimensions must be >= 1")
        arr = np.asarray(self.inside, dtype=bool)
        if arr.shape != (self.height, self.width):
            raise ValueError(
                f"raster shape {arr.shape} != (height, width)=({self.height}, {self.width})"
            )
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "inside", arr)

    @property
    def n_inside(self) -> int:
        return int(self.inside.sum())

    @property
    def area_fraction(self) -> float:
        return self.n_inside / (self.width * self.height)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "MaskImage":
        """Build from a 2D array; integer/float arrays binarize at > 127."""
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError("mask array must be 2D")
        inside = arr if arr.dtype == bool else arr > 127
        h, w = arr.shape
        return cls(width=w, height=h, inside=inside)

    @classmethod
    def from_rle(cls, counts: list[int], width: int, height: int) -> "MaskImage":
        total = width * height
        counts = list(counts)
        if any(c < 0 for c in counts):
            raise MaskDecodeError("negative RLE count")
        if sum(counts) != total:
            raise MaskDecodeError(
                f"RLE decodes to {sum(counts)} cells, expected {total} ({width}x{height})"
            )
        flat = np.zeros(total, dtype=bool)
        pos = 0
        value = False  # runs start with an outside run
        for c in counts:
            if value:
                flat[pos:pos + c] = True
            pos += c
            value = not value
        return cls(width=width, height=height, inside=flat.reshape(height, width))

    def to_rle(self) -> list[int]:
        flat = self.inside.ravel().astype(np.int8)
        changes = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate(([0], changes, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0]:  # leading outside run of length 0
            runs.insert(0, 0)
        return [int(r) for r in runs]

    @classmethod
    def from_png(cls, path) -> "MaskImage":
        img = Image.open(path).convert("L")
        return cls.from_array(np.asarray(img))

    def to_png(self, path) -> None:
        arr = np.where(self.inside, 255, 0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path, format="PNG")
