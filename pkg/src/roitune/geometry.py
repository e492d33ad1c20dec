"""Boxes in image pixel space.

Corner convention ``(x1, y1, x2, y2)``, x to the right and y down, far edge
exclusive. COCO ``(x, y, w, h)`` boxes are converted once at ingestion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DegenerateBox, InputError, NonFinite

MIN_EXTENT = 1e-6


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InputError(f"image size must be integral, got {self.width}x{self.height}")
        if self.width < 1 or self.height < 1:
            raise InputError(f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def parse(cls, text: str) -> "ImageSize":
        """Parse ``"WxH"`` or ``"W,H"``."""
        parts = text.replace("x", ",").split(",")
        if len(parts) != 2:
            raise InputError(f"cannot parse image size {text!r}")
        return cls(int(parts[0]), int(parts[1]))


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in self.as_tuple():
            if not math.isfinite(v):
                raise NonFinite(f"non-finite box coordinate in {self.as_tuple()}")

    @classmethod
    def of(cls, coords: Sequence[float]) -> "Box":
        if len(coords) != 4:
            raise InputError(f"box needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    @classmethod
    def from_xywh(cls, coords: Sequence[float]) -> "Box":
        x, y, w, h = (float(c) for c in coords)
        return cls(x, y, x + w, y + h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def scaled(self, sx: float, sy: float | None = None) -> "Box":
        sy = sx if sy is None else sy
        return Box(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)


def validate_box(b: Box | Iterable[float], s: ImageSize) -> Box:
    """Clamp ``b`` to the image and reject anything left without area."""
    if not isinstance(b, Box):
        b = Box.of(list(b))
    x1 = min(max(b.x1, 0.0), float(s.width))
    x2 = min(max(b.x2, 0.0), float(s.width))
    y1 = min(max(b.y1, 0.0), float(s.height))
    y2 = min(max(b.y2, 0.0), float(s.height))
    if x2 - x1 < MIN_EXTENT or y2 - y1 < MIN_EXTENT:
        raise DegenerateBox(f"box {b.as_tuple()} is degenerate in a {s.width}x{s.height} image")
    return Box(x1, y1, x2, y2)


def normalize_box(b: Box, s: ImageSize) -> Box:
    b = validate_box(b, s)
    return Box(b.x1 / s.width, b.y1 / s.height, b.x2 / s.width, b.y2 / s.height)


def denormalize_box(b: Box, s: ImageSize) -> Box:
    return Box(b.x1 * s.width, b.y1 * s.height, b.x2 * s.width, b.y2 * s.height)
