"""Shared value types: rasters, landmarks, boxes, seeded randomness, size chart."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np
from PIL import Image

from papmask.errors import DataError, InvalidMeasurement

ROLE_NAMES: dict[str, tuple[str, ...]] = {
    "nose": ("nose_left", "nose_right"),
    "coin": ("coin_left", "coin_right"),
    "anchors": ("eye_left", "eye_right", "nose_tip"),
}

# left/right partners swapped by a horizontal mirror
MIRROR_PAIRS: dict[str, str] = {
    "nose_left": "nose_right",
    "coin_left": "coin_right",
    "eye_left": "eye_right",
    "brow_left": "brow_right",
}
MIRROR_PAIRS.update({v: k for k, v in list(MIRROR_PAIRS.items())})


@dataclass(frozen=True, eq=False)
class Raster:
    """An 8-bit image, stored as a read-only ``(height, width, channels)`` array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise DataError(f"raster must be HxW, HxWx1 or HxWx3, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError("raster must be at least 1x1")
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, Raster) and np.array_equal(self.data, other.data)

    __hash__ = None

    def rgb(self) -> Raster:
        if self.channels == 3:
            return self
        return Raster(np.repeat(self.data, 3, axis=2))

    def gray(self) -> np.ndarray:
        """Luma as float64, 0.299R + 0.587G + 0.114B."""
        d = self.data.astype(np.float64)
        if self.channels == 1:
            return d[:, :, 0]
        return 0.299 * d[:, :, 0] + 0.587 * d[:, :, 1] + 0.114 * d[:, :, 2]

    @classmethod
    def load(cls, path) -> Raster:
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
        return cls(arr)

    def save(self, path) -> None:
        arr = self.data[:, :, 0] if self.channels == 1 else self.data
        Image.fromarray(arr).save(Path(path), format="PNG")


class Point2(NamedTuple):
    x: float
    y: float

    def dist(self, other: Point2) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class LandmarkSet:
    """Named image-space points; ``role`` fixes which names must be present."""

    points: Mapping[str, Point2]
    role: str

    def __post_init__(self):
        if self.role not in ROLE_NAMES:
            raise DataError(f"unknown landmark role {self.role!r}")
        pts = {}
        for name, p in self.points.items():
            x, y = float(p[0]), float(p[1])
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"landmark {name} is not finite")
            pts[name] = Point2(x, y)
        missing = [n for n in ROLE_NAMES[self.role] if n not in pts]
        if missing:
            raise DataError(f"role {self.role!r} requires landmarks {missing}")
        if self.role in ("nose", "coin"):
            left, right = ROLE_NAMES[self.role]
            if pts[left].x > pts[right].x:
                raise DataError(f"{left}.x must not exceed {right}.x")
        object.__setattr__(self, "points", pts)

    def __getitem__(self, name: str) -> Point2:
        return self.points[name]

    def __contains__(self, name) -> bool:
        return name in self.points

    @property
    def names(self) -> list[str]:
        return list(self.points)

    def pair(self, role: str | None = None) -> tuple[Point2, Point2]:
        left, right = ROLE_NAMES[role or self.role][:2]
        return self.points[left], self.points[right]

    def has_role(self, role: str) -> bool:
        return all(n in self.points for n in ROLE_NAMES[role])

    def with_role(self, role: str) -> LandmarkSet:
        return LandmarkSet(self.points, role)

    def translate(self, dx: float, dy: float) -> LandmarkSet:
        return LandmarkSet({n: Point2(p.x + dx, p.y + dy) for n, p in self.points.items()}, self.role)

    def merged(self, other: Mapping[str, Point2], role: str | None = None) -> LandmarkSet:
        pts = dict(self.points)
        pts.update(other)
        return LandmarkSet(pts, role or self.role)


class BBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    @property
    def center(self) -> Point2:
        return Point2(self.x + self.w / 2, self.y + self.h / 2)

    def contains(self, other: BBox, slack: float = 1e-9) -> bool:
        return (other.x >= self.x - slack and other.y >= self.y - slack
                and other.x2 <= self.x2 + slack and other.y2 <= self.y2 + slack)

    def scaled(self, f: float) -> BBox:
        return BBox(self.x * f, self.y * f, self.w * f, self.h * f)

    def resized(self, f: float) -> BBox:
        """Scaled by ``f`` about its own centre."""
        cx, cy = self.x + self.w / 2, self.y + self.h / 2
        return BBox(cx - self.w * f / 2, cy - self.h * f / 2, self.w * f, self.h * f)

    def shifted(self, dx: float, dy: float) -> BBox:
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def clip(self, width: int, height: int) -> BBox | None:
        x0, y0 = max(self.x, 0.0), max(self.y, 0.0)
        x1, y1 = min(self.x2, float(width)), min(self.y2, float(height))
        if x1 <= x0 or y1 <= y0:
            return None
        return BBox(x0, y0, x1 - x0, y1 - y0)


def bbox_iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    # x2 - x round-off can push the ratio a few ulps past 1
    return min(1.0, inter / union)


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


class SeededRng:
    """A numpy generator bound to a 64-bit seed and a path of child labels.

    ``rng.child("split")`` always yields the same stream for the same seed,
    independent of how much the parent has been used.
    """

    def __init__(self, seed: int, path: Iterable[str] = ()):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.path = tuple(str(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(p) for p in self.path))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label) -> SeededRng:
        return SeededRng(self.seed, self.path + (str(label),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={'/'.join(self.path) or '-'})"


class SizeBin(enum.Enum):
    SMALL = "S"
    MEDIUM = "M"
    LARGE = "L"
    TOO_LARGE = "TL"

    @property
    def ordinal(self) -> int:
        return _ORDER.index(self)

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> SizeBin:
        key = text.strip().upper()
        for b in cls:
            if key in (b.value, b.name, b.label.upper()):
                return b
        raise DataError(f"unknown size {text!r} (expected S, M, L or TL)")


_ORDER = [SizeBin.SMALL, SizeBin.MEDIUM, SizeBin.LARGE, SizeBin.TOO_LARGE]
_LABELS = {
    SizeBin.SMALL: "Small",
    SizeBin.MEDIUM: "Medium",
    SizeBin.LARGE: "Large",
    SizeBin.TOO_LARGE: "Too Large",
}


@dataclass(frozen=True)
class SizeChart:
    """Mask sizes by nose width. Bins are lower-inclusive, upper-exclusive."""

    boundaries: tuple[float, float, float] = (37.0, 41.0, 45.0)
    tolerance: float = 0.05
    bins: tuple[SizeBin, ...] = field(default=tuple(_ORDER), init=False)

    def __post_init__(self):
        b = tuple(float(v) for v in self.boundaries)
        if len(b) != len(self.bins) - 1:
            raise DataError(f"size chart needs {len(self.bins) - 1} boundaries")
        if b[0] <= 0 or any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise DataError("size chart boundaries must be positive and strictly increasing")
        if not 0 <= self.tolerance < 1:
            raise DataError("tolerance must be in [0, 1)")
        object.__setattr__(self, "boundaries", b)

    def interval(self, size: SizeBin) -> tuple[float, float]:
        edges = (0.0,) + self.boundaries + (math.inf,)
        i = size.ordinal
        return edges[i], edges[i + 1]

    def classify(self, width_mm: float) -> SizeBin:
        w = float(width_mm)
        if not math.isfinite(w) or w < 0:
            raise InvalidMeasurement(f"nose width must be finite and non-negative, got {width_mm!r}")
        i = sum(1 for b in self.boundaries if w >= b)
        return self.bins[i]

    def near_boundaries(self, width_mm: float) -> list[tuple[float, SizeBin, SizeBin]]:
        """Boundaries within ``tolerance * boundary`` of the width, with the bins either side."""
        out = []
        for i, b in enumerate(self.boundaries):
            if abs(width_mm - b) <= self.tolerance * b:
                out.append((b, self.bins[i], self.bins[i + 1]))
        return out


ESON_CHART = SizeChart()


def size_bin(width_mm: float, chart: SizeChart = ESON_CHART) -> SizeBin:
    return chart.classify(width_mm)
