"""Landmark manifests: loading, writing, seeded splits, mirroring and cropping.

Manifest CSV layout::

    image,role,nose_left_x,nose_left_y,nose_right_x,nose_right_y[,width_mm][,size]

Image paths are relative to the manifest file. Any number of named points may
follow ``role``; the role only fixes which names are mandatory. A record may
leave an optional point blank.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image

from papmask.core import (
    MIRROR_PAIRS,
    ROLE_NAMES,
    BBox,
    LandmarkSet,
    Point2,
    Raster,
    SeededRng,
    SizeBin,
    size_bin,
)
from papmask.errors import DataError

SOURCES = ("public-faces", "synthetic-coin", "patient-style")
OPTIONAL_COLUMNS = ("width_mm", "size", "source")


@dataclass(frozen=True)
class SampleRecord:
    """One annotated photograph.

    ``image`` holds in-memory pixels for records that were derived rather than
    read (composites, crops); otherwise pixels are read from ``path`` on demand.
    ``flipped`` marks a lazily mirrored record.
    """

    path: Path | None
    landmarks: LandmarkSet
    width_mm: float | None = None
    size: SizeBin | None = None
    source: str = "public-faces"
    image: Raster | None = field(default=None, compare=False, repr=False)
    flipped: bool = False

    def __post_init__(self):
        if self.path is None and self.image is None:
            raise DataError("record needs an image path or in-memory pixels")
        if self.width_mm is not None and self.size is not None:
            if size_bin(self.width_mm) is not self.size:
                raise DataError(
                    f"width {self.width_mm} mm falls in {size_bin(self.width_mm).value}, "
                    f"record says {self.size.value}")

    def image_size(self) -> tuple[int, int]:
        if self.image is not None:
            return self.image.width, self.image.height
        try:
            with Image.open(self.path) as im:
                return im.size
        except OSError as exc:
            raise DataError(f"cannot read image {self.path}: {exc}") from exc

    def load(self) -> Raster:
        r = self.image if self.image is not None else Raster.load(self.path).rgb()
        if self.flipped:
            r = Raster(r.data[:, ::-1])
        return r

    def true_size(self) -> SizeBin | None:
        if self.size is not None:
            return self.size
        if self.width_mm is not None:
            return size_bin(self.width_mm)
        return None


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    role: str
    dataset_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise DataError(f"manifest {self.dataset_id or ''} is empty".replace("  ", " "))
        for i, r in enumerate(self.records):
            if not r.landmarks.has_role(self.role):
                raise DataError(f"record {i} lacks the landmarks for role {self.role!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def with_role(self, role: str) -> Manifest:
        recs = [replace(r, landmarks=r.landmarks.with_role(role)) for r in self.records]
        return Manifest(recs, role, self.dataset_id)


def _parse_header(header: list[str], path) -> tuple[list[str], list[str]]:
    if len(header) < 2 or header[0] != "image" or header[1] != "role":
        raise DataError(f"{path}: header must start with 'image,role'")
    rest = header[2:]
    optional = []
    while rest and rest[-1] in OPTIONAL_COLUMNS:
        optional.insert(0, rest.pop())
    if len(rest) % 2:
        raise DataError(f"{path}: landmark columns must come in _x/_y pairs")
    names = []
    for cx, cy in zip(rest[::2], rest[1::2]):
        if not (cx.endswith("_x") and cy.endswith("_y") and cx[:-2] == cy[:-2]):
            raise DataError(f"{path}: bad landmark column pair {cx},{cy}")
        names.append(cx[:-2])
    return names, optional


def load_manifest(path, check_images: bool = True) -> Manifest:
    """Parse a manifest CSV. Pixels are not read; only image headers, for bounds checks."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"manifest {path} is empty")
    names, optional = _parse_header([c.strip() for c in rows[0]], path)
    ncols = 2 + 2 * len(names) + len(optional)
    records = []
    role = None
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != ncols:
            raise DataError(f"{path}: row {lineno}: expected {ncols} fields, got {len(row)}")
        row = [c.strip() for c in row]
        row_role = row[1]
        if row_role not in ROLE_NAMES:
            raise DataError(f"{path}: row {lineno}: unknown role {row_role!r}")
        if role is None:
            role = row_role
        elif row_role != role:
            raise DataError(f"{path}: row {lineno}: role {row_role!r} differs from {role!r}")
        pts = {}
        for k, name in enumerate(names):
            sx, sy = row[2 + 2 * k], row[3 + 2 * k]
            if not sx and not sy:
                continue
            try:
                pts[name] = Point2(float(sx), float(sy))
            except ValueError:
                raise DataError(f"{path}: row {lineno}: bad coordinate for {name}") from None
        extras = dict(zip(optional, row[2 + 2 * len(names):]))
        try:
            lm = LandmarkSet(pts, role)
            width = float(extras["width_mm"]) if extras.get("width_mm") else None
            if width is not None and not (math.isfinite(width) and width >= 0):
                raise DataError(f"invalid width_mm {width}")
            size = SizeBin.parse(extras["size"]) if extras.get("size") else None
            source = extras.get("source") or "public-faces"
            if source not in SOURCES:
                raise DataError(f"unknown source tag {source!r}")
            rec = SampleRecord(base / row[0], lm, width, size, source)
        except DataError as exc:
            raise DataError(f"{path}: row {lineno}: {exc}") from None
        if check_images:
            try:
                w, h = rec.image_size()
            except DataError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            for name, p in lm.points.items():
                if not (0 <= p.x <= w - 1 and 0 <= p.y <= h - 1):
                    raise DataError(f"{path}: row {lineno}: landmark {name} outside {w}x{h} image")
        records.append(rec)
    if not records:
        raise DataError(f"manifest {path} is empty")
    return Manifest(records, role, dataset_id=path.stem)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    names: list[str] = []
    for r in manifest:
        for n in r.landmarks.names:
            if n not in names:
                names.append(n)
    has_w = any(r.width_mm is not None for r in manifest)
    has_s = any(r.size is not None for r in manifest)
    header = ["image", "role"] + [f"{n}_{a}" for n in names for a in "xy"]
    header += (["width_mm"] if has_w else []) + (["size"] if has_s else []) + ["source"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in manifest:
            if r.path is None or r.flipped or r.image is not None:
                raise DataError("only file-backed, unflipped records can be written to a manifest")
            try:
                rel = Path(r.path).resolve().relative_to(path.parent.resolve())
            except ValueError:
                rel = Path(r.path).resolve()
            row = [rel.as_posix(), manifest.role]
            for n in names:
                if n in r.landmarks:
                    p = r.landmarks[n]
                    row += [repr(p.x), repr(p.y)]
                else:
                    row += ["", ""]
            if has_w:
                row.append("" if r.width_mm is None else repr(r.width_mm))
            if has_s:
                row.append("" if r.size is None else r.size.value)
            row.append(r.source)
            wr.writerow(row)


def split_counts(n: int, train_fraction: float) -> int:
    if not 0 < train_fraction < 1:
        raise DataError(f"train fraction must lie strictly between 0 and 1, got {train_fraction}")
    return int(math.floor(n * train_fraction + 0.5))


def split_indices(n: int, train_fraction: float, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    k = split_counts(n, train_fraction)
    perm = rng.child("split").permutation(n)
    return perm[:k], perm[k:]


def split(manifest: Manifest, train_fraction: float, rng: SeededRng) -> tuple[Manifest, Manifest]:
    """Shuffle with the ``split`` child stream, then cut at round-half-up of n * fraction.

    Either side may be empty for tiny manifests, in which case a list is returned for it.
    """
    tr, va = split_indices(len(manifest), train_fraction, rng)

    def sub(idx, tag):
        recs = [manifest.records[i] for i in idx]
        if not recs:
            return []
        return Manifest(recs, manifest.role, f"{manifest.dataset_id}:{tag}")

    return sub(tr, "train"), sub(va, "val")


def mirror_landmarks(landmarks: LandmarkSet, width: int) -> LandmarkSet:
    pts = {}
    for name, p in landmarks.points.items():
        pts[MIRROR_PAIRS.get(name, name)] = Point2((width - 1) - p.x, p.y)
    return LandmarkSet(pts, landmarks.role)


def flip_pair(raster: Raster, landmarks: LandmarkSet | None) -> tuple[Raster, LandmarkSet | None]:
    flipped = Raster(raster.data[:, ::-1])
    if landmarks is None:
        return flipped, None
    return flipped, mirror_landmarks(landmarks, raster.width)


def flip_horizontal(sample: SampleRecord) -> SampleRecord:
    """Mirror left/right: ``x' = (W - 1) - x`` and left/right names swapped."""
    w, _ = sample.image_size()
    return replace(sample, landmarks=mirror_landmarks(sample.landmarks, w),
                   flipped=not sample.flipped)


def augment_with_flips(manifest: Manifest) -> Manifest:
    recs = list(manifest.records) + [flip_horizontal(r) for r in manifest.records]
    return Manifest(recs, manifest.role, f"{manifest.dataset_id}+flip")


class Crop(NamedTuple):
    raster: Raster
    landmarks: LandmarkSet | None
    box: BBox
    outside: frozenset


def crop_raster(raster: Raster, box: BBox, landmarks: LandmarkSet | None = None) -> Crop:
    """Cut ``box`` (rounded to whole pixels, clipped to the image) out of ``raster``.

    Landmarks are shifted into crop coordinates; ``outside`` names any that fall
    outside the cut region. ``box`` in the result is the region actually cut.
    """
    x0, y0 = int(math.floor(box.x + 0.5)), int(math.floor(box.y + 0.5))
    x1, y1 = int(math.floor(box.x2 + 0.5)), int(math.floor(box.y2 + 0.5))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, raster.width), min(y1, raster.height)
    if x1 <= x0 or y1 <= y0:
        raise DataError(f"crop box {tuple(box)} lies outside the {raster.width}x{raster.height} image")
    sub = Raster(raster.data[y0:y1, x0:x1])
    moved = None
    outside = frozenset()
    if landmarks is not None:
        moved = landmarks.translate(-x0, -y0)
        outside = frozenset(n for n, p in moved.points.items()
                            if not (0 <= p.x <= sub.width - 1 and 0 <= p.y <= sub.height - 1))
    return Crop(sub, moved, BBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0)), outside)


def crop(sample: SampleRecord, box: BBox) -> Crop:
    return crop_raster(sample.load(), box, sample.landmarks)


def uncrop_landmarks(landmarks: LandmarkSet, c: Crop) -> LandmarkSet:
    return landmarks.translate(c.box.x, c.box.y)


def records_from(items: Sequence[SampleRecord], role: str, dataset_id: str = "") -> Manifest:
    return Manifest(tuple(items), role, dataset_id)
