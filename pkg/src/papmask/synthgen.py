"""Composite coin images onto face photographs to make coin-annotated training data.

Per sample: scale the coin to the face (from eye distance), rotate it,
paste it above the face in line with the nose tip with a random offset,
blur the coin region and jitter its brightness and contrast.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from papmask.core import LandmarkSet, Point2, Raster, SeededRng
from papmask.errors import DataError, SampleSkipped
from papmask.imageops import gaussian_blur, to_uint8
from papmask.ingest import Manifest, SampleRecord, write_manifest

COIN_DIAMETER_MM = 28.65
MEAN_IPD_MM = 63.0
MEAN_INNER_CANTHAL_MM = 35.0


@dataclass(frozen=True)
class CoinAsset:
    raster: Raster
    cx: float
    cy: float
    radius: float
    side: str = "heads"
    name: str = ""

    def __post_init__(self):
        r = self.raster
        if self.radius <= 0:
            raise DataError("coin radius must be positive")
        if (self.cx - self.radius < -0.5 or self.cy - self.radius < -0.5
                or self.cx + self.radius > r.width - 0.5 or self.cy + self.radius > r.height - 0.5):
            raise DataError(f"coin circle of asset {self.name!r} is not inside its image")

    @classmethod
    def inscribed(cls, raster: Raster, side: str = "heads", name: str = "") -> CoinAsset:
        """Asset whose coin fills the image: centred, radius half the shorter side."""
        return cls(raster.rgb(), (raster.width - 1) / 2, (raster.height - 1) / 2,
                   min(raster.width, raster.height) / 2 - 0.5, side, name)


@dataclass(frozen=True)
class SynthConfig:
    rotation_deg: tuple[float, float] = (-60.0, 60.0)
    blur_sigma: tuple[float, float] = (1.0, 4.0)  # open interval
    jitter: float = 0.20
    offset_x: tuple[float, float] = (-0.5, 0.5)  # fractions of coin diameter
    offset_y: tuple[float, float] = (-0.5, 0.5)
    lift: float = 0.75  # base centre sits this many diameters above the highest landmark
    r_ipd: float = COIN_DIAMETER_MM / MEAN_IPD_MM
    r_inner: float = COIN_DIAMETER_MM / MEAN_INNER_CANTHAL_MM
    coin_mm: float = COIN_DIAMETER_MM
    max_tries: int = 10

    def __post_init__(self):
        for name in ("rotation_deg", "blur_sigma", "offset_x", "offset_y"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise DataError(f"{name} range must be increasing")
        if self.blur_sigma[0] < 0:
            raise DataError("blur sigma must be non-negative")
        if not 0 <= self.jitter < 1:
            raise DataError("jitter fraction must lie in [0, 1)")
        if self.r_ipd <= 0 or self.r_inner <= 0 or self.coin_mm <= 0:
            raise DataError("scale ratios and coin size must be positive")


class CoinMeta(NamedTuple):
    asset: str
    angle: float
    sigma: float
    brightness: float
    contrast: float
    dx: float
    dy: float
    diameter: float
    tries: int


class Placement(NamedTuple):
    record: SampleRecord
    meta: CoinMeta


def target_coin_diameter_px(anchors: LandmarkSet, mode: str = "ipd", cfg: SynthConfig = SynthConfig()) -> float:
    """Coin diameter for a face: eye distance times the ratio for ``mode``.

    ``ipd`` expects eye centres, ``inner_corner`` the inner eye corners, both
    under the names ``eye_left``/``eye_right``.
    """
    if "eye_left" not in anchors or "eye_right" not in anchors:
        raise DataError("eye anchors are required to size the coin")
    d = anchors["eye_left"].dist(anchors["eye_right"])
    if not d > 0:
        raise DataError("degenerate eye anchors: zero eye distance")
    if mode == "ipd":
        return d * cfg.r_ipd
    if mode == "inner_corner":
        return d * cfg.r_inner
    raise DataError(f"unknown scale mode {mode!r}")


def _open_uniform(gen, lo, hi):
    v = gen.uniform(lo, hi)
    while not lo < v < hi:
        v = gen.uniform(lo, hi)
    return v


def render_coin(asset: CoinAsset, diameter: float, angle_deg: float, cx: float, cy: float,
                shape: tuple[int, int]):
    """Scaled, rotated coin pixels and its hard disc mask over an ``(h, w)`` canvas region.

    Returns ``(y0, x0, rgb, mask)`` for the disc's bounding square clipped to the canvas.
    """
    h, w = shape
    r = diameter / 2.0
    y0, y1 = max(0, int(math.floor(cy - r))), min(h, int(math.ceil(cy + r)) + 1)
    x0, x1 = max(0, int(math.floor(cx - r))), min(w, int(math.ceil(cx + r)) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    u, v = xx - cx, yy - cy
    mask = u * u + v * v <= r * r
    k = asset.radius / r
    t = math.radians(angle_deg)
    # inverse rotation into asset coordinates (y down, positive angle = counter-clockwise on screen)
    au = (math.cos(t) * u - math.sin(t) * v) * k + asset.cx
    av = (math.sin(t) * u + math.cos(t) * v) * k + asset.cy
    src = asset.raster.data.astype(np.float64)
    if k > 1:
        src = gaussian_blur(src, (k - 1) / 2)
    rgb = np.stack([ndimage.map_coordinates(src[:, :, ch], [av, au], order=1, mode="nearest")
                    for ch in range(src.shape[2])], axis=-1)
    return y0, x0, rgb, mask


def place_coin(face: SampleRecord, asset: CoinAsset, cfg: SynthConfig, rng: SeededRng,
               mode: str = "ipd") -> Placement:
    """Composite one coin onto ``face``; the result carries coin-role landmarks.

    ``coin_left``/``coin_right`` are the disc's horizontal extremes through its
    centre, exactly one target diameter apart. Raises ``SampleSkipped`` when no
    in-bounds offset is found within ``cfg.max_tries`` draws.
    """
    lm = face.landmarks
    for name in ("eye_left", "eye_right", "nose_tip"):
        if name not in lm:
            raise DataError(f"face record lacks anchor {name}")
    img = face.load().rgb()
    h, w = img.height, img.width
    d = target_coin_diameter_px(lm, mode, cfg)
    r = d / 2.0
    gen = rng.gen
    angle = gen.uniform(*cfg.rotation_deg)
    sigma = _open_uniform(gen, *cfg.blur_sigma)
    bright = gen.uniform(-cfg.jitter, cfg.jitter)
    contrast = gen.uniform(-cfg.jitter, cfg.jitter)
    base_x = lm["nose_tip"].x
    base_y = min(p.y for p in lm.points.values()) - cfg.lift * d
    for tries in range(1, cfg.max_tries + 1):
        dx = gen.uniform(*cfg.offset_x) * d
        dy = gen.uniform(*cfg.offset_y) * d
        cx, cy = base_x + dx, base_y + dy
        if cx - r >= 0 and cy - r >= 0 and cx + r <= w - 1 and cy + r <= h - 1:
            break
    else:
        raise SampleSkipped(f"no in-bounds coin position after {cfg.max_tries} tries")

    out = img.data.astype(np.float64)
    y0, x0, rgb, mask = render_coin(asset, d, angle, cx, cy, (h, w))
    region = out[y0:y0 + mask.shape[0], x0:x0 + mask.shape[1]]
    region[mask] = rgb[mask]

    reach = r + 3.0 * sigma
    pad = 2 * math.ceil(3.0 * sigma) + 1
    py0, py1 = max(0, int(math.floor(cy - r)) - pad), min(h, int(math.ceil(cy + r)) + pad + 1)
    px0, px1 = max(0, int(math.floor(cx - r)) - pad), min(w, int(math.ceil(cx + r)) + pad + 1)
    yy, xx = np.mgrid[py0:py1, px0:px1].astype(np.float64)
    dist2 = (xx - cx) ** 2 + (yy - cy) ** 2
    hard = (dist2 <= r * r).astype(np.float64)
    inside = dist2 <= reach * reach

    patch = out[py0:py1, px0:px1]
    blurred = gaussian_blur(patch, sigma)
    soft = gaussian_blur(hard, sigma)[:, :, None]
    jittered = (blurred - 128.0) * (1.0 + contrast) + 128.0 + 255.0 * bright
    mixed = blurred + soft * (jittered - blurred)
    patch[inside] = mixed[inside]
    out[py0:py1, px0:px1] = patch

    coin_pts = {"coin_left": Point2(cx - r, cy), "coin_right": Point2(cx + r, cy)}
    rec = replace(face, path=None, image=Raster(to_uint8(out)), flipped=False,
                  landmarks=lm.merged(coin_pts, role="coin"), source="synthetic-coin")
    meta = CoinMeta(asset.name, angle, sigma, bright, contrast, dx, dy, d, tries)
    return Placement(rec, meta)


META_FIELDS = ("index", "image") + CoinMeta._fields


def generate_dataset(faces: Manifest | Sequence[SampleRecord], assets: Sequence[CoinAsset],
                     cfg: SynthConfig, rng: SeededRng, out_dir, mode: str = "ipd",
                     log=None) -> Manifest:
    """One composite per face, asset drawn uniformly; writes PNGs, manifest.csv and metadata.csv.

    Each face uses its own child stream so results do not depend on processing order.
    """
    if not assets:
        raise DataError("at least one coin asset is required")
    faces = list(faces)
    if not faces:
        raise DataError("at least one face is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, metas = [], []
    skipped = 0
    for i, face in enumerate(faces):
        frng = rng.child(f"face{i}")
        asset = assets[int(frng.child("asset").integers(len(assets)))]
        try:
            rec, meta = place_coin(face, asset, cfg, frng.child("place"), mode)
        except SampleSkipped as exc:
            skipped += 1
            if log:
                log(f"face {i}: skipped ({exc})")
            continue
        path = out_dir / f"coin_{i:05d}.png"
        rec.image.save(path)
        records.append(replace(rec, path=path, image=None))
        metas.append((i, path.name) + tuple(meta))
    if not records:
        raise DataError("every sample was skipped; no coin fits inside the images")
    manifest = Manifest(records, "coin", dataset_id=out_dir.name)
    write_manifest(manifest, out_dir / "manifest.csv")
    with open(out_dir / "metadata.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(META_FIELDS)
        for row in metas:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in row])
    if log and skipped:
        log(f"{skipped} of {len(faces)} faces skipped")
    return manifest


def load_assets(directory) -> list[CoinAsset]:
    """Coin images from a directory.

    ``assets.csv`` (``image,cx,cy,radius,side``) declares circles explicitly;
    otherwise every PNG is taken as an inscribed coin, side read from a
    ``heads``/``tails`` filename prefix.
    """
    directory = Path(directory)
    table = directory / "assets.csv"
    assets = []
    if table.is_file():
        with open(table, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    r = Raster.load(directory / row["image"]).rgb()
                    assets.append(CoinAsset(r, float(row["cx"]), float(row["cy"]), float(row["radius"]),
                                            row.get("side") or "heads", row["image"]))
                except (KeyError, ValueError) as exc:
                    raise DataError(f"{table}: row {lineno}: {exc}") from None
    else:
        for p in sorted(directory.glob("*.png")):
            side = "tails" if p.name.startswith("tails") else "heads"
            assets.append(CoinAsset.inscribed(Raster.load(p), side, p.name))
    if not assets:
        raise DataError(f"no coin assets found in {directory}")
    return assets
