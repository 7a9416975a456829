"""Procedural test corpus: cartoon faces with known nose width, plus coin artwork.

Every face is drawn at a known scale (pixels per millimetre) with a 63 mm
eye distance, so a coin composited with the default eye-distance ratio comes
out at exactly 28.65 mm and the nose width in millimetres is known exactly.
This stands in for real annotated photographs in end-to-end tests and demos.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from papmask.core import ESON_CHART, LandmarkSet, Point2, Raster, SeededRng, SizeBin, size_bin
from papmask.imageops import gaussian_blur, to_uint8
from papmask.ingest import Manifest, SampleRecord, write_manifest
from papmask.synthgen import MEAN_IPD_MM, CoinAsset, SynthConfig, generate_dataset

SKIN_TONES = np.array([
    [233, 196, 170], [224, 172, 138], [198, 145, 110], [170, 120, 86],
    [141, 95, 66], [245, 208, 185], [210, 160, 120], [120, 80, 55],
], dtype=np.float64)

# central bands of each size bin, at least 1.5 mm from any boundary
BIN_CORES = {
    SizeBin.SMALL: (30.0, 35.5),
    SizeBin.MEDIUM: (38.5, 39.5),
    SizeBin.LARGE: (42.5, 43.5),
    SizeBin.TOO_LARGE: (46.5, 52.0),
}


@dataclass(frozen=True)
class SceneTruth:
    px_per_mm: float
    nose_width_mm: float
    face_center: Point2


class _Canvas:
    """Float RGB canvas addressed in millimetres; shapes only touch their bounding box."""

    def __init__(self, h, w, ox, oy, ppm):
        self.img = np.zeros((h, w, 3))
        self.ox, self.oy, self.ppm = ox, oy, ppm
        self.xs = (np.arange(w) - ox) / ppm
        self.ys = (np.arange(h) - oy) / ppm
        self.soft = 1.0 / ppm

    def _window(self, x0, y0, x1, y1):
        pad = 2
        c0 = max(0, int(math.floor(x0 * self.ppm + self.ox)) - pad)
        c1 = min(len(self.xs), int(math.ceil(x1 * self.ppm + self.ox)) + pad + 1)
        r0 = max(0, int(math.floor(y0 * self.ppm + self.oy)) - pad)
        r1 = min(len(self.ys), int(math.ceil(y1 * self.ppm + self.oy)) + pad + 1)
        return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))

    def paint(self, alpha, colour, where=(slice(None), slice(None))):
        a = alpha[:, :, None]
        region = self.img[where]
        self.img[where] = region * (1 - a) + np.asarray(colour, dtype=np.float64) * a

    def ellipse(self, cx, cy, a, b, colour, angle=0.0, strength=1.0):
        r = max(a, b)
        where = self._window(cx - r, cy - r, cx + r, cy + r)
        self.paint(self.ellipse_alpha(cx, cy, a, b, angle, where) * strength, colour, where)

    def ellipse_alpha(self, cx, cy, a, b, angle=0.0, where=(slice(None), slice(None))):
        u = (self.xs[where[1]] - cx)[None, :]
        v = (self.ys[where[0]] - cy)[:, None]
        if angle:
            c, s = math.cos(angle), math.sin(angle)
            u, v = c * u + s * v, -s * u + c * v
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        dist = (rho - 1.0) * min(a, b)
        return np.clip(0.5 - dist / self.soft, 0.0, 1.0)

    def rect(self, x0, y0, x1, y1, colour, strength=1.0):
        where = self._window(x0, y0, x1, y1)
        xs, ys = self.xs[where[1]], self.ys[where[0]]
        ax = np.clip(np.minimum(xs - x0, x1 - xs) / self.soft + 0.5, 0, 1)[None, :]
        ay = np.clip(np.minimum(ys - y0, y1 - ys) / self.soft + 0.5, 0, 1)[:, None]
        self.paint(ax * ay * strength, colour, where)


def schematic_face(rng: SeededRng, nose_width_mm: float, px_per_mm: float,
                   style: str = "public") -> tuple[Raster, LandmarkSet, SceneTruth]:
    """Draw one upright cartoon face.

    Landmarks (role ``nose``) include the eye centres, brows and nose tip.
    ``style="patient"`` shifts the palette and lighting to mimic a second
    camera setup for transfer-learning tests.
    """
    g = rng.gen
    ppm = float(px_per_mm)
    w_mm, h_mm = 210.0, 270.0
    w, h = int(round(w_mm * ppm)), int(round(h_mm * ppm))
    fx = w_mm / 2 + g.uniform(-15, 15)
    fy = 112.0 + g.uniform(-10, 10)
    cv = _Canvas(h, w, fx * ppm, fy * ppm, ppm)

    # background: two-tone gradient plus clutter
    c1, c2 = g.uniform(40, 220, 3), g.uniform(40, 220, 3)
    t = np.clip((cv.ys + fy) / h_mm, 0, 1)[:, None, None]
    cv.img = np.broadcast_to(c1 * (1 - t) + c2 * t, cv.img.shape).copy()
    for _ in range(int(g.integers(3, 8))):
        x0, y0 = g.uniform(-fx, w_mm - fx), g.uniform(-fy, h_mm - fy)
        cv.rect(x0, y0, x0 + g.uniform(10, 60), y0 + g.uniform(10, 60), g.uniform(0, 255, 3), 0.8)
    for _ in range(int(g.integers(1, 4))):
        cv.ellipse(g.uniform(-fx, w_mm - fx), g.uniform(-fy, h_mm - fy), g.uniform(5, 25),
                   g.uniform(5, 25), g.uniform(0, 255, 3), strength=0.7)

    skin = SKIN_TONES[int(g.integers(len(SKIN_TONES)))] * g.uniform(0.92, 1.06)
    if style == "patient":
        skin = skin * np.array([1.04, 0.97, 0.92])
    skin = np.clip(skin, 0, 255)
    hair = g.uniform(10, 90) * np.array([1.0, 0.8, 0.6]) * g.uniform(0.6, 1.4)
    a, b = 72.0 + g.uniform(-4, 4), 100.0 + g.uniform(-5, 5)

    cv.rect(-30, 95, 30, 200, skin * 0.93)  # neck
    cv.ellipse(-a + 2, 15, 9, 16, skin * 0.95)  # ears
    cv.ellipse(a - 2, 15, 9, 16, skin * 0.95)
    cv.ellipse(0, 15, a, b, skin)  # head
    where = cv._window(-a, 15 - b, a, 15 + b)
    head = cv.ellipse_alpha(0, 15, a, b, where=where)
    cap = np.clip(0.5 - (cv.ys[where[0]][:, None] + 74 + 4 * np.sin(cv.xs[where[1]][None, :] / 9)) / cv.soft, 0, 1)
    cv.paint(head * cap, hair, where)

    half_ipd = MEAN_IPD_MM / 2
    for s in (-1, 1):
        cv.ellipse(s * half_ipd, -14, 15, 2.6, hair * 0.9, angle=s * 0.08)  # brows
        cv.ellipse(s * half_ipd, 0, 14, 6, (240, 240, 235))
        cv.ellipse(s * half_ipd, 0, 5, 5, g.uniform(30, 120, 3))
        cv.ellipse(s * half_ipd, 0, 2, 2, (15, 15, 15))

    nw = float(nose_width_mm)
    cv.rect(-7, 4, -5.5, 38, skin * 0.86)  # bridge sides
    cv.rect(5.5, 4, 7, 38, skin * 0.86)
    cv.ellipse(0, 44, nw / 2, 8.0, skin * 0.80)  # alae
    cv.ellipse(0, 40, 7.5, 6.5, np.clip(skin * 1.05, 0, 255))  # tip highlight
    for s in (-1, 1):
        cv.ellipse(s * nw / 4.2, 47.5, nw / 8.5, 2.8, skin * 0.35)  # nostrils
    cv.ellipse(0, 72, 24, 5.5, (165, 60, 65))
    cv.rect(-22, 71.6, 22, 72.4, (90, 30, 35))

    light = 1.0
    if style == "patient":
        # side lighting
        light = 0.85 + 0.3 * np.clip((cv.xs + 100) / 200, 0, 1)[None, :, None]
    img = cv.img * light + g.normal(0, 2.0, cv.img.shape)
    img = gaussian_blur(img, 0.6)

    px = lambda x, y: Point2(fx * ppm + x * ppm, fy * ppm + y * ppm)  # noqa: E731
    pts = {
        "nose_left": px(-nw / 2, 44), "nose_right": px(nw / 2, 44),
        "eye_left": px(-half_ipd, 0), "eye_right": px(half_ipd, 0),
        "brow_left": px(-half_ipd, -14), "brow_right": px(half_ipd, -14),
        "nose_tip": px(0, 40),
    }
    truth = SceneTruth(ppm, nw, px(0, 0))
    return Raster(to_uint8(img)), LandmarkSet(pts, "nose"), truth


def coin_assets(rng: SeededRng, per_side: int = 6, size: int = 128) -> list[CoinAsset]:
    """Coin artwork: ``per_side`` heads and tails variants, each inscribed in a square image."""
    out = []
    for side in ("heads", "tails"):
        for k in range(per_side):
            g = rng.child(f"{side}{k}").gen
            r = size / 2 - 0.5
            c = (size - 1) / 2
            yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
            u, v = (xx - c) / r, (yy - c) / r
            rho = np.hypot(u, v)
            metal = np.array([178, 178, 186]) * g.uniform(0.85, 1.08) + g.uniform(-12, 12, 3)
            img = metal * (1.0 - 0.18 * rho[:, :, None] ** 2)
            rim = ((rho > 0.86) & (rho < 0.93))[:, :, None]
            img = np.where(rim, img * 0.6, img)
            if side == "heads":
                prof = ((u + 0.05) / 0.38) ** 2 + ((v - 0.02) / 0.55) ** 2 < 1
                img = np.where(prof[:, :, None], img * 1.12, img)
                for j in range(18):
                    t = math.pi * (0.1 + 0.8 * j / 17) + g.uniform(-0.02, 0.02)
                    dot = np.hypot(u - 0.76 * math.cos(t), v + 0.76 * math.sin(t)) < 0.035
                    img = np.where(dot[:, :, None], img * 0.7, img)
            else:
                body = ((u / 0.5) ** 2 + ((v + 0.05) / 0.22) ** 2) < 1
                bill = (((u - 0.55) / 0.18) ** 2 + ((v + 0.05) / 0.1) ** 2) < 1
                tail = (((u + 0.55) / 0.15) ** 2 + ((v + 0.05) / 0.12) ** 2) < 1
                shape = (body | bill | tail)[:, :, None]
                img = np.where(shape, img * g.uniform(0.7, 0.82), img)
                ripple = (np.sin(v * 25 + g.uniform(0, 6)) > 0.7) & (v > 0.35) & (rho < 0.8)
                img = np.where(ripple[:, :, None], img * 0.85, img)
            img = img + g.normal(0, 3.0, img.shape)
            out.append(CoinAsset.inscribed(Raster(to_uint8(img)), side, f"{side}{k}"))
    return out


def draw_width(rng: SeededRng, index: int, mode: str = "bin-core") -> float:
    """Nose width for corpus item ``index``.

    ``bin-core`` cycles through the four sizes and draws from each bin's
    central band; ``uniform`` draws from 30-52 mm.
    """
    g = rng.gen
    if mode == "uniform":
        return float(g.uniform(30.0, 52.0))
    lo, hi = BIN_CORES[list(BIN_CORES)[index % 4]]
    return float(g.uniform(lo, hi))


def build_corpus(out_dir, n: int, rng: SeededRng, *, ppm_range=(1.5, 1.9), style: str = "public",
                 widths: str = "bin-core", with_coin: bool = True,
                 cfg: SynthConfig | None = None, log=None) -> Manifest:
    """Write ``n`` schematic scenes and a manifest with ground-truth width and size.

    With ``with_coin`` the faces go through the coin compositor and the
    returned manifest has role ``coin`` (nose points still included);
    otherwise it has role ``nose``.
    """
    out_dir = Path(out_dir)
    face_dir = out_dir / "faces"
    face_dir.mkdir(parents=True, exist_ok=True)
    recs = []
    source = "patient-style" if style == "patient" else "public-faces"
    for i in range(n):
        frng = rng.child(f"scene{i}")
        width = draw_width(frng.child("width"), i, widths)
        ppm = float(frng.child("scale").uniform(*ppm_range))
        img, lm, _ = schematic_face(frng.child("draw"), width, ppm, style)
        path = face_dir / f"face_{i:05d}.png"
        img.save(path)
        recs.append(SampleRecord(path, lm, round(width, 6), size_bin(width, ESON_CHART), source))
    faces = Manifest(recs, "nose", dataset_id=out_dir.name)
    write_manifest(faces, face_dir / "manifest.csv")
    if not with_coin:
        return faces
    assets = coin_assets(rng.child("assets"))
    coins = generate_dataset(faces, assets, cfg or SynthConfig(), rng.child("coins"),
                             out_dir / "scenes", log=log)
    scenes = Manifest([SampleRecord(r.path, r.landmarks, r.width_mm, r.size, source) for r in coins],
                      "coin", dataset_id=out_dir.name)
    write_manifest(scenes, out_dir / "manifest.csv")
    return scenes
