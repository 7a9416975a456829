"""From photograph to mask size: detect, crop, regress landmarks, scale, classify.

Also holds the training-side glue: reference boxes derived from landmarks,
building CNN training tensors from a manifest, and fine-tuning on a new set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from papmask import hogdet, nnet
from papmask.core import (
    ESON_CHART,
    ROLE_NAMES,
    BBox,
    LandmarkSet,
    Point2,
    Raster,
    SeededRng,
    SizeBin,
    SizeChart,
    bbox_iou,
)
from papmask.errors import DataError, InvalidMeasurement, StageFailure
from papmask.hogdet import DetectorModel, HogParams
from papmask.imageops import resample
from papmask.ingest import Manifest, SampleRecord, crop_raster, flip_pair, split
from papmask.synthgen import COIN_DIAMETER_MM, MEAN_IPD_MM

TARGET = 42

# reference boxes, as multiples of the eye distance or the landmark pair distance
FACE_BOX_IPD = 2.2
FACE_CENTER_DROP_IPD = 0.55
NOSE_BOX_IPD = 60.0 / MEAN_IPD_MM
NOSE_BOX_PAIR = 1.6
COIN_BOX_PAIR = 1.3

MODEL_FILES = {
    "face": "face.hogd",
    "nose": "nose.hogd",
    "coin": "coin.hogd",
    "nose_cnn": "nose.papw",
    "coin_cnn": "coin.papw",
}


# -- geometry ------------------------------------------------------------------

def _aspect(params: HogParams) -> float:
    w, h = params.window_px
    return h / w


def reference_box(landmarks: LandmarkSet, cls: str, params: HogParams | None = None) -> BBox:
    """Box a detector of class ``cls`` should fire on, derived from annotations.

    Face and nose boxes scale with the eye distance when both eyes are known,
    so the nose occupies a width-dependent fraction of its box.
    """
    params = params or hogdet.DEFAULT_PARAMS[cls]
    aspect = _aspect(params)
    eyes = "eye_left" in landmarks and "eye_right" in landmarks
    if cls == "face":
        if not eyes:
            raise DataError("face reference box needs eye landmarks")
        el, er = landmarks["eye_left"], landmarks["eye_right"]
        ipd = el.dist(er)
        cx, cy = (el.x + er.x) / 2, (el.y + er.y) / 2 + FACE_CENTER_DROP_IPD * ipd
        w = FACE_BOX_IPD * ipd
    elif cls in ("nose", "coin"):
        left, right = landmarks.pair(cls)
        cx, cy = (left.x + right.x) / 2, (left.y + right.y) / 2
        if cls == "nose" and eyes:
            w = NOSE_BOX_IPD * landmarks["eye_left"].dist(landmarks["eye_right"])
        else:
            w = (NOSE_BOX_PAIR if cls == "nose" else COIN_BOX_PAIR) * left.dist(right)
    else:
        raise DataError(f"unknown detector class {cls!r}")
    h = w * aspect
    return BBox(cx - w / 2, cy - h / 2, w, h)


@dataclass(frozen=True)
class CropTransform:
    """Affine map between image pixels and the 42x42 network input.

    ``tensor = (image - box.xy) * scale + pad``; content is anchored top-left,
    so ``pad`` is (0, 0) unless configured otherwise.
    """

    box: BBox
    scale: float
    pad: tuple[float, float] = (0.0, 0.0)
    size: int = TARGET

    def to_tensor(self, p: Point2) -> Point2:
        return Point2((p.x - self.box.x) * self.scale + self.pad[0],
                      (p.y - self.box.y) * self.scale + self.pad[1])

    def to_image(self, p: Point2) -> Point2:
        return Point2((p.x - self.pad[0]) / self.scale + self.box.x,
                      (p.y - self.pad[1]) / self.scale + self.box.y)


class Prepared(NamedTuple):
    tensor: np.ndarray  # 3 x 42 x 42, raw 0..255 values
    transform: CropTransform
    target: np.ndarray | None  # [x1, y1, x2, y2] in tensor pixels


def preprocess_crop(crop: Raster, landmarks: LandmarkSet | None = None,
                    origin: BBox | None = None) -> Prepared:
    """Shrink/grow the crop so its longer side is 42 px, zero-fill the rest (right/bottom).

    ``origin`` is the crop's placement in the source image; without it the
    transform maps crop coordinates.
    """
    w, h = crop.width, crop.height
    s = TARGET / max(w, h)
    nw = min(TARGET, max(1, int(math.floor(w * s + 0.5))))
    nh = min(TARGET, max(1, int(math.floor(h * s + 0.5))))
    img = resample(crop.rgb().data.astype(np.float64), 0.0, 0.0, s, s, nw, nh)
    canvas = np.zeros((TARGET, TARGET, 3))
    canvas[:nh, :nw] = img
    box = origin or BBox(0.0, 0.0, float(w), float(h))
    tf = CropTransform(box, s)
    target = None
    if landmarks is not None:
        left, right = landmarks.pair()
        # landmarks are crop-relative here, so map with a zero-origin transform
        local = CropTransform(BBox(0.0, 0.0, float(w), float(h)), s)
        a, b = local.to_tensor(left), local.to_tensor(right)
        target = np.array([a.x, a.y, b.x, b.y])
    return Prepared(canvas.transpose(2, 0, 1), tf, target)


def normalize(pixels: np.ndarray, stats: nnet.NormStats, coords: np.ndarray | None = None):
    """Pixels to ``v/255 - mean``; coords (training only) to ``c/41 - mean``."""
    x = np.asarray(pixels, dtype=np.float64) / stats.pixel_divisor - stats.pixel_mean
    if coords is None:
        return x
    return x, np.asarray(coords, dtype=np.float64) / stats.coord_divisor - stats.coord_mean


def denormalize_coords(pred: np.ndarray, stats: nnet.NormStats) -> np.ndarray:
    return (np.asarray(pred, dtype=np.float64) + stats.coord_mean) * stats.coord_divisor


def fit_stats(pixels: np.ndarray, coords: np.ndarray) -> nnet.NormStats:
    """Training-set means of the scaled pixels and coordinates."""
    return nnet.NormStats(pixel_mean=float(np.mean(np.asarray(pixels) / 255.0)),
                          coord_mean=float(np.mean(np.asarray(coords) / 41.0)))


# -- models --------------------------------------------------------------------

@dataclass
class StageModels:
    face: DetectorModel
    nose: DetectorModel
    coin: DetectorModel
    nose_cnn: nnet.CnnModel
    coin_cnn: nnet.CnnModel
    chart: SizeChart = ESON_CHART

    @classmethod
    def load(cls, directory, chart: SizeChart = ESON_CHART) -> StageModels:
        d = Path(directory)
        missing = [n for n in MODEL_FILES.values() if not (d / n).is_file()]
        if missing:
            raise DataError(f"model directory {d} lacks {', '.join(missing)}")
        return cls(
            hogdet.load_detector(d / MODEL_FILES["face"]),
            hogdet.load_detector(d / MODEL_FILES["nose"]),
            hogdet.load_detector(d / MODEL_FILES["coin"]),
            nnet.load_weights(d / MODEL_FILES["nose_cnn"]),
            nnet.load_weights(d / MODEL_FILES["coin_cnn"]),
            chart,
        )

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for key in ("face", "nose", "coin"):
            hogdet.save_detector(getattr(self, key), d / MODEL_FILES[key])
        nnet.save_weights(self.nose_cnn, d / MODEL_FILES["nose_cnn"])
        nnet.save_weights(self.coin_cnn, d / MODEL_FILES["coin_cnn"])


# -- prediction ----------------------------------------------------------------

class StagePrediction(NamedTuple):
    left: Point2
    right: Point2
    box: BBox
    score: float


def locate(image: Raster, detector: DetectorModel, stage: str,
           region: BBox | None = None) -> hogdet.Detection:
    det = hogdet.best_detection(hogdet.detect(image, detector, region))
    if det is None:
        raise StageFailure(stage)
    return det


def landmarks_in_box(image: Raster, box: BBox, cnn: nnet.CnnModel) -> tuple[Point2, Point2, BBox]:
    """Run the regressor on one box; points come back in image coordinates."""
    c = crop_raster(image, box)
    prep = preprocess_crop(c.raster, origin=c.box)
    out = nnet.forward(cnn, normalize(prep.tensor[None], cnn.stats))[0]
    x1, y1, x2, y2 = denormalize_coords(out, cnn.stats)
    a = prep.transform.to_image(Point2(x1, y1))
    b = prep.transform.to_image(Point2(x2, y2))
    if a.x > b.x:
        a, b = b, a
    return a, b, c.box


def predict_landmarks(image: Raster, detector: DetectorModel, cnn: nnet.CnnModel,
                      stage: str | None = None, region: BBox | None = None) -> StagePrediction:
    """Best detection, crop, regress, map back; ``StageFailure`` if nothing is detected."""
    stage = stage or detector.cls
    det = locate(image, detector, stage, region)
    a, b, _ = landmarks_in_box(image, det.box, cnn)
    return StagePrediction(a, b, det.box, det.score)


def scale_px_per_mm(coin_points: Sequence[Point2], coin_mm: float = COIN_DIAMETER_MM) -> float:
    a, b = coin_points
    d = math.hypot(b[0] - a[0], b[1] - a[1])
    if not d > 0:
        raise InvalidMeasurement("coin landmarks coincide; scale is undefined")
    return d / coin_mm


@dataclass
class SizingResult:
    nose_width_mm: float
    scale_px_per_mm: float
    size: SizeBin
    near_boundary: tuple[float, SizeBin, SizeBin] | None = None
    provenance: dict = field(default_factory=dict)
    image: str = ""

    def record(self) -> dict:
        """Flat, serialisable view used by the CLI outputs."""
        rec = {
            "image": self.image,
            "nose_width_mm": round(self.nose_width_mm, 4),
            "scale_px_per_mm": round(self.scale_px_per_mm, 6),
            "size": self.size.value,
            "near_boundary": "" if self.near_boundary is None else
            f"{self.near_boundary[0]:g}:{self.near_boundary[1].value}/{self.near_boundary[2].value}",
        }
        for key, val in self.provenance.items():
            if isinstance(val, BBox):
                rec[key] = " ".join(f"{v:.2f}" for v in val)
            elif isinstance(val, tuple) and val and isinstance(val[0], Point2):
                rec[key] = " ".join(f"{p.x:.3f} {p.y:.3f}" for p in val)
            else:
                rec[key] = val
        return rec


def recommend(nose_points: Sequence[Point2], scale: float, chart: SizeChart = ESON_CHART) -> SizingResult:
    """Nose width in mm, its size bin, and the nearest boundary within tolerance if any."""
    if not (scale > 0 and math.isfinite(scale)):
        raise InvalidMeasurement(f"scale must be positive, got {scale!r}")
    a, b = nose_points
    width = math.hypot(b[0] - a[0], b[1] - a[1]) / scale
    size = chart.classify(width)
    near = chart.near_boundaries(width)
    nearest = min(near, key=lambda t: abs(width - t[0])) if near else None
    return SizingResult(width, scale, size, nearest)


def run_pipeline(image: Raster, models: StageModels, name: str = "") -> SizingResult:
    """Face first; nose searched inside the face box, coin over the whole image."""
    face = locate(image, models.face, "face")
    nose = predict_landmarks(image, models.nose, models.nose_cnn, "nose", region=face.box)
    coin = predict_landmarks(image, models.coin, models.coin_cnn, "coin")
    scale = scale_px_per_mm((coin.left, coin.right))
    res = recommend((nose.left, nose.right), scale, models.chart)
    res.image = name
    res.provenance = {
        "face_box": face.box,
        "nose_box": nose.box,
        "coin_box": coin.box,
        "nose_points": (nose.left, nose.right),
        "coin_points": (coin.left, coin.right),
    }
    return res


# -- training glue -------------------------------------------------------------

def search_region(cls: str, landmarks: LandmarkSet, image: Raster,
                  face: DetectorModel | None = None) -> BBox | None:
    """Where the pipeline would look for ``cls``: noses inside the face box, coins everywhere."""
    if cls != "nose":
        return None
    if face is not None:
        det = hogdet.best_detection(hogdet.detect(image, face))
        if det is not None:
            return det.box
    if "eye_left" in landmarks and "eye_right" in landmarks:
        return reference_box(landmarks, "face")
    return None


def detector_positives(manifest: Manifest, cls: str, params: HogParams | None = None):
    out = []
    for rec in manifest:
        if cls in ("nose", "coin") and not rec.landmarks.has_role(cls):
            raise DataError(f"record {rec.path} lacks {cls} landmarks")
        out.append(hogdet.TrainingImage(rec.load(), (reference_box(rec.landmarks, cls, params),)))
    return out


def background_strips(images: Sequence[hogdet.TrainingImage], params: HogParams,
                      limit: int = 8) -> list[Raster]:
    """Object-free background cut from annotated images: the widest strip beside each box."""
    wpx, hpx = params.window_px
    out = []
    for ti in images:
        if len(out) >= limit:
            break
        img = ti.image
        box = ti.boxes[0]
        strips = [
            BBox(0, 0, img.width, box.y),
            BBox(0, box.y2, img.width, img.height - box.y2),
            BBox(0, 0, box.x, img.height),
            BBox(box.x2, 0, img.width - box.x2, img.height),
        ]
        strips = [s for s in strips if s.w >= wpx and s.h >= hpx
                  and not any(bbox_iou(s, b) > 0 for b in ti.boxes[1:])]
        if strips:
            best = max(strips, key=lambda s: s.area)
            out.append(crop_raster(img, best).raster)
    if not out:
        raise DataError("no background region large enough for a detector window; supply negatives")
    return out


def train_stage_detector(manifest: Manifest, cls: str, rng: SeededRng,
                         negatives: Sequence[Raster] = (), params: HogParams | None = None,
                         cfg: hogdet.SvmConfig = hogdet.SvmConfig(), log=None) -> DetectorModel:
    """Detector for ``cls`` from annotated records.

    Noses are trained and mined inside their face boxes, since that is the
    only place the pipeline looks for them.
    """
    params = params or hogdet.DEFAULT_PARAMS[cls]
    pos = detector_positives(manifest, cls, params)
    if cls == "nose":
        cropped = []
        for rec, ti in zip(manifest, pos):
            region = search_region("nose", rec.landmarks, ti.image)
            if region is None:
                cropped.append(ti)
                continue
            c = crop_raster(ti.image, region)
            cropped.append(hogdet.TrainingImage(c.raster, tuple(b.shifted(-c.box.x, -c.box.y) for b in ti.boxes)))
        pos = cropped
    negs = list(negatives) or background_strips(pos, params)
    return hogdet.train_detector(pos, negs, params, rng, cls, cfg, log)


def jitter_box(box: BBox, gen: np.random.Generator, shift: float = 0.08, scale: float = 0.1) -> BBox:
    f = math.exp(gen.uniform(-scale, scale))
    w, h = box.w * f, box.h * f
    c = box.center
    return BBox(c.x - w / 2 + gen.uniform(-shift, shift) * box.w,
                c.y - h / 2 + gen.uniform(-shift, shift) * box.h, w, h)


@dataclass
class SampleSet:
    pixels: np.ndarray  # n x 3 x 42 x 42, raw
    coords: np.ndarray  # n x 4, tensor pixels

    def __len__(self):
        return len(self.pixels)


def build_samples(records: Sequence[SampleRecord], cls: str, rng: SeededRng,
                  detector: DetectorModel | None = None, face: DetectorModel | None = None,
                  jitters: int = 1, flip: bool = True) -> SampleSet:
    """Network inputs and targets for ``cls`` from annotated records.

    Each record contributes its detector box (when it overlaps the annotation),
    ``jitters`` perturbed reference boxes, and mirrored copies of all of these.
    Crops that would cut off a target landmark are dropped.
    """
    role_names = ROLE_NAMES[cls]
    xs, ys = [], []
    for i, rec in enumerate(records):
        image = rec.load()
        lm = LandmarkSet({n: rec.landmarks[n] for n in role_names}, cls)
        ref = reference_box(rec.landmarks, cls)
        boxes = []
        if detector is not None:
            region = search_region(cls, rec.landmarks, image, face)
            det = hogdet.best_detection(hogdet.detect(image, detector, region))
            if det is not None and bbox_iou(det.box, ref) >= 0.3:
                boxes.append(det.box)
        gen = rng.child(f"jitter{i}").gen
        boxes += [jitter_box(ref, gen) for _ in range(jitters)]
        if not boxes:
            boxes.append(ref)
        for box in boxes:
            c = crop_raster(image, box, lm)
            if c.outside:
                continue
            variants = [(c.raster, c.landmarks)]
            if flip:
                variants.append(flip_pair(c.raster, c.landmarks))
            for r, l in variants:
                prep = preprocess_crop(r, l)
                xs.append(prep.tensor)
                ys.append(prep.target)
    if not xs:
        raise DataError(f"no usable {cls} crops in {len(records)} records")
    return SampleSet(np.stack(xs), np.stack(ys))


def specs_for(cls: str) -> list[nnet.LayerSpec]:
    return nnet.nose_specs() if cls == "nose" else nnet.coin_specs()


@dataclass
class StageTraining:
    model: nnet.CnnModel
    history: nnet.History
    n_train: int
    n_val: int


def train_stage_cnn(manifest: Manifest, cls: str, cfg: nnet.TrainConfig, *,
                    detector: DetectorModel | None = None, face: DetectorModel | None = None,
                    train_fraction: float = 0.7, jitters: int = 1,
                    specs: Sequence[nnet.LayerSpec] | None = None,
                    log: Callable | None = None) -> StageTraining:
    """Split records, build crops, fit normalisation on the training part, train from scratch."""
    rng = SeededRng(cfg.seed)
    tr, va = split(manifest, train_fraction, rng)
    if not tr or not va:
        raise DataError(f"{len(manifest)} records are too few for a {train_fraction:g} split")
    tr_set = build_samples(list(tr), cls, rng.child("train"), detector, face, jitters)
    va_set = build_samples(list(va), cls, rng.child("val"), detector, face, jitters)
    stats = fit_stats(tr_set.pixels, tr_set.coords)
    model = nnet.init_weights(specs or specs_for(cls), rng, stats=stats, name=cls)
    tx, ty = normalize(tr_set.pixels, stats, tr_set.coords)
    vx, vy = normalize(va_set.pixels, stats, va_set.coords)
    best, hist = nnet.train(model, tx, ty, vx, vy, cfg, log)
    return StageTraining(best, hist, len(tr_set), len(va_set))


def transfer_train(base: nnet.CnnModel, manifest: Manifest, cfg: nnet.TrainConfig, cls: str | None = None, *,
                   detector: DetectorModel | None = None, face: DetectorModel | None = None,
                   train_fraction: float = 0.9, jitters: int = 0, flip: bool = False,
                   log: Callable | None = None) -> StageTraining:
    """Continue training ``base`` on a new (typically small) set with a 90/10 split.

    The caller supplies an already mirror-augmented manifest, so no extra flips
    are added here by default. Normalisation statistics stay those of ``base``.
    """
    cls = cls or base.name or "nose"
    rng = SeededRng(cfg.seed)
    tr, va = split(manifest, train_fraction, rng)
    if not tr or not va:
        raise DataError(f"{len(manifest)} records are too few for a {train_fraction:g} split")
    tr_set = build_samples(list(tr), cls, rng.child("train"), detector, face, jitters, flip)
    va_set = build_samples(list(va), cls, rng.child("val"), detector, face, jitters, flip)
    tx, ty = normalize(tr_set.pixels, base.stats, tr_set.coords)
    vx, vy = normalize(va_set.pixels, base.stats, va_set.coords)
    best, hist = nnet.train(base, tx, ty, vx, vy, cfg, log)
    return StageTraining(best, hist, len(tr_set), len(va_set))
