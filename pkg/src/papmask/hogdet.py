"""HOG features and a linear sliding-window detector over an image pyramid.

One ``DetectorModel`` per object class (face, nose, coin). Training fits a
class-balanced, L2-regularised hinge loss by SGD, then runs rounds of hard
negative mining against the training images.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from papmask.core import BBox, Raster, SeededRng, bbox_iou
from papmask.errors import DataError, ModelFormatError
from papmask.imageops import rescale, resample

NORM_EPS = 1.0
HYS_CLIP = 0.2


@dataclass(frozen=True)
class HogParams:
    cell: int = 8
    bins: int = 9
    block: int = 2
    block_stride: int = 1
    norm: str = "L2-Hys"
    window_cells: tuple[int, int] = (8, 6)  # (w, h)
    scale_factor: float = 1.2
    nms_iou: float = 0.5
    threshold: float = 0.0

    def __post_init__(self):
        wc = tuple(int(v) for v in self.window_cells)
        object.__setattr__(self, "window_cells", wc)
        if self.cell < 1 or self.bins < 1 or self.block < 1 or self.block_stride < 1:
            raise DataError("HOG cell, bins, block and stride must be positive")
        if self.norm not in ("L2-Hys", "L2"):
            raise DataError(f"unknown block normalisation {self.norm!r}")
        if wc[0] < self.block or wc[1] < self.block:
            raise DataError("detection window must hold at least one block")
        if (wc[0] - self.block) % self.block_stride or (wc[1] - self.block) % self.block_stride:
            raise DataError("window must tile into whole block steps")
        if not self.scale_factor > 1:
            raise DataError("pyramid scale factor must exceed 1")

    @property
    def window_px(self) -> tuple[int, int]:
        return self.window_cells[0] * self.cell, self.window_cells[1] * self.cell

    @property
    def window_blocks(self) -> tuple[int, int]:
        return ((self.window_cells[0] - self.block) // self.block_stride + 1,
                (self.window_cells[1] - self.block) // self.block_stride + 1)

    @property
    def block_dim(self) -> int:
        return self.block * self.block * self.bins

    @property
    def descriptor_length(self) -> int:
        bx, by = self.window_blocks
        return bx * by * self.block_dim


DEFAULT_PARAMS = {
    "nose": HogParams(window_cells=(8, 6)),
    "coin": HogParams(window_cells=(6, 6)),
    "face": HogParams(window_cells=(10, 10)),
}
CLASSES = tuple(DEFAULT_PARAMS)


def _as_gray(image) -> np.ndarray:
    if isinstance(image, Raster):
        return image.gray()
    g = np.asarray(image, dtype=np.float64)
    if g.ndim == 3:
        g = 0.299 * g[..., 0] + 0.587 * g[..., 1] + 0.114 * g[..., 2]
    return g


def cell_histograms(gray: np.ndarray, params: HogParams) -> np.ndarray:
    """Orientation histograms, shape ``(cells_y, cells_x, bins)``.

    Centred differences with replicated borders; unsigned orientation in
    [0, 180) with bin ``k`` centred on ``k * 180 / bins`` and linear voting
    between the two nearest bins.
    """
    c = params.cell
    ny, nx = gray.shape[0] // c, gray.shape[1] // c
    if ny < 1 or nx < 1:
        return np.zeros((max(ny, 0), max(nx, 0), params.bins))
    # one extra row/column of context so gradients at the grid edge see real neighbours
    p = np.pad(gray[: ny * c + 1, : nx * c + 1], 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2])[: ny * c, : nx * c]
    gy = (p[2:, 1:-1] - p[:-2, 1:-1])[: ny * c, : nx * c]
    mag = np.hypot(gx, gy)
    ang = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    pos = ang * (params.bins / 180.0)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.intp) % params.bins
    hi = (lo + 1) % params.bins
    cell_idx = (np.arange(ny * c) // c)[:, None] * nx + (np.arange(nx * c) // c)[None, :]
    base = cell_idx * params.bins
    size = ny * nx * params.bins
    hist = np.bincount((base + lo).ravel(), (mag * (1 - frac)).ravel(), minlength=size)
    hist += np.bincount((base + hi).ravel(), (mag * frac).ravel(), minlength=size)
    return hist.reshape(ny, nx, params.bins)


def _normalize(v: np.ndarray, norm: str) -> np.ndarray:
    v = v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + NORM_EPS ** 2)
    if norm == "L2-Hys":
        v = np.minimum(v, HYS_CLIP)
        v = v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + (NORM_EPS / 255.0) ** 2)
    return v


def block_features(cells: np.ndarray, params: HogParams) -> np.ndarray:
    """Normalised blocks, shape ``(blocks_y, blocks_x, block*block*bins)``."""
    b, s = params.block, params.block_stride
    ny, nx = cells.shape[:2]
    if ny < b or nx < b:
        return np.zeros((0, 0, params.block_dim))
    win = sliding_window_view(cells, (b, b), axis=(0, 1))[::s, ::s]  # by,bx,bins,b,b
    blocks = win.transpose(0, 1, 3, 4, 2).reshape(win.shape[0], win.shape[1], -1)
    return _normalize(blocks, params.norm)


def hog_descriptor(image, params: HogParams) -> np.ndarray:
    """Descriptor of the whole image (cropped to whole cells), blocks in row-major order."""
    gray = _as_gray(image)
    wpx, hpx = params.window_px
    if gray.shape[0] < hpx or gray.shape[1] < wpx:
        raise DataError(f"image {gray.shape[1]}x{gray.shape[0]} is smaller than the {wpx}x{hpx} window")
    return block_features(cell_histograms(gray, params), params).ravel()


class Detection(NamedTuple):
    box: BBox
    score: float


@dataclass
class DetectorModel:
    params: HogParams
    weights: np.ndarray
    bias: float
    cls: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.params.descriptor_length,):
            raise ModelFormatError(
                f"weight length {self.weights.shape} does not match descriptor length "
                f"{self.params.descriptor_length}")


def _pyramid(gray: np.ndarray, params: HogParams):
    wpx, hpx = params.window_px
    k = 0
    while True:
        f = params.scale_factor ** (-k)
        if math.floor(gray.shape[0] * f) < hpx or math.floor(gray.shape[1] * f) < wpx:
            return
        yield f, (gray if k == 0 else rescale(gray, f))
        k += 1


def _score_level(blocks: np.ndarray, model: DetectorModel) -> np.ndarray:
    bx, by = model.params.window_blocks
    if blocks.shape[0] < by or blocks.shape[1] < bx:
        return np.zeros((0, 0))
    w = model.weights.reshape(by, bx, -1)
    win = sliding_window_view(blocks, (by, bx), axis=(0, 1))  # ny,nx,D,by,bx
    return np.einsum("ijdab,abd->ij", win, w, optimize=True) + model.bias


def _level_boxes(ii, jj, f, params: HogParams) -> list[BBox]:
    step = params.cell * params.block_stride
    wpx, hpx = params.window_px
    return [BBox(float(j * step / f), float(i * step / f), wpx / f, hpx / f) for i, j in zip(ii, jj)]


def nms(dets: Sequence[Detection], iou: float) -> list[Detection]:
    """Greedy suppression: keep the best, drop anything overlapping a kept box by more than ``iou``."""
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: (-d.score, d.box)):
        if all(bbox_iou(d.box, k.box) <= iou for k in kept):
            kept.append(d)
    return kept


def scan(image, model: DetectorModel, threshold: float):
    """All pyramid windows scoring above ``threshold``, before suppression."""
    gray = _as_gray(image)
    out = []
    for f, g in _pyramid(gray, model.params):
        scores = _score_level(block_features(cell_histograms(g, model.params), model.params), model)
        ii, jj = np.nonzero(scores > threshold)
        for box, s in zip(_level_boxes(ii, jj, f, model.params), scores[ii, jj]):
            out.append(Detection(box, float(s)))
    return out


def detect(image, model: DetectorModel, region: BBox | None = None,
           threshold: float | None = None) -> list[Detection]:
    """Detections in original-image coordinates, suppressed and sorted by score.

    With ``region`` the search is confined to that box (clipped to the image).
    """
    gray = _as_gray(image)
    ox = oy = 0
    if region is not None:
        r = region.clip(gray.shape[1], gray.shape[0])
        if r is None:
            return []
        # whole pixels inside the region, so every box found lies within it
        x0, y0 = int(math.ceil(r.x)), int(math.ceil(r.y))
        x1, y1 = int(math.floor(r.x2)), int(math.floor(r.y2))
        if x1 <= x0 or y1 <= y0:
            return []
        gray = gray[y0:y1, x0:x1]
        ox, oy = x0, y0
    thr = model.params.threshold if threshold is None else threshold
    dets = nms(scan(gray, model, thr), model.params.nms_iou)
    if ox or oy:
        dets = [Detection(d.box.shifted(ox, oy), d.score) for d in dets]
    return dets


def best_detection(dets: Sequence[Detection]) -> Detection | None:
    if not dets:
        return None
    return max(dets, key=lambda d: d.score)


# -- training ------------------------------------------------------------------

class TrainingImage(NamedTuple):
    image: Raster
    boxes: tuple[BBox, ...]


@dataclass(frozen=True)
class SvmConfig:
    lam: float = 1e-4
    epochs: int = 100
    batch: int = 64
    eta0: float = 0.05
    mining_rounds: int = 2
    mining_cap: int = 10_000
    initial_negatives: int = 12
    mining_margin: float = -1.0
    negative_iou: float = 0.3
    mirror_positives: bool = True
    # extra positives offset by about half a cell and by half a pyramid step, so
    # windows on the scan grid still score well on off-grid objects
    positive_shift: float = 0.0625
    positive_scale: float = 1.09


def window_descriptor(gray: np.ndarray, box: BBox, params: HogParams) -> np.ndarray:
    """HOG of ``box`` resampled to the detector window."""
    wpx, hpx = params.window_px
    patch = resample(gray, box.x, box.y, wpx / box.w, hpx / box.h, wpx, hpx)
    return hog_descriptor(patch, params)


def fit_hinge(x: np.ndarray, y: np.ndarray, cfg: SvmConfig, rng: SeededRng,
              w0: np.ndarray | None = None, b0: float = 0.0) -> tuple[np.ndarray, float]:
    """SGD on lam/2 |w|^2 + class-balanced mean hinge loss, step eta0 / (1 + lam eta0 t)."""
    n, d = x.shape
    npos = int(np.sum(y > 0))
    nneg = n - npos
    if npos == 0 or nneg == 0:
        raise DataError("hinge training needs both positive and negative windows")
    cw = np.where(y > 0, n / (2.0 * npos), n / (2.0 * nneg))
    w = np.zeros(d) if w0 is None else w0.astype(np.float64).copy()
    b = float(b0)
    t = 0
    gen = rng.gen
    for _ in range(cfg.epochs):
        order = gen.permutation(n)
        for s in range(0, n, cfg.batch):
            idx = order[s:s + cfg.batch]
            xb = x[idx].astype(np.float64)
            yb, cb = y[idx], cw[idx]
            eta = cfg.eta0 / (1.0 + cfg.lam * cfg.eta0 * t)
            margin = yb * (xb @ w + b)
            act = margin < 1
            coef = (cb * yb * act) / len(idx)
            w *= 1.0 - eta * cfg.lam
            w += eta * (coef @ xb)
            b += eta * coef.sum()
            t += 1
    return w, b


def _random_windows(gray: np.ndarray, params: HogParams, count: int, avoid: Sequence[BBox],
                    cfg: SvmConfig, gen: np.random.Generator) -> list[np.ndarray]:
    wpx, hpx = params.window_px
    h, w = gray.shape
    max_scale = min(w / wpx, h / hpx)
    out = []
    if max_scale < 1:
        return out
    tries = 0
    while len(out) < count and tries < 20 * count:
        tries += 1
        s = math.exp(gen.uniform(0.0, math.log(max_scale)))
        bw, bh = wpx * s, hpx * s
        box = BBox(gen.uniform(0, w - bw), gen.uniform(0, h - bh), bw, bh)
        if any(bbox_iou(box, a) > cfg.negative_iou for a in avoid):
            continue
        out.append(window_descriptor(gray, box, params))
    return out


def _mine(gray: np.ndarray, avoid: Sequence[BBox], model: DetectorModel, cfg: SvmConfig):
    found = []
    for f, g in _pyramid(gray, model.params):
        blocks = block_features(cell_histograms(g, model.params), model.params)
        scores = _score_level(blocks, model)
        ii, jj = np.nonzero(scores > cfg.mining_margin)
        bx, by = model.params.window_blocks
        for (i, j), box in zip(zip(ii, jj), _level_boxes(ii, jj, f, model.params)):
            if any(bbox_iou(box, a) > cfg.negative_iou for a in avoid):
                continue
            found.append((float(scores[i, j]), blocks[i:i + by, j:j + bx].ravel()))
    return found


def _positive_variants(box: BBox, cfg: SvmConfig) -> list[BBox]:
    out = [box]
    if cfg.positive_shift > 0:
        dx, dy = cfg.positive_shift * box.w, cfg.positive_shift * box.h
        out += [box.shifted(dx, 0), box.shifted(-dx, 0), box.shifted(0, dy), box.shifted(0, -dy)]
    if cfg.positive_scale > 1:
        out += [box.resized(cfg.positive_scale), box.resized(1 / cfg.positive_scale)]
    return out


def train_detector(positives: Sequence[TrainingImage], negatives: Sequence[Raster],
                   params: HogParams, rng: SeededRng, cls: str = "nose",
                   cfg: SvmConfig = SvmConfig(), log=None) -> DetectorModel:
    """Fit a window classifier from annotated boxes and background images.

    Initial negatives are random windows away from the annotated boxes (in the
    positive images) and anywhere in the background images; each mining round
    adds the highest-scoring false windows found by scanning all images.
    """
    if not positives or not any(p.boxes for p in positives):
        raise DataError("detector training needs at least one positive box")
    if not negatives:
        raise DataError("detector training needs negative images")
    grays = [(p.image.gray(), tuple(p.boxes)) for p in positives]
    grays += [(n.gray(), ()) for n in negatives]

    pos = []
    for g, boxes in grays:
        for box in boxes:
            for v in _positive_variants(box, cfg):
                pos.append(window_descriptor(g, v, params))
                if cfg.mirror_positives:
                    pos.append(window_descriptor(g[:, ::-1], BBox(g.shape[1] - v.x2, v.y, v.w, v.h), params))
    gen = rng.child("negatives").gen
    neg = []
    for g, boxes in grays:
        neg += _random_windows(g, params, cfg.initial_negatives, boxes, cfg, gen)
    if not neg:
        raise DataError("no negative windows could be sampled (images smaller than the window?)")

    x = np.asarray(pos + neg, dtype=np.float32)
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    if np.ptp(x, axis=0).max() <= 1e-9:
        raise DataError("degenerate training data: all descriptors are identical")
    w, b = fit_hinge(x, y, cfg, rng.child("sgd", ))
    model = DetectorModel(params, w, b, cls)
    for rnd in range(cfg.mining_rounds):
        hard = []
        for g, boxes in grays:
            hard += _mine(g, boxes, model, cfg)
        hard.sort(key=lambda t: -t[0])
        hard = hard[: cfg.mining_cap]
        if log:
            log(f"{cls} mining round {rnd + 1}: {len(hard)} hard negatives")
        if not hard:
            continue
        x = np.concatenate([x, np.asarray([h[1] for h in hard], dtype=np.float32)])
        y = np.concatenate([y, -np.ones(len(hard))])
        w, b = fit_hinge(x, y, cfg, rng.child(f"sgd{rnd + 1}"), w, b)
        model = DetectorModel(params, w, b, cls)
    model.meta = {"seed": rng.seed, "positives": len(pos), "negatives": int(np.sum(y < 0)),
                  "mining_rounds": cfg.mining_rounds}
    return model


# -- serialization -------------------------------------------------------------

MAGIC = b"HOGD"
VERSION = 1
_NORMS = ("L2-Hys", "L2")


def save_detector(model: DetectorModel, path) -> None:
    p = model.params
    tag = model.cls.encode("utf-8")
    m = model.meta
    body = b"".join([
        MAGIC, struct.pack("<I", VERSION),
        struct.pack("<B", len(tag)), tag,
        struct.pack("<4IB2I3d", p.cell, p.bins, p.block, p.block_stride, _NORMS.index(p.norm),
                    p.window_cells[0], p.window_cells[1], p.scale_factor, p.nms_iou, p.threshold),
        struct.pack("<Q3I", int(m.get("seed", 0)) & 0xFFFF_FFFF_FFFF_FFFF, int(m.get("positives", 0)),
                    int(m.get("negatives", 0)), int(m.get("mining_rounds", 0))),
        struct.pack("<I", model.weights.size),
        model.weights.astype("<f8").tobytes(),
        struct.pack("<d", model.bias),
    ])
    Path(path).write_bytes(body)


def load_detector(path) -> DetectorModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read detector {path}: {exc}") from exc
    try:
        if buf[:4] != MAGIC:
            raise ModelFormatError(f"{path}: not a detector file")
        pos = 4
        (version,) = struct.unpack_from("<I", buf, pos); pos += 4
        if version != VERSION:
            raise ModelFormatError(f"{path}: unsupported detector version {version}")
        (tlen,) = struct.unpack_from("<B", buf, pos); pos += 1
        cls = buf[pos:pos + tlen].decode("utf-8"); pos += tlen
        fmt = "<4IB2I3d"
        cell, bins, block, stride, norm, wcx, wcy, sf, nms_iou, thr = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        seed, npos, nneg, rounds = struct.unpack_from("<Q3I", buf, pos); pos += struct.calcsize("<Q3I")
        (n,) = struct.unpack_from("<I", buf, pos); pos += 4
        if len(buf) != pos + 8 * n + 8:
            raise ModelFormatError(f"{path}: truncated or oversized detector file")
        weights = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
        (bias,) = struct.unpack_from("<d", buf, pos + 8 * n)
        params = HogParams(cell, bins, block, stride, _NORMS[norm], (wcx, wcy), sf, nms_iou, thr)
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: malformed detector file ({exc})") from None
    except DataError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
    meta = {"seed": seed, "positives": npos, "negatives": nneg, "mining_rounds": rounds}
    return DetectorModel(params, weights, bias, cls, meta)


def with_threshold(model: DetectorModel, threshold: float) -> DetectorModel:
    return replace(model, params=replace(model.params, threshold=threshold))


def params_dict(params: HogParams) -> dict:
    return asdict(params)
