"""A small float64 CNN engine: 3x3 valid convolution, 2x2 max-pool, dense layers.

Only what the landmark regressors need: ReLU hidden layers, a linear 4-unit
output, RMSE objective, minibatch SGD with classical momentum and early
stopping on validation RMSE, plus a checksummed weight file for resuming
training on a new dataset.
"""

from __future__ import annotations

import copy
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from papmask.core import SeededRng
from papmask.errors import DataError, DivergenceError, ModelFormatError

INPUT_SHAPE = (3, 42, 42)
KERNEL = 3

_KIND_CODES = {"conv": 1, "pool": 2, "dense": 3, "linear": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind != "pool" and self.size < 1:
            raise ValueError(f"{self.kind} layer needs a positive size")

    @property
    def has_params(self) -> bool:
        return self.kind != "pool"


def conv(maps: int) -> LayerSpec:
    return LayerSpec("conv", maps)


def pool() -> LayerSpec:
    return LayerSpec("pool")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units)


def linear(units: int) -> LayerSpec:
    return LayerSpec("linear", units)


def nose_specs() -> list[LayerSpec]:
    return [conv(32), pool(), dense(800), linear(4)]


def coin_specs() -> list[LayerSpec]:
    return [conv(24), pool(), dense(800), linear(4)]


def layer_shapes(specs: Sequence[LayerSpec], input_shape=INPUT_SHAPE) -> list[tuple[int, ...]]:
    """Output shape of every layer (batch dimension excluded)."""
    shape = tuple(input_shape)
    shapes = []
    for i, s in enumerate(specs):
        if s.kind == "conv":
            if len(shape) != 3 or shape[1] < KERNEL or shape[2] < KERNEL:
                raise ValueError(f"layer {i}: conv needs a CxHxW input of at least 3x3, got {shape}")
            shape = (s.size, shape[1] - KERNEL + 1, shape[2] - KERNEL + 1)
        elif s.kind == "pool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ValueError(f"layer {i}: pool needs a CxHxW input of at least 2x2, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        else:
            shape = (s.size,)
        shapes.append(shape)
    if specs and specs[-1].kind != "linear":
        raise ValueError("the last layer must be linear")
    return shapes


def param_shapes(specs: Sequence[LayerSpec], input_shape=INPUT_SHAPE) -> list[tuple | None]:
    shapes = []
    prev = tuple(input_shape)
    for s, out in zip(specs, layer_shapes(specs, input_shape)):
        if s.kind == "conv":
            shapes.append(((s.size, prev[0], KERNEL, KERNEL), (s.size,)))
        elif s.kind == "pool":
            shapes.append(None)
        else:
            shapes.append(((int(np.prod(prev)), s.size), (s.size,)))
        prev = out
    return shapes


def fans(specs: Sequence[LayerSpec], input_shape=INPUT_SHAPE) -> list[tuple[int, int] | None]:
    """(fan_in, fan_out) per layer: conv uses 3*3*channels on each side."""
    out = []
    for s, ps in zip(specs, param_shapes(specs, input_shape)):
        if ps is None:
            out.append(None)
        elif s.kind == "conv":
            o, c = ps[0][0], ps[0][1]
            out.append((KERNEL * KERNEL * c, KERNEL * KERNEL * o))
        else:
            out.append(ps[0])
    return out


@dataclass
class NormStats:
    """Dataset-level scaling: pixels ``v / 255 - pixel_mean``, coords ``c / 41 - coord_mean``."""

    pixel_mean: float = 0.5
    coord_mean: float = 0.5
    pixel_divisor: float = 255.0
    coord_divisor: float = 41.0

    def as_tuple(self):
        return (self.pixel_divisor, self.pixel_mean, self.coord_divisor, self.coord_mean)


@dataclass
class CnnModel:
    specs: list[LayerSpec]
    params: list[tuple[np.ndarray, np.ndarray] | None]
    stats: NormStats = field(default_factory=NormStats)
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    name: str = ""

    def __post_init__(self):
        expected = param_shapes(self.specs, self.input_shape)
        if len(self.params) != len(expected):
            raise ValueError("one parameter entry per layer required")
        for i, (p, e) in enumerate(zip(self.params, expected)):
            if (p is None) != (e is None):
                raise ValueError(f"layer {i}: parameter presence does not match spec")
            if p is not None and (p[0].shape != e[0] or p[1].shape != e[1]):
                raise ValueError(f"layer {i}: weight shapes {p[0].shape}/{p[1].shape}, expected {e}")

    @property
    def output_dim(self) -> int:
        return self.specs[-1].size

    def n_params(self) -> int:
        return sum(w.size + b.size for p in self.params if p is not None for w, b in [p])

    def copy(self) -> CnnModel:
        return copy.deepcopy(self)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for p in self.params:
            if p is not None:
                out.extend(p)
        return out


def init_weights(specs: Sequence[LayerSpec], rng: SeededRng, input_shape=INPUT_SHAPE,
                 stats: NormStats | None = None, name: str = "") -> CnnModel:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for weights and biases alike."""
    gen = rng.child("init").gen
    params = []
    for ps, fan in zip(param_shapes(specs, input_shape), fans(specs, input_shape)):
        if ps is None:
            params.append(None)
            continue
        bound = math.sqrt(6.0 / (fan[0] + fan[1]))
        w = gen.uniform(-bound, bound, ps[0])
        b = gen.uniform(-bound, bound, ps[1])
        params.append((w, b))
    return CnnModel(list(specs), params, stats or NormStats(), tuple(input_shape), name)


def zero_model(specs: Sequence[LayerSpec], input_shape=INPUT_SHAPE) -> CnnModel:
    params = [None if ps is None else (np.zeros(ps[0]), np.zeros(ps[1]))
              for ps in param_shapes(specs, input_shape)]
    return CnnModel(list(specs), params, NormStats(), tuple(input_shape))


# -- layer kernels -------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = h - KERNEL + 1, w - KERNEL + 1
    win = sliding_window_view(x, (KERNEL, KERNEL), axis=(2, 3))  # b,c,ho,wo,3,3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * KERNEL * KERNEL)


def _conv_forward(x, w, b):
    bsz, _, h, wd = x.shape
    ho, wo = h - KERNEL + 1, wd - KERNEL + 1
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(bsz, w.shape[0], ho, wo)
    return out, cols


def _conv_backward(dout, cols, w, x_shape, need_dx):
    bsz, o, ho, wo = dout.shape
    d = dout.reshape(bsz, o, ho * wo)
    dw = np.einsum("bop,bpk->ok", d, cols, optimize=True).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    c = x_shape[1]
    dcols = np.einsum("bop,ok->bpk", d, w.reshape(o, -1), optimize=True)
    dcols = dcols.reshape(bsz, ho, wo, c, KERNEL, KERNEL)
    dx = np.zeros(x_shape)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_forward(x):
    h2, w2 = x.shape[2] // 2, x.shape[3] // 2
    taps = [x[:, :, i:2 * h2:2, j:2 * w2:2] for i, j in _POOL_OFFSETS]
    out = taps[0]
    idx = np.zeros(out.shape, dtype=np.int8)
    # strict comparison keeps the first maximum in row-major window order
    for k in (1, 2, 3):
        better = taps[k] > out
        out = np.where(better, taps[k], out)
        idx[better] = k
    return out, idx


def _pool_backward(dout, idx, x_shape):
    h2, w2 = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape)
    for k, (i, j) in enumerate(_POOL_OFFSETS):
        dx[:, :, i:2 * h2:2, j:2 * w2:2] = np.where(idx == k, dout, 0.0)
    return dx


# -- forward / backward --------------------------------------------------------

def _check_input(model: CnnModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != tuple(model.input_shape):
        raise ValueError(f"expected batch x {'x'.join(map(str, model.input_shape))}, got {x.shape}")
    return x


def forward(model: CnnModel, batch: np.ndarray, keep: bool = False):
    """Network output for a ``b x C x H x W`` batch.

    With ``keep=True`` also returns the per-layer cache for ``backward`` and the
    list of intermediate activations.
    """
    x = _check_input(model, batch)
    cache = []
    acts = []
    for spec, p in zip(model.specs, model.params):
        if spec.kind == "conv":
            z, cols = _conv_forward(x, *p)
            y = np.maximum(z, 0.0)
            cache.append((x.shape, cols, z))
        elif spec.kind == "pool":
            y, idx = _pool_forward(x)
            cache.append((x.shape, idx))
        else:
            flat = x.reshape(x.shape[0], -1)
            z = flat @ p[0] + p[1]
            y = np.maximum(z, 0.0) if spec.kind == "dense" else z
            cache.append((x.shape, flat, z))
        if keep:
            acts.append(y)
        x = y
    if keep:
        return x, cache, acts
    return x


def backward(model: CnnModel, cache, dout: np.ndarray):
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(model.specs)
    d = dout
    for i in range(len(model.specs) - 1, -1, -1):
        spec, p = model.specs[i], model.params[i]
        need_dx = i > 0
        if spec.kind == "conv":
            x_shape, cols, z = cache[i]
            d = d * (z > 0)
            d, dw, db = _conv_backward(d, cols, p[0], x_shape, need_dx)
            grads[i] = (dw, db)
        elif spec.kind == "pool":
            x_shape, idx = cache[i]
            d = _pool_backward(d, idx, x_shape)
        else:
            x_shape, flat, z = cache[i]
            if spec.kind == "dense":
                d = d * (z > 0)
            grads[i] = (flat.T @ d, d.sum(axis=0))
            d = (d @ p[0].T).reshape(x_shape) if need_dx else None
    return grads


def rmse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """sqrt(mean((pred - target)^2)) and its gradient; the gradient is 0 at zero loss."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    loss = math.sqrt(float(np.sum(diff * diff)) / n)
    if loss == 0.0:
        return 0.0, np.zeros_like(diff)
    return loss, diff / (n * loss)


def loss_and_grads(model: CnnModel, x: np.ndarray, y: np.ndarray):
    out, cache, _ = forward(model, x, keep=True)
    loss, dout = rmse_loss(out, y)
    return loss, backward(model, cache, dout)


def predict(model: CnnModel, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, model.output_dim))
    return np.concatenate([forward(model, x[i:i + chunk]) for i in range(0, len(x), chunk)])


def dataset_rmse(model: CnnModel, x: np.ndarray, y: np.ndarray) -> float:
    return rmse_loss(predict(model, x), y)[0]


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 128
    patience: int = 50
    max_epochs: int = 5000
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise DataError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise DataError("batch size and patience must be >= 1, max epochs >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_rmse: float
    val_rmse: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_val(self) -> float:
        return min(r.val_rmse for r in self.records)

    def to_csv(self) -> str:
        lines = ["epoch,train_rmse,val_rmse"]
        lines += [f"{r.epoch},{r.train_rmse!r},{r.val_rmse!r}" for r in self.records]
        return "\n".join(lines) + "\n"


def train(model: CnnModel, train_x, train_y, val_x, val_y, cfg: TrainConfig,
          log: Callable[[EpochRecord], None] | None = None) -> tuple[CnnModel, History]:
    """Minibatch SGD with momentum (v <- mu v - lr g; w <- w + v) and early stopping.

    Epoch 0 is the starting model, so the returned snapshot is never worse on
    the validation set than what was passed in. The input model is not modified.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.float64)
    if len(train_x) == 0 or len(val_x) == 0:
        raise DataError("training and validation sets must be non-empty")
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise DataError("inputs and targets differ in length")

    work = model.copy()
    arrays = work.arrays()
    velocity = [np.zeros_like(a) for a in arrays]
    shuffle = SeededRng(cfg.seed).child("shuffle")
    n = len(train_x)

    hist = History()
    best_val = dataset_rmse(work, val_x, val_y)
    hist.records.append(EpochRecord(0, dataset_rmse(work, train_x, train_y), best_val))
    if not math.isfinite(best_val):
        raise DivergenceError(0, best_val)
    best = work.copy()
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(work, train_x[idx], train_y[idx])
            if not math.isfinite(loss):
                raise DivergenceError(epoch, loss)
            flat = [g for pair in grads if pair is not None for g in pair]
            for a, v, g in zip(arrays, velocity, flat):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                a += v
            total += loss * len(idx)
            count += len(idx)
        val = dataset_rmse(work, val_x, val_y)
        if not math.isfinite(val):
            raise DivergenceError(epoch, val)
        rec = EpochRecord(epoch, total / count, val)
        hist.records.append(rec)
        if log:
            log(rec)
        if val < best_val:
            best_val, best, stall = val, work.copy(), 0
            hist.best_epoch = epoch
        else:
            stall += 1
            if stall >= cfg.patience:
                hist.stopped_early = True
                break
    return best, hist


# -- gradient check ------------------------------------------------------------

def gradient_check(model: CnnModel, x: np.ndarray, y: np.ndarray, h: float = 1e-5,
                   analytic: Callable | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every parameter is perturbed. ``analytic(model, x, y)`` may replace the
    backprop gradient, which is how a deliberately broken gradient is exercised.
    """
    work = model.copy()
    x = _check_input(work, x)
    y = np.asarray(y, dtype=np.float64)
    if analytic is None:
        _, grads = loss_and_grads(work, x, y)
    else:
        grads = analytic(work, x, y)
    worst = 0.0
    for p, g in zip(work.params, grads):
        if p is None:
            continue
        for arr, garr in zip(p, g):
            flat = arr.reshape(-1)
            gflat = np.asarray(garr).reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                lp = rmse_loss(forward(work, x), y)[0]
                flat[k] = orig - h
                lm = rmse_loss(forward(work, x), y)[0]
                flat[k] = orig
                num = (lp - lm) / (2 * h)
                a = gflat[k]
                err = abs(a - num) / max(1e-8, abs(a) + abs(num))
                worst = max(worst, err)
    return worst


# -- serialization -------------------------------------------------------------

MAGIC = b"PAPW"
VERSION = 1


def _pack_array(a: np.ndarray) -> bytes:
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_weights(model: CnnModel, path) -> None:
    name = model.name.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(name)), name,
             struct.pack("<3I", *model.input_shape),
             struct.pack("<I", len(model.specs))]
    for s in model.specs:
        parts.append(struct.pack("<BI", _KIND_CODES[s.kind], s.size))
    parts.append(struct.pack("<4d", *model.stats.as_tuple()))
    for p in model.params:
        if p is not None:
            parts += [_pack_array(p[0]), _pack_array(p[1])]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("weight file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        (ndim,) = self.unpack("<I")
        if ndim > 4:
            raise ModelFormatError(f"implausible array rank {ndim}")
        shape = self.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def load_weights(path, specs: Sequence[LayerSpec] | None = None) -> CnnModel:
    """Read a weight file; with ``specs`` given, refuse files of a different architecture."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read weight file {path}: {exc}") from exc
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a weight file (bad magic or truncated)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported weight file version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ModelFormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    (nlen,) = r.unpack("<I")
    name = r.take(nlen).decode("utf-8")
    input_shape = r.unpack("<3I")
    (nl,) = r.unpack("<I")
    file_specs = []
    for _ in range(nl):
        code, size = r.unpack("<BI")
        if code not in _CODE_KINDS:
            raise ModelFormatError(f"{path}: unknown layer code {code}")
        file_specs.append(LayerSpec(_CODE_KINDS[code], size))
    if specs is not None and list(specs) != file_specs:
        raise ModelFormatError(
            f"{path}: architecture mismatch: file has {_describe(file_specs)}, expected {_describe(specs)}")
    pd, pm, cd, cm = r.unpack("<4d")
    params = []
    try:
        expected = param_shapes(file_specs, input_shape)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
    for e in expected:
        if e is None:
            params.append(None)
            continue
        w, b = r.array(), r.array()
        if w.shape != e[0] or b.shape != e[1]:
            raise ModelFormatError(f"{path}: shape mismatch {w.shape}/{b.shape} vs {e}")
        params.append((w, b))
    if r.pos != len(body):
        raise ModelFormatError(f"{path}: trailing bytes after parameters")
    stats = NormStats(pixel_mean=pm, coord_mean=cm, pixel_divisor=pd, coord_divisor=cd)
    return CnnModel(file_specs, params, stats, tuple(input_shape), name)


def _describe(specs) -> str:
    return "[" + ", ".join(s.kind if s.kind == "pool" else f"{s.kind}{s.size}" for s in specs) + "]"
