"""Dataset synthesis, the IMGD container, and maximum-likelihood flow training."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowModel
from .numkit import AdamState, FormatError, InvalidArgument, NumericError, adam_step, clip_grad_norm, make_rng

IMGD_MAGIC = b"IMGD"
IMGD_VERSION = 1
_IMGD_HEADER = struct.Struct("<4sIIIII")  # magic, version, n, height, width, channels

SYNTH_KINDS = ("gauss_mixture_2d", "checkerboard_2d", "bars8x8", "blobs8x8")
IMAGE_KINDS = ("bars8x8", "blobs8x8")
TEXTURE_STD = 0.02


@dataclass
class Dataset:
    """``items`` is n x (height*width*channels). Image data lives in [0, 1]."""

    items: np.ndarray
    height: int
    width: int = 1
    channels: int = 1
    kind: str = ""
    bounded: bool = True

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.float64)
        if items.ndim != 2 or items.shape[0] < 1:
            raise InvalidArgument("dataset needs a non-empty n x d item array")
        if items.shape[1] != self.height * self.width * self.channels:
            raise InvalidArgument(
                f"item dimension {items.shape[1]} != {self.height}x{self.width}x{self.channels}"
            )
        if self.bounded and (items.min() < 0.0 or items.max() > 1.0):
            raise InvalidArgument("image values must lie in [0, 1]")
        # stored as float32 on disk; keep memory copies float32-representable so round trips are exact
        self.items = items.astype(np.float32).astype(np.float64)

    @property
    def n(self) -> int:
        return self.items.shape[0]

    @property
    def d(self) -> int:
        return self.items.shape[1]


def dequantize(values_8bit: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Integer levels in 0..255 plus uniform jitter in [0, 1), rescaled to [0, 1]."""
    return (values_8bit + rng.uniform(0.0, 1.0, size=values_8bit.shape)) / 256.0


def synth_dataset(kind: str, n: int, rng: np.random.Generator) -> Dataset:
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if kind == "gauss_mixture_2d":
        centers = np.array([[-2.0, 0.0], [2.0, 0.0]])
        pick = rng.integers(0, 2, size=n)
        pts = centers[pick] + 0.3 * rng.standard_normal((n, 2))
        return Dataset(pts, height=2, kind=kind, bounded=False)
    if kind == "checkerboard_2d":
        # uniform over the 8 dark cells of a 4x4 board on [-2, 2]^2
        cell = rng.integers(0, 8, size=n)
        row = cell // 2
        col = 2 * (cell % 2) + (row % 2)
        pts = np.stack([col, row], axis=1) + rng.uniform(0.0, 1.0, size=(n, 2)) - 2.0
        return Dataset(pts, height=2, kind=kind, bounded=False)
    if kind == "bars8x8":
        return Dataset(_bars(n, rng), height=8, width=8, kind=kind)
    if kind == "blobs8x8":
        return Dataset(_blobs(n, rng), height=8, width=8, kind=kind)
    raise InvalidArgument(f"unknown dataset kind {kind!r}; expected one of {SYNTH_KINDS}")


def _quantize(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    levels = np.clip(np.floor(images * 255.0 + 0.5), 0, 255)
    return dequantize(levels, rng)


def _bars(n: int, rng: np.random.Generator, texture: float = TEXTURE_STD) -> np.ndarray:
    """One or two axis-aligned stripes on a dim background plus faint pixel texture."""
    imgs = np.repeat(rng.uniform(0.05, 0.15, size=n)[:, None, None], 8, axis=1).repeat(8, axis=2)
    for i in range(n):
        for _ in range(rng.integers(1, 3)):
            pos = rng.integers(0, 8)
            width = rng.integers(1, 3)
            level = rng.uniform(0.5, 1.0)
            if rng.random() < 0.5:
                imgs[i, pos:pos + width, :] = np.maximum(imgs[i, pos:pos + width, :], level)
            else:
                imgs[i, :, pos:pos + width] = np.maximum(imgs[i, :, pos:pos + width], level)
    imgs = np.clip(imgs + texture * rng.standard_normal((n, 8, 8)), 0.0, 1.0)
    return _quantize(imgs, rng).reshape(n, 64)


def _blobs(n: int, rng: np.random.Generator, texture: float = TEXTURE_STD) -> np.ndarray:
    """Sum of two isotropic Gaussian bumps on a dim background plus faint pixel texture, clipped to [0, 1]."""
    rr, cc = np.mgrid[0:8, 0:8]
    centers = rng.uniform(1.0, 6.0, size=(n, 2, 2))
    widths = rng.uniform(1.0, 2.0, size=(n, 2))
    amps = rng.uniform(0.4, 0.7, size=(n, 2))
    background = rng.uniform(0.05, 0.15, size=n)
    d2 = ((rr[None, None] - centers[..., 0, None, None]) ** 2
          + (cc[None, None] - centers[..., 1, None, None]) ** 2)
    bumps = amps[..., None, None] * np.exp(-d2 / (2.0 * widths[..., None, None] ** 2))
    imgs = background[:, None, None] + bumps.sum(1) + texture * rng.standard_normal((n, 8, 8))
    imgs = np.clip(imgs, 0.0, 1.0)
    return _quantize(imgs, rng).reshape(n, 64)


# IMGD container ----------------------------------------------------------------

def write_imgd(path, data: np.ndarray, height: int, width: int, channels: int = 1) -> None:
    """Raw IMGD writer; ``data`` is n x (h*w*c), stored as little-endian float32."""
    data = np.asarray(data)
    n = data.shape[0]
    if data.size != n * height * width * channels:
        raise InvalidArgument("payload size disagrees with header dimensions")
    header = _IMGD_HEADER.pack(IMGD_MAGIC, IMGD_VERSION, n, height, width, channels)
    with open(path, "wb") as fh:
        fh.write(header + data.astype("<f4").tobytes())


def read_imgd(path):
    """Returns (array n x (h*w*c) float64, height, width, channels)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != IMGD_MAGIC:
        raise FormatError("bad dataset magic", 0)
    if len(blob) < _IMGD_HEADER.size:
        raise FormatError("truncated dataset header", len(blob))
    _, version, n, h, w, c = _IMGD_HEADER.unpack_from(blob, 0)
    if version != IMGD_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    count = n * h * w * c
    expected = _IMGD_HEADER.size + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"header declares {count} values ({expected} bytes) but file has {len(blob)} bytes",
            min(len(blob), expected),
        )
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=_IMGD_HEADER.size)
    return arr.astype(np.float64).reshape(n, h * w * c), h, w, c


def save_dataset(dataset: Dataset, path) -> None:
    write_imgd(path, dataset.items, dataset.height, dataset.width, dataset.channels)


def load_dataset(path, bounded: bool = True) -> Dataset:
    items, h, w, c = read_imgd(path)
    if items.shape[0] == 0:
        raise FormatError("dataset holds no items", _IMGD_HEADER.size)
    if bounded and (items.min() < 0.0 or items.max() > 1.0):
        raise FormatError("dataset values outside [0, 1]", _IMGD_HEADER.size)
    return Dataset(items, h, w, c, bounded=bounded)


# training --------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    lr_halving_period: int = 40
    max_grad_norm: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise InvalidArgument("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if self.lr_halving_period < 1 or self.max_grad_norm <= 0:
            raise InvalidArgument("lr_halving_period and max_grad_norm must be positive")


@dataclass
class TrainResult:
    model: FlowModel
    nll_trace: list = field(default_factory=list)  # nats per example, full dataset, after each epoch
    max_clipped_norm: float = 0.0


def mean_nll(model: FlowModel, items: np.ndarray) -> float:
    return -float(np.mean(model.log_prob(items)))


def train_flow(model: FlowModel, data: Dataset, cfg: TrainConfig, log=None) -> TrainResult:
    """Adam on the mean NLL with global-norm clipping and step-wise lr halving. Mutates ``model``."""
    if model.d != data.d:
        raise InvalidArgument(f"model dimension {model.d} != data dimension {data.d}")
    items = data.items
    n = items.shape[0]
    batch = min(cfg.batch_size, n)
    rng = make_rng(cfg.seed)
    state = AdamState(model.params.shape, lr=cfg.lr)
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        state.lr = cfg.lr * 0.5 ** (epoch // cfg.lr_halving_period)
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, batch)):
            nll, grad = model.nll_and_param_grad(items[order[start:start + batch]])
            if not math.isfinite(nll) or not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            grad, _ = clip_grad_norm(grad, cfg.max_grad_norm)
            result.max_clipped_norm = max(result.max_clipped_norm, float(np.linalg.norm(grad)))
            adam_step(state, model.params, grad)
        epoch_nll = mean_nll(model, items)
        if not math.isfinite(epoch_nll):
            raise NumericError(f"non-finite loss after epoch {epoch}")
        result.nll_trace.append(epoch_nll)
        if log is not None:
            log(epoch, epoch_nll)
    return result
