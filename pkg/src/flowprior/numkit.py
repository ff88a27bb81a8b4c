"""Numeric foundation: error types, seeded RNG streams, Adam, finite differences, PSNR.

Arrays are plain float64 ``numpy.ndarray`` objects throughout the package.
Random streams are ``numpy.random.Generator`` instances backed by PCG64, whose
output sequence for a given seed is fixed across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class InvalidArgument(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


PSNR_IDENTICAL = math.inf  # psnr() sentinel for MSE == 0


def make_rng(seed) -> np.random.Generator:
    """PCG64 stream. ``seed`` may be an int or a sequence of ints (hierarchical seeding)."""
    return np.random.Generator(np.random.PCG64(seed))


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def gaussian_sample(rng: np.random.Generator, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if not std >= 0:
        raise InvalidArgument(f"std must be non-negative, got {std}")
    return mean + std * rng.standard_normal(shape)


@dataclass
class AdamState:
    shape: tuple
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam update, applied to ``params`` in place (also returned)."""
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != state.shape or grad.shape != state.shape:
        raise InvalidArgument(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.shape}"
        )
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Rescale ``grad`` so its global 2-norm is at most ``max_norm``. Returns (grad, pre-clip norm)."""
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise InvalidArgument(f"step h must be positive, got {h}")
    x = as_array(x)
    flat = x.reshape(-1).copy()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(flat.reshape(x.shape)))
        flat[i] = orig - h
        fm = float(f(flat.reshape(x.shape)))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value while differencing index {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def psnr(reference, candidate, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB. Identical inputs give ``PSNR_IDENTICAL`` (+inf)."""
    reference = as_array(reference)
    candidate = as_array(candidate)
    if reference.shape != candidate.shape:
        raise InvalidArgument(f"shape mismatch: {reference.shape} vs {candidate.shape}")
    if not max_value > 0:
        raise InvalidArgument("max_value must be positive")
    mse = float(np.mean((reference - candidate) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(max_value**2 / mse)


def relative_error(a, b, floor: float = 1e-6) -> float:
    """Max coordinatewise |a-b| / max(|a|, |b|); coordinates where both are below ``floor`` count absolutely."""
    a = as_array(a).reshape(-1)
    b = as_array(b).reshape(-1)
    scale = np.maximum(np.abs(a), np.abs(b))
    keep = scale > floor
    if not keep.any():
        return float(np.max(np.abs(a - b), initial=0.0))
    err = np.abs(a - b)[keep] / scale[keep]
    # coordinates below the floor are judged absolutely
    small = float(np.max(np.abs(a - b)[~keep], initial=0.0))
    return max(float(err.max()), small)
