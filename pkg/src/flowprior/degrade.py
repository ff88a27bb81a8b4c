"""Forward operators and noise models for observations ``y = f(x) + noise``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import LOG_2PI, FlowModel
from .numkit import InvalidArgument, as_array

SIGMA_FLOOR = 0.001
OPERATOR_KINDS = ("identity", "scale", "linear", "sign")


@dataclass(frozen=True)
class ForwardOperator:
    """``identity``, ``scale`` (x -> c*x), ``linear`` (x -> A x) or ``sign`` (x -> sign(A x)).

    ``sign`` maps 0 to +1. Its backward pass is straight-through: the
    quantizer is treated as the identity, so the vector-Jacobian product
    is ``A^T upstream``.
    """

    kind: str
    d: int
    c: float = 1.0
    A: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise InvalidArgument(f"unknown operator kind {self.kind!r}")
        if self.kind in ("linear", "sign"):
            if self.A is None:
                raise InvalidArgument(f"{self.kind} operator needs a matrix")
            A = np.array(self.A, dtype=np.float64)  # private copy, frozen below
            if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] != self.d:
                raise InvalidArgument(f"matrix must be m x {self.d}, got {A.shape}")
            if not np.all(np.isfinite(A)):
                raise InvalidArgument("matrix has non-finite entries")
            A.setflags(write=False)
            object.__setattr__(self, "A", A)

    @property
    def m(self) -> int:
        return self.A.shape[0] if self.A is not None else self.d

    @property
    def is_linear(self) -> bool:
        return self.kind != "sign"

    def matrix(self) -> np.ndarray:
        """Dense matrix of a linear operator."""
        if self.kind == "identity":
            return np.eye(self.d)
        if self.kind == "scale":
            return self.c * np.eye(self.d)
        if self.kind == "linear":
            return self.A
        raise InvalidArgument("sign operator has no matrix form")

    def __call__(self, x):
        return apply_forward(self, x)


def identity_op(d: int) -> ForwardOperator:
    return ForwardOperator("identity", d)


def scale_op(d: int, c: float) -> ForwardOperator:
    return ForwardOperator("scale", d, c=float(c))


def gaussian_matrix(m: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Entries i.i.d. N(0, 1/m)."""
    if m < 1 or d < 1:
        raise InvalidArgument("matrix dimensions must be positive")
    return rng.standard_normal((m, d)) / math.sqrt(m)


def linear_op(A) -> ForwardOperator:
    A = as_array(A)
    if A.ndim != 2:
        raise InvalidArgument(f"matrix must be 2-D, got shape {A.shape}")
    return ForwardOperator("linear", A.shape[1], A=A)


def sign_op(A) -> ForwardOperator:
    A = as_array(A)
    if A.ndim != 2:
        raise InvalidArgument(f"matrix must be 2-D, got shape {A.shape}")
    return ForwardOperator("sign", A.shape[1], A=A)


def _check_len(v, n, name):
    v = as_array(v)
    if v.shape[-1] != n:
        raise InvalidArgument(f"{name} has length {v.shape[-1]}, expected {n}")
    return v


def apply_forward(op: ForwardOperator, x) -> np.ndarray:
    x = _check_len(x, op.d, "x")
    if op.kind == "identity":
        return x.copy()
    if op.kind == "scale":
        return op.c * x
    ax = x @ op.A.T
    if op.kind == "linear":
        return ax
    return np.where(ax >= 0.0, 1.0, -1.0)


def forward_vjp(op: ForwardOperator, x, upstream) -> np.ndarray:
    _check_len(x, op.d, "x")
    upstream = _check_len(upstream, op.m, "upstream")
    if op.kind == "identity":
        return upstream.copy()
    if op.kind == "scale":
        return op.c * upstream
    return upstream @ op.A


# noise standard deviations ----------------------------------------------------

def sinusoidal_sigma(k, amplitude: float = 0.1):
    """Periodic (period 16) standard deviation profile over pixel/row index ``k``, clamped to [0.001, 1]."""
    k = np.asarray(k, dtype=np.float64)
    raw = amplitude * (np.exp(np.sin(2.0 * np.pi * k / 16.0)) - 1.0) / (math.e - 1.0)
    out = np.clip(raw, SIGMA_FLOOR, 1.0)
    return float(out) if out.ndim == 0 else out


def radial_sigma(pixel, center, amplitude: float = 0.1):
    """``amplitude * exp(-0.005 * dist^2)`` clamped to [0.001, 1000]."""
    pixel = np.asarray(pixel, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    d2 = np.sum((pixel - center) ** 2, axis=-1)
    out = np.clip(amplitude * np.exp(-0.005 * d2), SIGMA_FLOOR, 1000.0)
    return float(out) if out.ndim == 0 else out


def sinusoidal_rows(height: int, width: int, amplitude: float = 0.1) -> np.ndarray:
    """Flattened per-pixel sigma where every pixel in row k gets the sinusoidal sigma of k."""
    return np.repeat(sinusoidal_sigma(np.arange(height), amplitude), width)


def sinusoidal_vector(m: int, amplitude: float = 0.1) -> np.ndarray:
    return sinusoidal_sigma(np.arange(m), amplitude)


def radial_image(height: int, width: int, center=None, amplitude: float = 0.1) -> np.ndarray:
    if center is None:
        center = (height // 2 - 1, width // 2 - 1)
    rr, cc = np.mgrid[0:height, 0:width]
    return radial_sigma(np.stack([rr, cc], axis=-1), center, amplitude).reshape(-1)


# noise models ----------------------------------------------------------------

class NoiseModel:
    dim: int

    def log_prob(self, delta) -> float:
        raise NotImplementedError

    def grad_log_prob(self, delta) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class DiagGauss(NoiseModel):
    """Independent Gaussian noise with per-coordinate std and mean.

    Standard deviations are floored at 0.001. ``allow_zero=True`` skips the
    floor so exact zeros produce noiseless samples; such a model has no density.
    """

    kind = "diag_gauss"

    def __init__(self, sigma, mean=0.0, allow_zero: bool = False):
        sigma = np.atleast_1d(as_array(sigma)).copy()
        if np.any(sigma < 0):
            raise InvalidArgument("noise std must be non-negative")
        if not allow_zero:
            sigma = np.maximum(sigma, SIGMA_FLOOR)
        self.sigma = sigma
        self.dim = sigma.size
        self.mean = np.broadcast_to(as_array(mean), sigma.shape).copy()
        self._degenerate = bool(np.any(sigma == 0))

    def _resid(self, delta):
        if self._degenerate:
            raise InvalidArgument("zero-std noise model has no density")
        delta = _check_len(delta, self.dim, "noise")
        return (delta - self.mean) / self.sigma

    def log_prob(self, delta):
        u = self._resid(delta)
        return float(-0.5 * u @ u - np.sum(np.log(self.sigma)) - 0.5 * self.dim * LOG_2PI)

    def grad_log_prob(self, delta):
        return -self._resid(delta) / self.sigma

    def sample(self, rng):
        return self.mean + self.sigma * rng.standard_normal(self.dim)


class IsoGauss(DiagGauss):
    kind = "iso_gauss"

    def __init__(self, sigma: float, dim: int, mean=0.0, allow_zero: bool = False):
        super().__init__(np.full(dim, float(sigma)), mean, allow_zero)
        self.scalar_sigma = float(self.sigma[0])


class FlowNoise(NoiseModel):
    """Noise ``shift + scale * u`` with ``u`` drawn from a trained flow."""

    kind = "flow_noise"

    def __init__(self, model: FlowModel, shift=0.0, scale: float = 1.0):
        if scale == 0:
            raise InvalidArgument("flow noise scale must be non-zero")
        self.model = model
        self.dim = model.d
        self.shift = np.broadcast_to(as_array(shift), (model.d,)).copy()
        self.scale = float(scale)

    def log_prob(self, delta):
        delta = _check_len(delta, self.dim, "noise")
        u = (delta - self.shift) / self.scale
        return self.model.log_prob(u) - self.dim * math.log(abs(self.scale))

    def grad_log_prob(self, delta):
        delta = _check_len(delta, self.dim, "noise")
        return self.model.grad_log_prob((delta - self.shift) / self.scale) / self.scale

    def sample(self, rng):
        return self.shift + self.scale * self.model.sample(rng, 1)[0]


def noise_log_prob(nm: NoiseModel, delta) -> float:
    return nm.log_prob(delta)


def noise_grad_log_prob(nm: NoiseModel, delta) -> np.ndarray:
    return nm.grad_log_prob(delta)


def sample_noise(nm: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    return nm.sample(rng)


def make_observation(op: ForwardOperator, nm: NoiseModel, x, rng: np.random.Generator) -> np.ndarray:
    fx = apply_forward(op, x)
    if nm.dim != fx.shape[-1]:
        raise InvalidArgument(f"noise dimension {nm.dim} != observation dimension {fx.shape[-1]}")
    return fx + nm.sample(rng)
