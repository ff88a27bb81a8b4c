"""Inverse-problem solvers over a flow prior.

Every loss returns ``(value, gradient)``. Gradients w.r.t. the latent ``z``
are assembled by chaining: noise score -> operator VJP -> prior score in x ->
flow VJP back to z.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import fft

from .degrade import ForwardOperator, NoiseModel, apply_forward, forward_vjp
from .flow import FlowModel
from .numkit import AdamState, InvalidArgument, NumericError, adam_step, as_array, make_rng, psnr

METHODS = ("map", "mle", "bora", "hand", "lasso_dct")
# "observation" warm-starts from the inverse flow of the (unscaled) observation; identity/scale operators only
Z_INITS = ("zero", "gaussian", "observation")



# losses -----------------------------------------------------------------------

def _noise_term(nm: NoiseModel, op: ForwardOperator, x, y):
    """-log p_noise(y - f(x)) and its gradient w.r.t. x."""
    delta = y - apply_forward(op, x)
    value = -nm.log_prob(delta)
    grad_x = forward_vjp(op, x, nm.grad_log_prob(delta))
    return value, grad_x


def _prior_term(model: FlowModel, x, weight: float):
    """-weight * log p_model(x) and its gradient w.r.t. x."""
    if weight == 0.0:
        return 0.0, np.zeros_like(x)
    return -weight * model.log_prob(x), -weight * model.grad_log_prob(x)


def map_loss(model: FlowModel, nm: NoiseModel, op: ForwardOperator, z, y, beta: float = 1.0):
    """``-log p_noise(y - f(G(z))) - beta * log p_model(G(z))`` and its gradient in z."""
    z = as_array(z)
    y = as_array(y)
    x = model.forward(z)[0]
    noise_val, gx = _noise_term(nm, op, x, y)
    prior_val, gp = _prior_term(model, x, beta)
    return noise_val + prior_val, model.vjp_z(z, gx + gp)


def map_loss_x(model: FlowModel, nm: NoiseModel, op: ForwardOperator, x, y, beta: float = 1.0):
    """Same objective parameterized directly by the signal ``x``."""
    x = as_array(x)
    noise_val, gx = _noise_term(nm, op, x, as_array(y))
    prior_val, gp = _prior_term(model, x, beta)
    return noise_val + prior_val, gx + gp


def mle_loss(model: FlowModel, nm: NoiseModel, op: ForwardOperator, z, y):
    return map_loss(model, nm, op, z, y, beta=0.0)


def _residual_term(model: FlowModel, op: ForwardOperator, z, y):
    x = model.forward(z)[0]
    r = y - apply_forward(op, x)
    return float(r @ r), x, -2.0 * forward_vjp(op, x, r)


def bora_loss(model: FlowModel, op: ForwardOperator, z, y, lam: float):
    """``||y - f(G(z))||^2 + lam * ||z||^2``."""
    z = as_array(z)
    val, _, gx = _residual_term(model, op, z, as_array(y))
    return val + lam * float(z @ z), model.vjp_z(z, gx) + 2.0 * lam * z


def hand_loss(model: FlowModel, op: ForwardOperator, z, y, gamma: float):
    """``||y - f(G(z))||^2 + gamma * ||z||``; the subgradient of ``||z||`` at 0 is taken as 0."""
    z = as_array(z)
    val, _, gx = _residual_term(model, op, z, as_array(y))
    nz = float(np.linalg.norm(z))
    reg_grad = gamma * z / nz if nz > 0 else np.zeros_like(z)
    return val + gamma * nz, model.vjp_z(z, gx) + reg_grad


def flow_penalized_loss(model: FlowModel, op: ForwardOperator, z, y, gamma: float):
    """``||y - f(G(z))||^2 - gamma * log p_model(G(z))``, the likelihood-penalized least squares form."""
    z = as_array(z)
    val, x, gx = _residual_term(model, op, z, as_array(y))
    prior_val, gp = _prior_term(model, x, gamma)
    return val + prior_val, model.vjp_z(z, gx + gp)


# DCT / LASSO baseline -------------------------------------------------------------

def dct2(x, shape=None) -> np.ndarray:
    """Orthonormal type-II DCT; separable 2-D when ``shape`` (h, w) is given."""
    x = as_array(x)
    if shape is None:
        return fft.dct(x, type=2, norm="ortho")
    return fft.dctn(x.reshape(shape), type=2, norm="ortho").reshape(x.shape)


def idct2(c, shape=None) -> np.ndarray:
    c = as_array(c)
    if shape is None:
        return fft.idct(c, type=2, norm="ortho")
    return fft.idctn(c.reshape(shape), type=2, norm="ortho").reshape(c.shape)


def soft_threshold(v, thresh):
    v = as_array(v)
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def spectral_norm_sq(A: np.ndarray, tol: float = 1e-12, max_iter: int = 5000, seed: int = 0) -> float:
    """Largest eigenvalue of ``A^T A`` by power iteration."""
    v = make_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= tol * new:
            return new
        lam = new
    raise NumericError(f"power iteration did not converge in {max_iter} iterations")


# solver ---------------------------------------------------------------------------

@dataclass
class SolveConfig:
    method: str = "map"
    steps: int = 300
    lr: float = 0.02
    beta: float = 1.0
    gamma: float = 0.0
    lam: float = 0.01
    z_init: str = "zero"
    z_init_std: float = 0.1
    latent_ball_radius: float | None = None
    space: str = "z"
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if min(self.beta, self.gamma, self.lam) < 0:
            raise InvalidArgument("beta, gamma and lambda must be non-negative")
        if self.z_init not in Z_INITS:
            raise InvalidArgument(f"z_init must be one of {Z_INITS}, got {self.z_init!r}")
        if self.space not in ("z", "x"):
            raise InvalidArgument("space must be 'z' or 'x'")
        if self.space == "x" and self.method != "map":
            raise InvalidArgument("signal-space optimization is only defined for the map method")
        if self.restarts < 1:
            raise InvalidArgument("restarts must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SolveReport:
    method: str
    reconstruction: np.ndarray
    final_z: np.ndarray | None
    loss_trace: list
    final_loss: float
    config_hash: str
    psnr_vs_truth: float | None = None
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "config_hash": self.config_hash,
            "psnr": self.psnr_vs_truth,
            "final_loss": self.final_loss,
            "loss_trace": [float(v) for v in self.loss_trace],
            "reconstruction": [float(v) for v in self.reconstruction],
            "final_z": None if self.final_z is None else [float(v) for v in self.final_z],
            **self.extra,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SolveReport":
        known = {"method", "config_hash", "psnr", "final_loss", "loss_trace", "reconstruction", "final_z"}
        return cls(
            method=rec["method"],
            reconstruction=np.asarray(rec["reconstruction"], dtype=np.float64),
            final_z=None if rec.get("final_z") is None else np.asarray(rec["final_z"], dtype=np.float64),
            loss_trace=list(rec["loss_trace"]),
            final_loss=rec["final_loss"],
            config_hash=rec["config_hash"],
            psnr_vs_truth=rec.get("psnr"),
            extra={k: v for k, v in rec.items() if k not in known},
        )


def _objective(model, nm, op, y, cfg: SolveConfig):
    if cfg.space == "x":
        return lambda x: map_loss_x(model, nm, op, x, y, cfg.beta)
    if cfg.method == "map":
        return lambda z: map_loss(model, nm, op, z, y, cfg.beta)
    if cfg.method == "mle":
        return lambda z: mle_loss(model, nm, op, z, y)
    if cfg.method == "bora":
        return lambda z: bora_loss(model, op, z, y, cfg.lam)
    return lambda z: hand_loss(model, op, z, y, cfg.gamma)


def _project(z, radius):
    if radius is None:
        return z
    nz = float(np.linalg.norm(z))
    if nz > radius:
        z = z * (radius / nz)
    return z


def _run(objective, v0, cfg: SolveConfig, radius):
    v = v0.copy()
    state = AdamState(v.shape, lr=cfg.lr)
    trace = []
    for step in range(cfg.steps):
        loss, grad = objective(v)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite loss at step {step}")
        trace.append(float(loss))
        adam_step(state, v, grad)
        v[...] = _project(v, radius)
    final = float(objective(v)[0])
    if not math.isfinite(final):
        raise NumericError(f"non-finite loss at step {cfg.steps}")
    return v, trace, final


def solve(model: FlowModel, nm: NoiseModel | None, op: ForwardOperator, y, cfg: SolveConfig,
          truth=None, image_shape=None) -> SolveReport:
    """Minimize the configured loss with Adam, from ``z_init``, for ``cfg.steps`` steps."""
    y = as_array(y)
    if y.shape != (op.m,):
        raise InvalidArgument(f"observation has shape {y.shape}, operator produces ({op.m},)")
    if cfg.method == "lasso_dct":
        return lasso_dct_solve(op, y, cfg.lam, cfg.steps, shape=image_shape, truth=truth,
                               config_hash=cfg.digest())
    if model.d != op.d:
        raise InvalidArgument(f"prior dimension {model.d} != operator input dimension {op.d}")
    if cfg.method in ("map", "mle") and nm is None:
        raise InvalidArgument(f"method {cfg.method} needs a noise model")
    if nm is not None and nm.dim != op.m:
        raise InvalidArgument(f"noise dimension {nm.dim} != measurement count {op.m}")

    objective = _objective(model, nm, op, y, cfg)
    radius = cfg.latent_ball_radius if cfg.method == "mle" else None
    if cfg.z_init == "observation" and op.kind not in ("identity", "scale"):
        raise InvalidArgument("z_init='observation' needs an identity or scale operator")
    best = None
    for r in range(cfg.restarts):
        if r == 0 and cfg.z_init == "zero":
            z0 = np.zeros(model.d)
        elif r == 0 and cfg.z_init == "observation":
            z0 = model.inverse(y / op.c if op.kind == "scale" else y)[0]
        else:
            z0 = cfg.z_init_std * make_rng([cfg.seed, r]).standard_normal(model.d)
        z0 = _project(z0, radius)
        v0 = model.forward(z0)[0] if cfg.space == "x" else z0
        v, trace, final = _run(objective, v0, cfg, radius)
        if best is None or final < best[2]:
            best = (v, trace, final)
    v, trace, final = best
    if cfg.space == "x":
        recon, z = v, model.inverse(v)[0]
    else:
        recon, z = model.forward(v)[0], v
    score = None if truth is None else psnr(truth, recon)
    return SolveReport(cfg.method, recon, z, trace, final, cfg.digest(), score)


def lasso_dct_solve(op: ForwardOperator, y, lam: float, steps: int, shape=None, truth=None,
                    config_hash: str = "") -> SolveReport:
    """ISTA on ``0.5 * ||y - A idct(c)||^2 + lam * ||c||_1`` with step ``1/||A||^2``."""
    if not op.is_linear:
        raise InvalidArgument("LASSO-DCT needs a linear forward operator")
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    y = as_array(y)
    if y.shape != (op.m,):
        raise InvalidArgument(f"observation has shape {y.shape}, operator produces ({op.m},)")
    A = op.matrix()
    L = spectral_norm_sq(A) * (1.0 + 1e-8)
    c = np.zeros(op.d)
    trace = []

    def objective(c):
        r = y - A @ idct2(c, shape)
        return 0.5 * float(r @ r) + lam * float(np.abs(c).sum()), r

    for _ in range(steps):
        val, r = objective(c)
        trace.append(val)
        grad = -dct2(A.T @ r, shape)
        c = soft_threshold(c - grad / L, lam / L)
    final, _ = objective(c)
    recon = idct2(c, shape)
    score = None if truth is None else psnr(truth, recon)
    return SolveReport("lasso_dct", recon, None, trace, final, config_hash, score,
                       extra={"coefficients_nonzero": int(np.count_nonzero(c))})
