"""Numerical checks of the denoising recovery bound ``||x_bar - x*|| <= ||delta|| / (mu sigma^2 + 1)``.

The bound concerns gradient descent on ``q(x) + ||x_tilde - x||^2 / (2 sigma^2)``
started at ``x_tilde = x* + delta``, where ``q = -log p`` is mu-strongly convex on
the ball of radius ``||delta||`` around the local density maximum ``x*``.
It is asserted only for analytic priors whose mu is known; learned flows get
an advisory probe with an estimated curvature.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .flow import FlowModel
from .numkit import InvalidArgument, as_array

PRIOR_KINDS = ("gaussian", "quartic")


@dataclass
class AnalyticPrior:
    """``gaussian``: q = ||u||^2 / (2 tau^2).  ``quartic``: q = a ||u||^2 + b ||u||^4.  u = x - x*."""

    kind: str
    x_star: np.ndarray
    tau: float = 1.0
    a: float = 1.0
    b: float = 0.1

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise InvalidArgument(f"unknown prior kind {self.kind!r}")
        self.x_star = np.atleast_1d(as_array(self.x_star))
        if self.kind == "gaussian" and not self.tau > 0:
            raise InvalidArgument("tau must be positive")
        if self.kind == "quartic" and not (self.a > 0 and self.b > 0):
            raise InvalidArgument("quartic prior needs a > 0 and b > 0")

    @property
    def dim(self) -> int:
        return self.x_star.size

    def q(self, x) -> float:
        u = as_array(x) - self.x_star
        r2 = float(u @ u)
        if self.kind == "gaussian":
            return r2 / (2.0 * self.tau**2)
        return self.a * r2 + self.b * r2 * r2

    def grad(self, x) -> np.ndarray:
        u = as_array(x) - self.x_star
        if self.kind == "gaussian":
            return u / self.tau**2
        return (2.0 * self.a + 4.0 * self.b * float(u @ u)) * u

    def mu(self, radius: float = 0.0) -> float:
        """Certified lower bound on the Hessian of q over the ball of ``radius`` around x*."""
        return 1.0 / self.tau**2 if self.kind == "gaussian" else 2.0 * self.a

    def smoothness(self, radius: float) -> float:
        """Certified upper bound on the Hessian of q over the ball of ``radius`` around x*."""
        if self.kind == "gaussian":
            return 1.0 / self.tau**2
        return 2.0 * self.a + 12.0 * self.b * radius**2


@dataclass
class BoundReport:
    delta_norm: float
    recovered_error: float
    bound: float
    mu: float
    sigma: float
    gd_steps: int
    converged: bool
    grad_norm: float
    max_iterate_dist: float
    x_bar: np.ndarray = field(repr=False, default=None)
    hypothesis_violated: bool = False

    @property
    def ratio(self) -> float:
        if self.bound == 0.0:
            return 0.0 if self.recovered_error == 0.0 else math.inf
        return self.recovered_error / self.bound

    def to_dict(self) -> dict:
        out = asdict(self)
        out["x_bar"] = None if self.x_bar is None else [float(v) for v in self.x_bar]
        out["ratio"] = self.ratio
        return out


def recovery_bound(delta_norm: float, mu: float, sigma: float) -> float:
    return delta_norm / (mu * sigma**2 + 1.0)


def _gradient_descent(grad_fn, x0, lr, tol, max_steps, center):
    x = x0.copy()
    max_dist = float(np.linalg.norm(x - center))
    g = grad_fn(x)
    gn = float(np.linalg.norm(g))
    steps = 0
    while gn > tol and steps < max_steps:
        x = x - lr * g
        steps += 1
        max_dist = max(max_dist, float(np.linalg.norm(x - center)))
        g = grad_fn(x)
        gn = float(np.linalg.norm(g))
    return x, gn, steps, max_dist


def denoise_gd(prior: AnalyticPrior, x_star, sigma: float, delta, lr: float | None = None,
               tol: float = 1e-10, max_steps: int = 1_000_000) -> BoundReport:
    """Plain gradient descent from ``x_star + delta`` on ``q(x) + ||x_tilde - x||^2 / (2 sigma^2)``.

    Hitting ``max_steps`` is reported through ``converged=False``, not raised.
    """
    x_star = np.atleast_1d(as_array(x_star))
    delta = np.atleast_1d(as_array(delta))
    if not sigma > 0 or not tol > 0:
        raise InvalidArgument("sigma and tol must be positive")
    if x_star.shape != delta.shape or x_star.shape != prior.x_star.shape:
        raise InvalidArgument("x_star, delta and prior dimensions disagree")
    r = float(np.linalg.norm(delta))
    curvature = prior.smoothness(r) + 1.0 / sigma**2
    lr_max = 1.0 / curvature
    if lr is None:
        lr = 0.5 * lr_max
    if not 0 < lr < lr_max:
        raise InvalidArgument(f"learning rate must lie in (0, {lr_max:.6g})")
    x_tilde = x_star + delta
    inv_var = 1.0 / sigma**2

    def grad(x):
        return prior.grad(x) + inv_var * (x - x_tilde)

    x_bar, gn, steps, max_dist = _gradient_descent(grad, x_tilde, lr, tol, max_steps, x_star)
    mu = prior.mu(r)
    return BoundReport(
        delta_norm=r,
        recovered_error=float(np.linalg.norm(x_bar - x_star)),
        bound=recovery_bound(r, mu, sigma),
        mu=mu,
        sigma=sigma,
        gd_steps=steps,
        converged=gn <= tol,
        grad_norm=gn,
        max_iterate_dist=max_dist,
        x_bar=x_bar,
    )


def gaussian_minimizer(x_star, delta, mu: float, sigma: float) -> np.ndarray:
    """Closed-form minimizer for the quadratic prior: x* + delta / (1 + mu sigma^2)."""
    return as_array(x_star) + as_array(delta) / (1.0 + mu * sigma**2)


def verify_bound(prior: AnalyticPrior, trials: int, rng: np.random.Generator, sigmas, delta_scales,
                 tol: float = 1e-10, slack: float = 1e-6) -> dict:
    """Run ``trials`` random noise directions for every (sigma, delta scale) pair.

    A converged trial violates the bound when error > bound * (1 + slack).
    """
    sigmas = list(sigmas)
    delta_scales = list(delta_scales)
    if trials < 1 or not sigmas or not delta_scales:
        raise InvalidArgument("need at least one trial, sigma and delta scale")
    rows, failures = [], []
    converged = violations = 0
    max_ratio = 0.0
    for sigma in sigmas:
        for scale in delta_scales:
            for t in range(trials):
                direction = rng.standard_normal(prior.dim)
                delta = scale * direction / np.linalg.norm(direction)
                if not prior.mu(scale) > 0:
                    failures.append({"sigma": sigma, "delta_scale": scale, "trial": t,
                                     "reason": "strong convexity not certified on the ball"})
                    continue
                rep = denoise_gd(prior, prior.x_star, sigma, delta, tol=tol)
                row = {"sigma": sigma, "delta_scale": scale, "trial": t, **rep.to_dict()}
                row.pop("x_bar")
                rows.append(row)
                if not rep.converged:
                    continue
                converged += 1
                max_ratio = max(max_ratio, rep.ratio)
                if rep.recovered_error > rep.bound * (1.0 + slack):
                    violations += 1
                    failures.append({**row, "reason": "error exceeds bound"})
    return {
        "prior": prior.kind,
        "cases": len(rows),
        "converged": converged,
        "violations": violations,
        "passed": converged - violations,
        "max_ratio": max_ratio,
        "failures": failures,
        "rows": rows,
    }


def _hvp(grad_fn, x, v, h):
    return (grad_fn(x + h * v) - grad_fn(x - h * v)) / (2.0 * h)


def flow_local_bound_probe(model: FlowModel, x_star, sigma: float, delta_scale: float,
                           rng: np.random.Generator, n_directions: int = 16, n_radii: int = 5,
                           fd_step: float = 1e-4, grad_tol: float = 1e-4, tol: float = 1e-8,
                           max_steps: int = 200_000, direction=None) -> BoundReport:
    """Advisory version of the bound for a learned flow density.

    The curvature ``mu_hat`` is the smallest Rayleigh quotient of the Hessian of
    ``q = -log p_model`` over random directions (plus the noise direction) at
    points along the segment from ``x*`` to ``x* + delta``. Hessian-vector products
    come from central differences of the score. ``mu_hat <= 0`` sets
    ``hypothesis_violated``. ``direction`` fixes the noise direction instead of drawing it.
    """
    x_star = as_array(x_star)
    gnorm = float(np.linalg.norm(model.grad_log_prob(x_star)))
    if gnorm > grad_tol:
        raise InvalidArgument(f"x_star is not a stationary point of log p (|grad| = {gnorm:.3g})")
    direction = rng.standard_normal(model.d) if direction is None else as_array(direction).copy()
    if direction.shape != (model.d,) or not np.linalg.norm(direction) > 0:
        raise InvalidArgument("direction must be a non-zero vector of the model dimension")
    direction /= np.linalg.norm(direction)
    delta = delta_scale * direction

    def q_grad(x):
        return -model.grad_log_prob(x)

    probes = [direction] + [v / np.linalg.norm(v) for v in rng.standard_normal((n_directions, model.d))]
    quotients = []
    for t in np.linspace(0.0, 1.0, n_radii):
        point = x_star + t * delta
        for v in probes:
            quotients.append(float(v @ _hvp(q_grad, point, v, fd_step)))
    mu_hat = min(quotients)
    m_hat = max(max(quotients), 0.0)

    x_tilde = x_star + delta
    inv_var = 1.0 / sigma**2
    lr = 0.5 / (m_hat + inv_var)
    x_bar, gn, steps, max_dist = _gradient_descent(
        lambda x: q_grad(x) + inv_var * (x - x_tilde), x_tilde, lr, tol, max_steps, x_star)
    return BoundReport(
        delta_norm=delta_scale,
        recovered_error=float(np.linalg.norm(x_bar - x_star)),
        bound=recovery_bound(delta_scale, mu_hat, sigma) if mu_hat > 0 else math.inf,
        mu=mu_hat,
        sigma=sigma,
        gd_steps=steps,
        converged=gn <= tol,
        grad_norm=gn,
        max_iterate_dist=max_dist,
        x_bar=x_bar,
        hypothesis_violated=mu_hat <= 0,
    )
