"""Affine-coupling normalizing flow over a standard-normal base.

The generator ``G`` maps latent ``z`` to data ``x`` by applying the coupling
layers in order; ``G^{-1}`` applies their inverses in reverse order.  All
parameters of a model live in one flat float64 vector (``FlowModel.params``);
each layer's weight matrices are views into it, so optimizers and the
checkpoint writer work on a single array.

Gradients are hand-derived reverse passes (no autodiff framework).
"""

from __future__ import annotations

import math
import os
import struct

import numpy as np

from .numkit import FormatError, InvalidArgument, NumericError, as_array

LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"NFCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIId")  # magic, version, d, layer_count, hidden_width, s_clamp


def alternating_mask(d: int, index: int) -> np.ndarray:
    """Even coordinates pass through on even layers, odd coordinates on odd layers."""
    return ((np.arange(d) + index) % 2 == 0).astype(np.float64)


class CouplingLayer:
    """One affine coupling: ``y = m*x + (1-m)*(x*exp(s(x_m)) + t(x_m))``.

    The conditioner is a tanh MLP with two hidden layers. It only produces
    scale/shift values for the transformed coordinates, and the scale passes
    through ``s_clamp * tanh(.)`` so ``|s| <= s_clamp``.
    """

    def __init__(self, mask, hidden: int, s_clamp: float = 3.0, index: int = 0):
        mask = np.asarray(mask, dtype=np.float64)
        if not np.all((mask == 0) | (mask == 1)):
            raise InvalidArgument("mask entries must be 0 or 1")
        if mask.min() != 0 or mask.max() != 1:
            raise InvalidArgument("mask needs at least one pass-through and one transformed coordinate")
        self.mask = mask
        self.d = mask.size
        self.hidden = int(hidden)
        self.s_clamp = float(s_clamp)
        self.index = index
        self.pass_idx = np.flatnonzero(mask == 1)
        self.trans_idx = np.flatnonzero(mask == 0)
        k, r, h = self.pass_idx.size, self.trans_idx.size, self.hidden
        self.shapes = [(h, k), (h,), (h, h), (h,), (2 * r, h), (2 * r,)]
        self.n_params = sum(int(np.prod(s)) for s in self.shapes)
        self.bind(np.zeros(self.n_params))

    def bind(self, flat: np.ndarray):
        """Point W1, b1, W2, b2, W3, b3 at consecutive slices of ``flat``."""
        views, pos = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            views.append(flat[pos:pos + size].reshape(shape))
            pos += size
        self.W1, self.b1, self.W2, self.b2, self.W3, self.b3 = views
        self.flat = flat

    # conditioner ---------------------------------------------------------

    def conditioner(self, u: np.ndarray):
        r = self.trans_idx.size
        h1 = np.tanh(u @ self.W1.T + self.b1)
        h2 = np.tanh(h1 @ self.W2.T + self.b2)
        out = h2 @ self.W3.T + self.b3
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite conditioner output in coupling layer {self.index}")
        th = np.tanh(out[:, :r])
        s = self.s_clamp * th
        t = out[:, r:]
        return s, t, (u, h1, h2, th)

    def conditioner_backward(self, ds, dt, cache, grad_flat=None):
        """Backprop (ds, dt) to the conditioner input; accumulate parameter grads into ``grad_flat``."""
        u, h1, h2, th = cache
        dout = np.concatenate([ds * self.s_clamp * (1.0 - th * th), dt], axis=1)
        dh2 = dout @ self.W3
        da2 = dh2 * (1.0 - h2 * h2)
        dh1 = da2 @ self.W2
        da1 = dh1 * (1.0 - h1 * h1)
        if grad_flat is not None:
            grads = [da1.T @ u, da1.sum(0), da2.T @ h1, da2.sum(0), dout.T @ h2, dout.sum(0)]
            pos = 0
            for g in grads:
                grad_flat[pos:pos + g.size] += g.reshape(-1)
                pos += g.size
        return da1 @ self.W1

    # transforms ----------------------------------------------------------

    def forward(self, x: np.ndarray):
        s, t, cache = self.conditioner(x[:, self.pass_idx])
        y = x.copy()
        es = np.exp(s)
        y[:, self.trans_idx] = x[:, self.trans_idx] * es + t
        return y, s.sum(1), (cache, x[:, self.trans_idx], es)

    def inverse(self, y: np.ndarray):
        s, t, cache = self.conditioner(y[:, self.pass_idx])
        x = y.copy()
        e = np.exp(-s)
        x_t = (y[:, self.trans_idx] - t) * e
        x[:, self.trans_idx] = x_t
        return x, -s.sum(1), (cache, x_t, e)

    def forward_backward(self, gy, c, aux, grad_flat=None):
        """Reverse pass of ``forward``: ``gy`` is dL/dy, ``c`` the weight of this layer's logdet in L."""
        cache, x_t, es = aux
        g_t = gy[:, self.trans_idx]
        gx = gy.copy()
        gx[:, self.trans_idx] = g_t * es
        ds = g_t * x_t * es + np.reshape(c, (-1, 1))
        du = self.conditioner_backward(ds, g_t, cache, grad_flat)
        gx[:, self.pass_idx] += du
        return gx

    def inverse_backward(self, gx, c, aux, grad_flat=None):
        """Reverse pass of ``inverse``: ``gx`` is dL/dx, ``c`` the weight of the inverse logdet in L."""
        cache, x_t, e = aux
        g_t = gx[:, self.trans_idx]
        gy = gx.copy()
        gy[:, self.trans_idx] = g_t * e
        ds = -g_t * x_t - np.reshape(c, (-1, 1))
        du = self.conditioner_backward(ds, -g_t * e, cache, grad_flat)
        gy[:, self.pass_idx] += du
        return gy


class FlowModel:
    """Stack of coupling layers over N(0, I_d). Zero layers is a plain standard normal."""

    def __init__(self, d: int, n_layers: int = 4, hidden: int = 64, s_clamp: float = 3.0,
                 rng: np.random.Generator | None = None, masks=None):
        if d < 1:
            raise InvalidArgument("dimension must be positive")
        if n_layers > 0 and d < 2 and masks is None:
            raise InvalidArgument("coupling layers need d >= 2")
        self.d = int(d)
        self.hidden = int(hidden)
        self.s_clamp = float(s_clamp)
        if masks is None:
            masks = [alternating_mask(d, i) for i in range(n_layers)]
        self.layers = [CouplingLayer(m, hidden, s_clamp, index=i) for i, m in enumerate(masks)]
        self.params = np.zeros(sum(layer.n_params for layer in self.layers))
        self._bind()
        if rng is not None:
            self.init_weights(rng)

    def _bind(self):
        pos = 0
        for layer in self.layers:
            layer.bind(self.params[pos:pos + layer.n_params])
            layer.offset = pos
            pos += layer.n_params

    def __setstate__(self, state):
        # pickling copies the per-layer views; point them back into the flat vector
        self.__dict__.update(state)
        self._bind()

    def init_weights(self, rng: np.random.Generator):
        """Small uniform hidden weights; output layer zeroed so the flow starts as the identity."""
        for layer in self.layers:
            for W in (layer.W1, layer.W2):
                bound = 1.0 / math.sqrt(W.shape[1])
                W[...] = rng.uniform(-bound, bound, size=W.shape)
            layer.b1[...] = 0.0
            layer.b2[...] = 0.0
            layer.W3[...] = 0.0
            layer.b3[...] = 0.0

    def set_params(self, flat):
        flat = as_array(flat)
        if flat.shape != self.params.shape:
            raise InvalidArgument(f"expected {self.params.size} parameters, got {flat.size}")
        self.params[...] = flat

    def copy(self) -> "FlowModel":
        other = FlowModel(self.d, 0, self.hidden, self.s_clamp, masks=[l.mask for l in self.layers])
        other.params[...] = self.params
        return other

    @property
    def masks(self):
        return [layer.mask for layer in self.layers]

    # batched passes --------------------------------------------------------

    def _check(self, x, name):
        x = as_array(x)
        single = x.ndim == 1
        x2 = x.reshape(1, -1) if single else x
        if x2.ndim != 2 or x2.shape[1] != self.d:
            raise InvalidArgument(f"{name} must have trailing dimension {self.d}, got shape {x.shape}")
        return x2, single

    def forward(self, z, keep=False):
        z2, single = self._check(z, "z")
        x, logdet, auxes = z2, np.zeros(z2.shape[0]), []
        for layer in self.layers:
            x, ld, aux = layer.forward(x)
            logdet += ld
            if keep:
                auxes.append(aux)
        if keep:
            return x, logdet, auxes
        return (x[0], float(logdet[0])) if single else (x, logdet)

    def inverse(self, x, keep=False):
        x2, single = self._check(x, "x")
        z, logdet, auxes = x2, np.zeros(x2.shape[0]), []
        for layer in reversed(self.layers):
            z, ld, aux = layer.inverse(z)
            logdet += ld
            if keep:
                auxes.append(aux)
        if keep:
            return z, logdet, auxes
        return (z[0], float(logdet[0])) if single else (z, logdet)

    def log_prob(self, x):
        x2, single = self._check(x, "x")
        z, logdet = self.inverse(x2)
        lp = -0.5 * np.sum(z * z, axis=1) - 0.5 * self.d * LOG_2PI + logdet
        return float(lp[0]) if single else lp

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if n < 1:
            raise InvalidArgument("n must be >= 1")
        z = rng.standard_normal((n, self.d))
        return self.forward(z)[0]

    def vjp_z(self, z, upstream):
        """``J_G(z)^T upstream``."""
        z2, single = self._check(z, "z")
        u2, _ = self._check(upstream, "upstream")
        _, _, auxes = self.forward(z2, keep=True)
        g = np.broadcast_to(u2, z2.shape).copy()
        for layer, aux in zip(reversed(self.layers), reversed(auxes)):
            g = layer.forward_backward(g, 0.0, aux)
        return g[0] if single else g

    def _logprob_backward(self, x2, seed_scale, grad_flat=None):
        """Gradient of ``sum_i w_i log p(x_i)`` w.r.t. x, with ``w = seed_scale``."""
        z, logdet, auxes = self.inverse(x2, keep=True)
        w = np.broadcast_to(np.asarray(seed_scale, dtype=np.float64), (x2.shape[0],))
        g = -z * w[:, None]
        # auxes are in application order (last layer first); backprop starts from layer 0
        for layer, aux in zip(self.layers, reversed(auxes)):
            gview = None if grad_flat is None else grad_flat[layer.offset:layer.offset + layer.n_params]
            g = layer.inverse_backward(g, w, aux, gview)
        lp = -0.5 * np.sum(z * z, axis=1) - 0.5 * self.d * LOG_2PI + logdet
        return g, lp

    def grad_log_prob(self, x):
        x2, single = self._check(x, "x")
        g, _ = self._logprob_backward(x2, 1.0)
        return g[0] if single else g

    def nll_and_param_grad(self, batch):
        batch = as_array(batch)
        if batch.ndim != 2 or batch.shape[0] == 0:
            raise InvalidArgument("batch must be a non-empty n x d array")
        if batch.shape[1] != self.d:
            raise InvalidArgument(f"batch has dimension {batch.shape[1]}, model expects {self.d}")
        n = batch.shape[0]
        grad = np.zeros_like(self.params)
        _, lp = self._logprob_backward(batch, -1.0 / n, grad)
        return -float(np.mean(lp)), grad


# module-level operations ---------------------------------------------------------

def _rows(x):
    x = as_array(x)
    return (x.reshape(1, -1), True) if x.ndim == 1 else (x, False)


def coupling_forward(layer: CouplingLayer, x):
    x2, single = _rows(x)
    y, ld, _ = layer.forward(x2)
    return (y[0], float(ld[0])) if single else (y, ld)


def coupling_inverse(layer: CouplingLayer, y):
    y2, single = _rows(y)
    x, ld, _ = layer.inverse(y2)
    return (x[0], float(ld[0])) if single else (x, ld)


def flow_log_prob(model: FlowModel, x):
    return model.log_prob(x)


def flow_sample(model: FlowModel, rng: np.random.Generator, n: int) -> np.ndarray:
    return model.sample(rng, n)


def flow_grad_z(model: FlowModel, z, upstream):
    return model.vjp_z(z, upstream)


def flow_grad_logprob_x(model: FlowModel, x):
    return model.grad_log_prob(x)


def flow_param_grad(model: FlowModel, batch) -> np.ndarray:
    return model.nll_and_param_grad(batch)[1]


def flow_find_mode(model: FlowModel, x0, tol: float = 1e-6, max_steps: int = 20000):
    """Gradient ascent on log p with Armijo backtracking. Returns (x, grad_norm, steps)."""
    x = as_array(x0).copy()
    lp = model.log_prob(x)
    g = model.grad_log_prob(x)
    step = 0.1
    for it in range(max_steps):
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return x, gn, it
        while True:
            cand = x + step * g
            lp_c = model.log_prob(cand)
            if lp_c >= lp + 0.5 * step * gn * gn:
                break
            step *= 0.5
            if step < 1e-16:
                return x, gn, it
        x, lp = cand, lp_c
        g = model.grad_log_prob(x)
        step *= 2.0
    return x, float(np.linalg.norm(g)), max_steps


# checkpoint format ------------------------------------------------------------

def checkpoint_save(model: FlowModel, path) -> None:
    """Write ``NFCK`` v1: header, u8 masks (layer-major), little-endian f64 parameters."""
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.d, len(model.layers),
                          model.hidden, model.s_clamp)
    masks = np.array([l.mask for l in model.layers], dtype=np.uint8).reshape(-1).tobytes()
    payload = model.params.astype("<f8").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + masks + payload)
    os.replace(tmp, path)


def checkpoint_load(path) -> FlowModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(blob)


def checkpoint_from_bytes(blob: bytes) -> FlowModel:
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(blob) < _HEADER.size:
        raise FormatError("truncated checkpoint header", len(blob))
    _, version, d, n_layers, hidden, s_clamp = _HEADER.unpack_from(blob, 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = _HEADER.size
    mask_end = pos + n_layers * d
    if len(blob) < mask_end:
        raise FormatError("truncated mask block", len(blob))
    masks = np.frombuffer(blob, dtype=np.uint8, count=n_layers * d, offset=pos)
    masks = masks.reshape(n_layers, d).astype(np.float64)
    try:
        model = FlowModel(d, 0, hidden, s_clamp, masks=list(masks))
    except InvalidArgument as exc:
        raise FormatError(f"invalid mask: {exc}", pos) from exc
    expected = mask_end + 8 * model.params.size
    if len(blob) < expected:
        raise FormatError(f"truncated parameters: expected {expected} bytes, got {len(blob)}", len(blob))
    if len(blob) > expected:
        raise FormatError("trailing bytes after parameters", expected)
    model.params[...] = np.frombuffer(blob, dtype="<f8", count=model.params.size, offset=mask_end)
    return model
