import numpy as np

from flowprior.flow import FlowModel
from flowprior.numkit import make_rng


def rel(a, b) -> float:
    """Norm-relative difference, symmetric in a and b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def random_flow(d, layers=2, hidden=16, seed=0, scale=0.3):
    """A non-identity flow: standard init plus Gaussian jitter on every weight."""
    rng = make_rng([seed, 77])
    model = FlowModel(d, layers, hidden, rng=rng)
    model.params += scale * rng.standard_normal(model.params.size)
    return model


def fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)
