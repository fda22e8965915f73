import numpy as np

from mpcguide.autodiff import Tape, backward


def grad_of(fn, x):
    """Tape gradient of scalar ``fn(Tensor)`` at ``x``."""
    with Tape() as tape:
        xt = tape.watch(x)
        out = fn(xt)
    return backward(out, [xt])[0]


def central_diff(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar ``fn(ndarray) -> float``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
