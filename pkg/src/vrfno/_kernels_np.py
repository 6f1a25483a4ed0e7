"""NumPy implementations of the hot numeric kernels.

This is the fallback backend used when the compiled extension is not
available.  Both backends expose the same functions with identical
semantics; `vrfno.backend` picks one at import time.

Gradient kernels accumulate (+=) into the provided buffers so callers can
sum contributions from several graph nodes without extra temporaries.
"""

import numpy as np

NAME = "python"


def all_finite(x):
    return bool(np.isfinite(x).all())


def affine_fwd(x, w, b):
    """y[B,O] = x[B,I] @ w[I,O] + b[O]."""
    y = x @ w
    y += b
    return y


def affine_bwd(x, w, gy, gx, gw, gb):
    """Accumulate gradients of an affine layer; any output buffer may be None."""
    if gx is not None:
        gx += gy @ w.T
    if gw is not None:
        gw += x.T @ gy
    if gb is not None:
        gb += gy.sum(axis=0)


def tanh_fwd(x):
    return np.tanh(x)


def tanh_bwd(y, gy, gx):
    gx += gy * (1.0 - y * y)


def _t_factor(t, ref):
    if np.isscalar(t):
        return ref.dtype.type(t)
    return np.asarray(t, dtype=ref.dtype).reshape(ref.shape[0], -1)


def lerp_fwd(x0, x1, t):
    """(1 - t) * x0 + t * x1, with t a scalar or a column of per-row times."""
    tt = _t_factor(t, x0)
    return x0 + tt * (x1 - x0)


def lerp_bwd(t, gy, gx0, gx1):
    tt = _t_factor(t, gy)
    if gx0 is not None:
        gx0 += (1.0 - tt) * gy
    if gx1 is not None:
        gx1 += tt * gy


def adam_step(p, g, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam update with bias correction; `step` is 1-based."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def sgd_step(p, g, lr):
    p -= lr * g
