"""The two trainable networks: velocity field and noise-optimizing encoder.

The velocity field maps (state, time, previous velocity) to a velocity and
is a 3-hidden-layer tanh MLP of width 64.  The encoder maps a data point to
the mean and variance of its adapted noise through a 2-hidden-layer tanh
trunk of width 16 with separate mean / log-variance heads; a Gaussian
perturbation can be injected after the first hidden layer so that repeated
encodings of the same point differ.

Each net has a taped `forward` (used in training) and an AD-free `predict`
on raw arrays (used by the samplers); the two are parity-tested.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor, tensor
from .backend import kernels

VELOCITY_HIDDEN = 64
VELOCITY_DEPTH = 3
ENCODER_HIDDEN = 16
ENCODER_DEPTH = 2


def init_affine(rng, fan_in, fan_out, zero=False, dtype=np.float32):
    """Weights uniform in ±1/sqrt(fan_in), biases zero."""
    if zero:
        w = np.zeros((fan_in, fan_out), dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform((fan_in, fan_out), -bound, bound, dtype=dtype)
    b = np.zeros(fan_out, dtype=dtype)
    return (
        Tensor(w, requires_grad=True),
        Tensor(b, requires_grad=True),
    )


def _check_time(t):
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(
            f"time values outside [0, 1]: range [{np.min(t)}, {np.max(t)}]"
        )


class VelocityField:
    """v(x_t, t, v_history) -> velocity; width-64, 3 hidden tanh layers."""

    def __init__(self, dim, seed=0, zero_output=True, hidden=VELOCITY_HIDDEN):
        self.dim = dim
        self.hidden = hidden
        rng = _param_stream(seed)
        in_dim = dim + 1 + dim
        self.w1, self.b1 = init_affine(rng, in_dim, hidden)
        self.w2, self.b2 = init_affine(rng, hidden, hidden)
        self.w3, self.b3 = init_affine(rng, hidden, hidden)
        # zero output layer => initial velocity identically 0
        self.w4, self.b4 = init_affine(rng, hidden, dim, zero=zero_output)

    def parameters(self):
        return [
            ("w1", self.w1), ("b1", self.b1),
            ("w2", self.w2), ("b2", self.b2),
            ("w3", self.w3), ("b3", self.b3),
            ("w4", self.w4), ("b4", self.b4),
        ]

    def forward(self, x_t, t, v_history):
        if x_t.data.shape != v_history.data.shape:
            raise ShapeMismatch(
                f"velocity forward: state {x_t.data.shape} vs history "
                f"{v_history.data.shape}"
            )
        if t.data.shape != (x_t.data.shape[0], 1):
            raise ShapeMismatch(
                f"velocity forward: t shape {t.data.shape}, "
                f"expected ({x_t.data.shape[0]}, 1)"
            )
        _check_time(t.data)
        h = ad.concat([x_t, t, v_history], axis=1)
        h = ad.tanh(ad.affine(h, self.w1, self.b1))
        h = ad.tanh(ad.affine(h, self.w2, self.b2))
        h = ad.tanh(ad.affine(h, self.w3, self.b3))
        return ad.affine(h, self.w4, self.b4)

    def predict(self, x, t, v_history):
        """AD-free forward on raw float32 arrays (sampling hot path)."""
        _check_time(t)
        if np.isscalar(t):
            t = np.full((x.shape[0], 1), t, dtype=x.dtype)
        h = np.ascontiguousarray(
            np.concatenate([x, t.astype(x.dtype), v_history], axis=1)
        )
        h = kernels.tanh_fwd(kernels.affine_fwd(h, self.w1.data, self.b1.data))
        h = kernels.tanh_fwd(kernels.affine_fwd(h, self.w2.data, self.b2.data))
        h = kernels.tanh_fwd(kernels.affine_fwd(h, self.w3.data, self.b3.data))
        return kernels.affine_fwd(h, self.w4.data, self.b4.data)


class Encoder:
    """E(x1) -> (mu, sigma^2) with optional mid-trunk perturbation."""

    def __init__(self, dim, seed=0, perturbation_scale=0.1, hidden=ENCODER_HIDDEN):
        if perturbation_scale < 0:
            raise ValueError("perturbation_scale must be >= 0")
        self.dim = dim
        self.hidden = hidden
        self.perturbation_scale = float(perturbation_scale)
        rng = _param_stream(seed)
        self.w1, self.b1 = init_affine(rng, dim, hidden)
        self.w2, self.b2 = init_affine(rng, hidden, hidden)
        self.wm, self.bm = init_affine(rng, hidden, dim)
        self.wv, self.bv = init_affine(rng, hidden, dim)

    def parameters(self):
        return [
            ("enc_w1", self.w1), ("enc_b1", self.b1),
            ("enc_w2", self.w2), ("enc_b2", self.b2),
            ("enc_wm", self.wm), ("enc_bm", self.bm),
            ("enc_wv", self.wv), ("enc_bv", self.bv),
        ]

    def draw_perturbation(self, batch, rng):
        """Scaled tau ~ N(0, I) for the first hidden layer, or None."""
        if self.perturbation_scale == 0.0 or rng is None:
            return None
        return self.perturbation_scale * rng.normal((batch, self.hidden))

    def forward(self, x1, rng=None, tau=None):
        if tau is None:
            tau = self.draw_perturbation(x1.data.shape[0], rng)
        h = ad.tanh(ad.affine(x1, self.w1, self.b1))
        if tau is not None:
            h = ad.add(h, tensor(np.asarray(tau, dtype=h.data.dtype)))
        h = ad.tanh(ad.affine(h, self.w2, self.b2))
        mu = ad.affine(h, self.wm, self.bm)
        log_var = ad.affine(h, self.wv, self.bv)
        return mu, ad.exp(log_var)

    def predict(self, x1, rng=None, tau=None):
        if tau is None:
            tau = self.draw_perturbation(x1.shape[0], rng)
        h = kernels.tanh_fwd(kernels.affine_fwd(x1, self.w1.data, self.b1.data))
        if tau is not None:
            h = h + np.asarray(tau, dtype=h.dtype)
        h = kernels.tanh_fwd(kernels.affine_fwd(h, self.w2.data, self.b2.data))
        mu = kernels.affine_fwd(h, self.wm.data, self.bm.data)
        log_var = kernels.affine_fwd(h, self.wv.data, self.bv.data)
        return mu, np.exp(log_var)


def reparameterize(eps, mu, sigma2, scale_by_std=False):
    """Adapted noise eps * sigma^2 + mu (variance scaling, as defined).

    `scale_by_std=True` switches to the conventional eps * sigma scaling
    for ablations.
    """
    if np.any(sigma2.data <= 0):
        raise ValueError("reparameterize: sigma2 must be strictly positive")
    factor = ad.sqrt(sigma2) if scale_by_std else sigma2
    return ad.add(ad.mul(eps, factor), mu)


def velocity_forward(vf, x_t, t, v_history):
    return vf.forward(x_t, t, v_history)


def encoder_forward(enc, x1, rng=None, tau=None):
    return enc.forward(x1, rng=rng, tau=tau)


def _param_stream(seed):
    from .rng import RngStream

    return RngStream(seed)
