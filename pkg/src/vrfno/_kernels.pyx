# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot numeric kernels.

Same contract as `vrfno._kernels_np`: fused affine forward/backward (BLAS
gemm plus bias handling in one call), tanh forward/backward, straight-line
interpolation, and the optimizer updates.  Matmuls go through the BLAS
linked into scipy; elementwise work is plain C loops, which removes the
per-op dispatch overhead that dominates at small batch sizes.
"""

import numpy as np

from libc.math cimport tanh as ctanh, tanhf as ctanhf, sqrt as csqrt, sqrtf as csqrtf
from libc.math cimport isfinite as c_isfinite
from scipy.linalg.cython_blas cimport sgemm, dgemm

NAME = "compiled"

cdef char _CN = b'N'
cdef char _CT = b'T'

ctypedef fused real:
    float
    double


cdef void _gemm(char transa, char transb, int m, int n, int k,
                real alpha, real* a, int lda, real* b, int ldb,
                real beta, real* c, int ldc) noexcept nogil:
    # Row-major C[m,n] = alpha * opA(A) @ opB(B) + beta * C via column-major BLAS.
    cdef float af, bf
    cdef double ad, bd
    if real is float:
        af = alpha
        bf = beta
        sgemm(&transb, &transa, &n, &m, &k, <float*>&af, <float*>b, &ldb,
              <float*>a, &lda, <float*>&bf, <float*>c, &ldc)
    else:
        ad = alpha
        bd = beta
        dgemm(&transb, &transa, &n, &m, &k, <double*>&ad, <double*>b, &ldb,
              <double*>a, &lda, <double*>&bd, <double*>c, &ldc)


def all_finite(x):
    arr = np.ascontiguousarray(x)
    if arr.dtype == np.float32:
        return _all_finite_impl[float](arr.reshape(-1))
    return _all_finite_impl[double](arr.reshape(-1).astype(np.float64, copy=False))


cdef bint _all_finite_impl(real[::1] x) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        if not c_isfinite(<double>x[i]):
            return False
    return True


def affine_fwd(x, w, b):
    y = np.empty((x.shape[0], w.shape[1]), dtype=x.dtype)
    if x.dtype == np.float32:
        _affine_fwd_impl[float](x, w, b, y)
    else:
        _affine_fwd_impl[double](x, w, b, y)
    return y


cdef void _affine_fwd_impl(real[:, ::1] x, real[:, ::1] w, real[::1] b,
                           real[:, ::1] y) noexcept nogil:
    cdef int m = x.shape[0], k = x.shape[1], n = w.shape[1]
    cdef Py_ssize_t i, j
    _gemm(_CN, _CN, m, n, k, <real>1.0, &x[0, 0], k, &w[0, 0], n,
          <real>0.0, &y[0, 0], n)
    for i in range(m):
        for j in range(n):
            y[i, j] += b[j]


def affine_bwd(x, w, gy, gx, gw, gb):
    if x.dtype == np.float32:
        if gx is not None:
            _gx_impl[float](w, gy, gx)
        if gw is not None:
            _gw_impl[float](x, gy, gw)
        if gb is not None:
            _gb_impl[float](gy, gb)
    else:
        if gx is not None:
            _gx_impl[double](w, gy, gx)
        if gw is not None:
            _gw_impl[double](x, gy, gw)
        if gb is not None:
            _gb_impl[double](gy, gb)


cdef void _gx_impl(real[:, ::1] w, real[:, ::1] gy, real[:, ::1] gx) noexcept nogil:
    # gx[B,I] += gy[B,O] @ w[I,O]^T
    cdef int m = gy.shape[0], k = gy.shape[1], n = w.shape[0]
    _gemm(_CN, _CT, m, n, k, <real>1.0, &gy[0, 0], k, &w[0, 0], k,
          <real>1.0, &gx[0, 0], n)


cdef void _gw_impl(real[:, ::1] x, real[:, ::1] gy, real[:, ::1] gw) noexcept nogil:
    # gw[I,O] += x[B,I]^T @ gy[B,O]
    cdef int m = x.shape[1], k = x.shape[0], n = gy.shape[1]
    _gemm(_CT, _CN, m, n, k, <real>1.0, &x[0, 0], m, &gy[0, 0], n,
          <real>1.0, &gw[0, 0], n)


cdef void _gb_impl(real[:, ::1] gy, real[::1] gb) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(gy.shape[1]):
        for i in range(gy.shape[0]):
            gb[j] += gy[i, j]


def tanh_fwd(x):
    y = np.empty_like(x)
    if x.dtype == np.float32:
        _tanh_fwd_impl[float](x.reshape(-1), y.reshape(-1))
    else:
        _tanh_fwd_impl[double](x.reshape(-1), y.reshape(-1))
    return y


cdef void _tanh_fwd_impl(real[::1] x, real[::1] y) noexcept nogil:
    cdef Py_ssize_t i
    if real is float:
        for i in range(x.shape[0]):
            y[i] = ctanhf(x[i])
    else:
        for i in range(x.shape[0]):
            y[i] = ctanh(x[i])


def tanh_bwd(y, gy, gx):
    if y.dtype == np.float32:
        _tanh_bwd_impl[float](y.reshape(-1), gy.reshape(-1), gx.reshape(-1))
    else:
        _tanh_bwd_impl[double](y.reshape(-1), gy.reshape(-1), gx.reshape(-1))


cdef void _tanh_bwd_impl(real[::1] y, real[::1] gy, real[::1] gx) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(y.shape[0]):
        gx[i] += gy[i] * (<real>1.0 - y[i] * y[i])


def lerp_fwd(x0, x1, t):
    y = np.empty_like(x0)
    tc = _as_t_column(t, x0)
    if x0.dtype == np.float32:
        _lerp_fwd_impl[float](x0, x1, tc.astype(np.float32, copy=False), y)
    else:
        _lerp_fwd_impl[double](x0, x1, tc, y)
    return y


cdef void _lerp_fwd_impl(real[:, ::1] x0, real[:, ::1] x1, real[::1] t,
                         real[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef real ti
    for i in range(x0.shape[0]):
        ti = t[i]
        for j in range(x0.shape[1]):
            y[i, j] = x0[i, j] + ti * (x1[i, j] - x0[i, j])


def lerp_bwd(t, gy, gx0, gx1):
    tc = _as_t_column(t, gy)
    if gy.dtype == np.float32:
        tc32 = tc.astype(np.float32, copy=False)
        if gx0 is not None:
            _lerp_bwd_impl[float](tc32, gy, gx0, 0)
        if gx1 is not None:
            _lerp_bwd_impl[float](tc32, gy, gx1, 1)
    else:
        if gx0 is not None:
            _lerp_bwd_impl[double](tc, gy, gx0, 0)
        if gx1 is not None:
            _lerp_bwd_impl[double](tc, gy, gx1, 1)


cdef void _lerp_bwd_impl(real[::1] t, real[:, ::1] gy, real[:, ::1] gx,
                         int side) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef real wi
    for i in range(gy.shape[0]):
        wi = t[i] if side == 1 else <real>1.0 - t[i]
        for j in range(gy.shape[1]):
            gx[i, j] += wi * gy[i, j]


def _as_t_column(t, ref):
    """Normalize t (scalar or (B,1) column) to a contiguous (B,) float64 vector."""
    if np.isscalar(t):
        return np.full(ref.shape[0], float(t))
    tarr = np.asarray(t, dtype=np.float64)
    return np.ascontiguousarray(tarr.reshape(-1))


def adam_step(p, g, m, v, lr, beta1, beta2, eps, step):
    if p.dtype == np.float32:
        _adam_impl[float](p.reshape(-1), g.reshape(-1), m.reshape(-1),
                          v.reshape(-1), lr, beta1, beta2, eps, step)
    else:
        _adam_impl[double](p.reshape(-1), g.reshape(-1), m.reshape(-1),
                           v.reshape(-1), lr, beta1, beta2, eps, step)


cdef void _adam_impl(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                     double lr, double beta1, double beta2, double eps,
                     long step) noexcept nogil:
    cdef Py_ssize_t i
    cdef real b1 = <real>beta1, b2 = <real>beta2
    cdef real scale = <real>(lr / (1.0 - beta1**step))
    cdef real vbc = <real>(1.0 / (1.0 - beta2**step))
    cdef real e = <real>eps
    for i in range(p.shape[0]):
        m[i] = b1 * m[i] + (<real>1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (<real>1.0 - b2) * g[i] * g[i]
        if real is float:
            p[i] -= scale * m[i] / (csqrtf(v[i] * vbc) + e)
        else:
            p[i] -= scale * m[i] / (csqrt(v[i] * vbc) + e)


def sgd_step(p, g, lr):
    if p.dtype == np.float32:
        _sgd_impl[float](p.reshape(-1), g.reshape(-1), lr)
    else:
        _sgd_impl[double](p.reshape(-1), g.reshape(-1), lr)


cdef void _sgd_impl(real[::1] p, real[::1] g, double lr) noexcept nogil:
    cdef Py_ssize_t i
    cdef real s = <real>lr
    for i in range(p.shape[0]):
        p[i] -= s * g[i]
