"""Reverse-mode automatic differentiation over dense float tensors.

Small tape-based engine: forward ops record nodes on the active tape when
any input requires gradients; `backward` walks the tape in reverse and
accumulates adjoints.  Data lives in float32 by default; `grad_check`
recomputes everything in float64 against central finite differences.

Shapes are explicit: the only implicit broadcast is scalar-vs-tensor in
add/sub/mul and the constant time column in `lerp`.  Non-finite values are
rejected when tensors are created from external data and on the outputs of
the ops where they can first appear (affine, matmul, exp, log, reductions);
ops whose outputs are finite whenever their inputs are (add, mul, tanh, ...)
skip the check on the hot path.
"""

from __future__ import annotations

import threading

import numpy as np

from .backend import kernels

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteValue(FloatingPointError):
    """A NaN or Inf reached an operation boundary."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        """Value-equal tensor cut from the tape (the stopgrad operator)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32):
    """Validating constructor for tensors built from external data."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not kernels.all_finite(arr):
        raise NonFiniteValue(f"non-finite entries in tensor of shape {arr.shape}")
    return Tensor(arr, requires_grad=requires_grad)


class _Node:
    __slots__ = ("kind", "out", "bwd")

    def __init__(self, kind, out, bwd):
        self.kind = kind
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _state().stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().stack.pop()
        return False


class no_grad:
    """Context that disables recording (inference / finite differences)."""

    def __enter__(self):
        st = _state()
        self._prev = st.recording
        st.recording = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().recording = self._prev
        return False


_LOCAL = threading.local()


class _ThreadState:
    __slots__ = ("stack", "recording")

    def __init__(self):
        self.stack = [Tape()]
        self.recording = True


def _state():
    st = getattr(_LOCAL, "state", None)
    if st is None:
        st = _ThreadState()
        _LOCAL.state = st
    return st


def active_tape():
    return _state().stack[-1]


def _record(kind, out, inputs, bwd):
    st = _state()
    if st.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        st.stack[-1].nodes.append(_Node(kind, out, bwd))


def _check_out(kind, arr, *shapes):
    if not kernels.all_finite(arr):
        raise NonFiniteValue(
            f"non-finite result in {kind} with input shapes "
            + ", ".join(str(s) for s in shapes)
        )


# ---------------------------------------------------------------------------
# elementwise / structural ops


def _binary_shapes(kind, a, b):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeMismatch(f"{kind}: shapes {a.data.shape} and {b.data.shape} differ")


def _reduce_to(grad, shape):
    # undo a scalar-tensor broadcast in the backward pass
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape).astype(grad.dtype)


def add(a, b):
    _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g, acc):
        acc(a, _reduce_to(g, a.data.shape))
        acc(b, _reduce_to(g, b.data.shape))

    _record("add", out, (a, b), bwd)
    return out


def sub(a, b):
    _binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g, acc):
        acc(a, _reduce_to(g, a.data.shape))
        acc(b, _reduce_to(-g, b.data.shape))

    _record("sub", out, (a, b), bwd)
    return out


def mul(a, b):
    _binary_shapes("mul_elementwise", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g, acc):
        acc(a, _reduce_to(g * b.data, a.data.shape))
        acc(b, _reduce_to(g * a.data, b.data.shape))

    _record("mul_elementwise", out, (a, b), bwd)
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.data.dtype))

    def bwd(g, acc):
        acc(a, g * np.asarray(c, dtype=g.dtype))

    _record("scale", out, (a,), bwd)
    return out


def square(a):
    out = Tensor(a.data * a.data)

    def bwd(g, acc):
        acc(a, g * (2.0 * a.data))

    _record("square", out, (a,), bwd)
    return out


def exp(a):
    with np.errstate(over="ignore"):
        val = np.exp(a.data)
    _check_out("exp", val, a.data.shape)
    out = Tensor(val)

    def bwd(g, acc):
        acc(a, g * val)

    _record("exp", out, (a,), bwd)
    return out


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(a.data)
    _check_out("log", val, a.data.shape)
    out = Tensor(val)

    def bwd(g, acc):
        acc(a, g / a.data)

    _record("log", out, (a,), bwd)
    return out


def sqrt(a):
    with np.errstate(invalid="ignore"):
        val = np.sqrt(a.data)
    _check_out("sqrt", val, a.data.shape)
    out = Tensor(val)

    def bwd(g, acc):
        acc(a, g * (0.5 / val))

    _record("sqrt", out, (a,), bwd)
    return out


def tanh(a):
    val = kernels.tanh_fwd(a.data)
    out = Tensor(val)

    def bwd(g, acc):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            kernels.tanh_bwd(val, np.ascontiguousarray(g), buf)
            acc(a, buf)

    _record("tanh", out, (a,), bwd)
    return out


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"matmul: shapes {a.data.shape} and {b.data.shape} incompatible"
        )
    val = a.data @ b.data
    _check_out("matmul", val, a.data.shape, b.data.shape)
    out = Tensor(val)

    def bwd(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)

    _record("matmul", out, (a, b), bwd)
    return out


def affine(x, w, b):
    """x[B,I] @ w[I,O] + b[O]; the MLP layer primitive."""
    if (
        x.data.ndim != 2
        or w.data.ndim != 2
        or b.data.ndim != 1
        or x.data.shape[1] != w.data.shape[0]
        or w.data.shape[1] != b.data.shape[0]
    ):
        raise ShapeMismatch(
            f"affine: shapes {x.data.shape}, {w.data.shape}, {b.data.shape} incompatible"
        )
    val = kernels.affine_fwd(x.data, w.data, b.data)
    _check_out("affine", val, x.data.shape, w.data.shape)
    out = Tensor(val)

    def bwd(g, acc):
        g = np.ascontiguousarray(g)
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        gb = np.zeros_like(b.data) if b.requires_grad else None
        kernels.affine_bwd(x.data, w.data, g, gx, gw, gb)
        if gx is not None:
            acc(x, gx)
        if gw is not None:
            acc(w, gw)
        if gb is not None:
            acc(b, gb)

    _record("affine", out, (x, w, b), bwd)
    return out


def lerp(x0, x1, t):
    """(1-t)*x0 + t*x1 with t a plain scalar or (B,1)/(B,) array (not a Tensor)."""
    if x0.data.shape != x1.data.shape:
        raise ShapeMismatch(f"lerp: shapes {x0.data.shape} and {x1.data.shape} differ")
    tval = t if np.isscalar(t) else np.asarray(t, dtype=np.float64)
    out = Tensor(kernels.lerp_fwd(x0.data, x1.data, tval))

    def bwd(g, acc):
        g = np.ascontiguousarray(g)
        gx0 = np.zeros_like(x0.data) if x0.requires_grad else None
        gx1 = np.zeros_like(x1.data) if x1.requires_grad else None
        kernels.lerp_bwd(tval, g, gx0, gx1)
        if gx0 is not None:
            acc(x0, gx0)
        if gx1 is not None:
            acc(x1, gx1)

    _record("lerp", out, (x0, x1), bwd)
    return out


def concat(parts, axis=1):
    parts = list(parts)
    if not parts:
        raise ShapeMismatch("concat: empty input list")
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeMismatch(
                "concat: ranks differ: "
                + ", ".join(str(q.data.shape) for q in parts)
            )
    out = Tensor(np.ascontiguousarray(np.concatenate([p.data for p in parts], axis=axis)))
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def bwd(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            acc(p, np.ascontiguousarray(g[tuple(sl)]))

    _record("concat", out, tuple(parts), bwd)
    return out


def sum_(a):
    val = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    _check_out("sum", val, a.data.shape)
    out = Tensor(val)

    def bwd(g, acc):
        acc(a, np.full_like(a.data, g))

    _record("sum", out, (a,), bwd)
    return out


def mean(a):
    n = a.data.size
    val = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)
    _check_out("mean", val, a.data.shape)
    out = Tensor(val)

    def bwd(g, acc):
        acc(a, np.full_like(a.data, g / n))

    _record("mean", out, (a,), bwd)
    return out


_OPS = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "matmul": matmul,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "mean": mean,
    "sum": sum_,
    "concat": lambda *ts: concat(ts),
    "scale": scale,
    "affine": affine,
    "lerp": lerp,
}


def op_forward(kind, *inputs):
    """Dispatch-by-name entry point over the supported op kinds."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# backward pass


def backward(root):
    """Accumulate d(root)/d(leaf) into .grad of every requires_grad tensor."""
    if root.data.size != 1:
        raise ShapeMismatch(f"backward: root must be scalar, got shape {root.data.shape}")

    adjoint = {}

    def acc(t, g):
        if not t.requires_grad:
            return
        key = id(t)
        entry = adjoint.get(key)
        if entry is None:
            adjoint[key] = (t, np.array(g, dtype=t.data.dtype, copy=True))
        else:
            buf = entry[1]
            buf += np.asarray(g, dtype=t.data.dtype)

    acc(root, np.ones_like(root.data))
    for node in reversed(active_tape().nodes):
        entry = adjoint.pop(id(node.out), None)
        if entry is None:
            continue
        t, g = entry
        t.grad = g if t.grad is None else t.grad + g
        node.bwd(g, acc)
    for t, g in adjoint.values():
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f, params, h=1e-4):
    """Max relative error between AD gradients of f(params) and central
    finite differences, both evaluated in float64.

    f takes the list of parameter tensors and returns a scalar Tensor.
    """
    if h <= 0:
        raise ValueError(f"grad_check: h must be positive, got {h}")
    params64 = [
        Tensor(np.array(p.data, dtype=np.float64), requires_grad=True) for p in params
    ]
    with Tape():
        out = f(params64)
        if out.data.size != 1:
            raise ShapeMismatch(
                f"grad_check: f must return a scalar, got shape {out.data.shape}"
            )
        backward(out)
    ad_grads = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params64
    ]

    max_err = 0.0
    with no_grad():
        for p, ad in zip(params64, ad_grads):
            flat = p.data.reshape(-1)
            ad_flat = ad.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                f_plus = float(f(params64).data)
                flat[j] = orig - h
                f_minus = float(f(params64).data)
                flat[j] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                err = abs(ad_flat[j] - fd) / (abs(fd) + 1e-8)
                if err > max_err:
                    max_err = err
    return max_err
