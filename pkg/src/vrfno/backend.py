"""Numeric kernel backend selection.

The hot kernels (affine layers, tanh, interpolation, optimizer updates)
exist twice: a Cython extension (`vrfno._kernels`) and a NumPy fallback
(`vrfno._kernels_np`).  The compiled one is used when importable; set
``VRFNO_BACKEND=python`` or ``VRFNO_BACKEND=compiled`` to force a choice.

``benchmarks/bench_backends.py`` compares the two.
"""

import os

_choice = os.environ.get("VRFNO_BACKEND", "auto")
if _choice not in ("auto", "compiled", "python"):
    raise RuntimeError(
        f"VRFNO_BACKEND must be one of auto|compiled|python, got {_choice!r}"
    )

kernels = None
if _choice in ("auto", "compiled"):
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
        kernels = None
if kernels is None:
    from . import _kernels_np as kernels  # type: ignore[no-redef]

NAME = kernels.NAME


def get_kernels(name="auto"):
    """Return a specific kernel module, independent of the import-time pick."""
    if name in ("auto", NAME):
        return kernels
    if name == "python":
        from . import _kernels_np

        return _kernels_np
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
