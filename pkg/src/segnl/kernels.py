"""Backend selection for the hot loops.

The compiled extension ``segnl._kernels`` is used when it imports; otherwise
(or when ``SEGNL_PURE_PYTHON`` is set) the numpy/heapq versions in
``segnl._fallback`` stand in. Both produce identical results.
"""

import importlib
import os

BACKENDS = ("cython", "python")


def load_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "cython":
        return importlib.import_module("segnl._kernels")
    if name == "python":
        return importlib.import_module("segnl._fallback")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    found = []
    for name in BACKENDS:
        try:
            load_backend(name)
        except ImportError:
            continue
        found.append(name)
    return found


def _select():
    if not os.environ.get("SEGNL_PURE_PYTHON"):
        try:
            return "cython", load_backend("cython")
        except ImportError:
            pass
    return "python", load_backend("python")


BACKEND, _impl = _select()

flood = _impl.flood
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
