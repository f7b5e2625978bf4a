"""Backend selection for the distance kernels.

The compiled extension is used when it was built; otherwise (or when
``MANIFOLDNET_PURE_PYTHON`` is set to a non-empty value other than ``0``)
the NumPy fallback is used. The distance kernels of both backends are
bit-identical. ``softmax_xent`` always runs on NumPy: its matrix products
go through BLAS, which beats a hand-written loop.
"""
import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("MANIFOLDNET_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def sq_dists(x, c, impl=None):
    return (impl or _impl).sq_dists(_f64(x), _f64(c))


def assign_nearest(x, c, impl=None):
    return (impl or _impl).assign_nearest(_f64(x), _f64(c))


def cluster_sums(x, labels, z, impl=None):
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return (impl or _impl).cluster_sums(_f64(x), labels, int(z))


def nearest_other(q, g, exclude_self=False, impl=None):
    return (impl or _impl).nearest_other(_f64(q), _f64(g), bool(exclude_self))


def softmax_xent(x, y, w, b, reg):
    y = np.ascontiguousarray(y, dtype=np.int64)
    return _kernels_py.softmax_xent(_f64(x), y, _f64(w), _f64(b), float(reg))


def available_backends():
    """Mapping of backend name to implementation module, for tests and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
