"""Backend selection for the hot numerical kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
NumPy fallback in ``_purekernels`` is used. Setting ``SIPO_PURE_PYTHON=1``
forces the fallback, which the benchmark and the parity tests rely on.
"""
import os

from . import _purekernels

BACKEND = "python"
_impl = _purekernels

if os.environ.get("SIPO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _purekernels

rbf_similarity = _impl.rbf_similarity
kth_neighbor_distances = _impl.kth_neighbor_distances
gae = _impl.gae

__all__ = ["BACKEND", "rbf_similarity", "kth_neighbor_distances", "gae"]
