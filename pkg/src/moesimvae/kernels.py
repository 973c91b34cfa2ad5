"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` are used. Setting the environment
variable ``MOESIMVAE_PURE_PYTHON=1`` forces the numpy backend.
"""
import os

from . import _kernels_py

try:
    if os.environ.get("MOESIMVAE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

knn_from_sqdist = _impl.knn_from_sqdist
similarity_bce = _impl.similarity_bce
# the numpy version rides on a BLAS matmul and beats the compiled double loop
rbf_kernel = _kernels_py.rbf_kernel
mmd_block_sums = _impl.mmd_block_sums


def backends():
    """Map of every importable backend name to its module (for tests and benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
