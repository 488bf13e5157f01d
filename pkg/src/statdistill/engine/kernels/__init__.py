"""Kernel backend selection.

STATDISTILL_KERNELS=numpy forces the pure-numpy path; STATDISTILL_KERNELS=numba
requires numba. Unset, numba is used when importable and numpy otherwise.
"""

import os
import warnings

_requested = os.environ.get("STATDISTILL_KERNELS", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ValueError(f"STATDISTILL_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    from . import numpy_backend as _impl
else:
    try:
        from . import numba_backend as _impl
    except ImportError:
        if _requested == "numba":
            raise
        warnings.warn("numba unavailable; falling back to pure-numpy kernels")
        from . import numpy_backend as _impl

BACKEND = _impl.NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
jacobi_sweeps = _impl.jacobi_sweeps
warmup = _impl.warmup
