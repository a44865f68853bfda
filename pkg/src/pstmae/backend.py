"""Kernel backend selection.

The hot numeric kernels (3x3 convolutions and the PDE time steps) exist in
two interchangeable flavours: numba-jitted loop nests and a pure-numpy
fallback. The active one is chosen once at import time from the
``PSTMAE_BACKEND`` environment variable:

    PSTMAE_BACKEND=numba   force the jitted kernels (error if numba missing)
    PSTMAE_BACKEND=numpy   force the pure-numpy fallback
    unset / "auto"         numba when importable, numpy otherwise

``benchmarks/bench_backends.py`` compares the two.
"""

import os

from . import kernels_numpy

_requested = os.environ.get("PSTMAE_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"PSTMAE_BACKEND must be 'numba', 'numpy' or 'auto', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = kernels_numpy
        BACKEND = "numpy"

conv_fwd = _impl.conv_fwd
conv_input_grad = _impl.conv_input_grad
conv_kernel_grad = _impl.conv_kernel_grad
swe_step = _impl.swe_step
dr_step = _impl.dr_step
