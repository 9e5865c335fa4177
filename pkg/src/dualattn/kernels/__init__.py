"""Hot numeric kernels with two interchangeable backends.

The env var ``DUALATTN_BACKEND`` picks the implementation:

* unset       -- numba if importable, else pure numpy
* ``numba``   -- numba, ImportError if unavailable
* ``numpy``   -- pure numpy, always available

Matrix products stay on ``np.matmul`` (BLAS) in both backends; only the
row-wise/elementwise loops live here. ``benchmarks/bench_kernels.py``
compares the two.
"""

import os

_choice = os.environ.get("DUALATTN_BACKEND", "").strip().lower()
if _choice not in ("", "numba", "numpy"):
    raise ValueError(
        f"DUALATTN_BACKEND must be 'numba' or 'numpy', got {_choice!r}"
    )

if _choice == "numpy":
    from . import numpy_ops as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_ops as _impl

        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_ops as _impl

        BACKEND = "numpy"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
adam_update = _impl.adam_update
cross_entropy_fwd = _impl.cross_entropy_fwd
cross_entropy_bwd = _impl.cross_entropy_bwd

KERNEL_NAMES = (
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "adam_update",
    "cross_entropy_fwd",
    "cross_entropy_bwd",
)
