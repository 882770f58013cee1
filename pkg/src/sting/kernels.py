"""Loop kernels, compiled when possible.

The Cython build is chosen at import; set ``STING_PURE_PYTHON=1`` to force
the numpy fallback.
"""

import os

if os.environ.get("STING_PURE_PYTHON"):
    from sting import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from sting import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        from sting import _pykernels as _impl

        BACKEND = "python"

delta_recurrence = _impl.delta_recurrence
carry_forward = _impl.carry_forward
knn_fill = _impl.knn_fill

__all__ = ["BACKEND", "delta_recurrence", "carry_forward", "knn_fill"]
