"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``MOCA_LAB_NUMBA=0`` to force
the numpy path (useful for debugging or when numba is unavailable); numba is
used by default when it imports cleanly.
"""
import os

from . import numpy_impl

_flag = os.environ.get("MOCA_LAB_NUMBA", "1").strip().lower()
_impl = numpy_impl
BACKEND = "numpy"
if _flag not in ("0", "false", "no", "off"):
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:  # numba is an optional extra
        _impl = numpy_impl

jacobi_eigvals = _impl.jacobi_eigvals
wood_accept = _impl.wood_accept
reservoir_assign = _impl.reservoir_assign

__all__ = ["BACKEND", "jacobi_eigvals", "wood_accept", "reservoir_assign", "numpy_impl"]
