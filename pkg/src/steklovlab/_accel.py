"""Backend selection for the numerical hot loops.

Two implementations exist for every hot kernel: a numba ``@njit`` version and
a vectorized pure-numpy version.  The active backend is chosen once at import
time from the ``STEKLOVLAB_BACKEND`` environment variable:

* ``auto`` (default) -- numba when importable, numpy otherwise
* ``numba``          -- force numba, raise if the import fails
* ``numpy``          -- force the pure-numpy path

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from __future__ import annotations

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via STEKLOVLAB_BACKEND=numpy
    numba = None
    HAS_NUMBA = False

_VALID = ("auto", "numba", "numpy")


def requested_backend() -> str:
    flag = os.environ.get("STEKLOVLAB_BACKEND", "auto").strip().lower()
    if flag not in _VALID:
        raise ValueError(
            f"STEKLOVLAB_BACKEND must be one of {_VALID}, got {flag!r}"
        )
    return flag


def active_backend() -> str:
    """Resolve the backend actually used for kernel dispatch."""
    flag = requested_backend()
    if flag == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if flag == "numba" and not HAS_NUMBA:
        raise RuntimeError("STEKLOVLAB_BACKEND=numba but numba is not importable")
    return flag


USE_NUMBA = active_backend() == "numba"

if USE_NUMBA:
    njit = numba.njit
else:

    def njit(*args, **kwargs):  # type: ignore[misc]
        """No-op decorator standing in for numba.njit on the numpy path."""

        def wrap(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return wrap
