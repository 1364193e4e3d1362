"""Backend selection for the hot numeric kernels.

Two implementations of every kernel exist: a numba ``@njit`` version and a
pure-numpy fallback. ``MALSIM_BACKEND=numpy`` forces the fallback;
anything else (or unset) uses numba when it is importable.

``MALSIM_THREADS`` caps numba's worker threads. Unset means a
single-threaded deterministic baseline.
"""

import os

_FORCED_NUMPY = os.environ.get("MALSIM_BACKEND", "").lower() == "numpy"

try:  # pragma: no cover - exercised implicitly on import
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and not _FORCED_NUMPY

if USE_NUMBA:
    _threads = os.environ.get("MALSIM_THREADS")
    numba.set_num_threads(max(1, int(_threads)) if _threads else 1)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
