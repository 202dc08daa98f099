"""Backend selection for the aggregation kernels.

The compiled extension is preferred when present; set ``MVMOL_KERNELS=numpy``
to force the fallback (useful for benchmarking and debugging). Both backends
expose the same three functions and are tested against each other.
"""

import os

import numpy as np

from . import numpy_backend

_requested = os.environ.get("MVMOL_KERNELS", "auto").lower()

if _requested in ("auto", "cython"):
    try:
        from . import _speedups as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "MVMOL_KERNELS=cython but the compiled extension is not built; "
                "run `pip install -e .` or `python setup.py build_ext --inplace`"
            )
        _impl = numpy_backend
        BACKEND = "numpy"
elif _requested == "numpy":
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    raise ValueError(f"unknown MVMOL_KERNELS value: {_requested!r}")


def scatter_add_rows(src: np.ndarray, index: np.ndarray, n_out: int) -> np.ndarray:
    """Accumulate rows of ``src`` at ``index`` into a zero (n_out, d) array."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    return np.asarray(_impl.scatter_add_rows(src, index, n_out))


def gather_rows(src: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Row lookup ``src[index]`` as a fresh array."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    return np.asarray(_impl.gather_rows(src, index))


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances between rows of ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return np.asarray(_impl.pairwise_sq_dists(x))
