"""Pure-NumPy implementations of the aggregation kernels.

Used whenever the compiled extension is unavailable (or explicitly requested
via ``MVMOL_KERNELS=numpy``). Semantics are identical to the Cython versions;
only speed differs.
"""

import numpy as np


def scatter_add_rows(src: np.ndarray, index: np.ndarray, n_out: int) -> np.ndarray:
    out = np.zeros((n_out, src.shape[1]), dtype=np.float64)
    np.add.at(out, index, src)
    return out


def gather_rows(src: np.ndarray, index: np.ndarray) -> np.ndarray:
    return src[index]


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)
