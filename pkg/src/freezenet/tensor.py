"""Dense tensor arithmetic with pinned accumulation semantics.

numpy ndarrays are the value carrier. The one operation that needs care is
matmul: float64 inputs take a strict ascending-k accumulation path that is
bitwise identical to the naive triple loop (the verification mode used by all
finite-difference oracles), while float32 inputs go to BLAS for speed. Both
paths are run-to-run deterministic; the process pins BLAS to one thread (see
package __init__).
"""

import numpy as np

from .errors import DimensionError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[i, j] = sum_k a[i, k] * b[k, j], k ascending in float64 mode."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if a.dtype == np.float64 or b.dtype == np.float64:
        aa = a.astype(np.float64, copy=False)
        bb = b.astype(np.float64, copy=False)
        c = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
        # One rank-1 update per k: identical rounding sequence to the
        # scalar loop "for k: c[i,j] += a[i,k]*b[k,j]" started from 0.0.
        for k in range(aa.shape[1]):
            c += aa[:, k:k + 1] * bb[k:k + 1, :]
        return c
    return a @ b
