"""Input validation helpers shared by all estimators and kernels."""

from __future__ import annotations

import numpy as np

INT8_MIN = -127
INT8_MAX = 127


def check_matrix(X, name: str = "X", dtype=np.float32, allow_empty: bool = True) -> np.ndarray:
    """Coerce ``X`` to a C-contiguous 2-D float matrix and validate it.

    Rejects non-finite entries (NaN/Inf) coming from external input.
    """
    X = np.asarray(X, dtype=dtype)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not allow_empty and X.size == 0:
        raise ValueError(f"{name} must be non-empty, got shape {X.shape}")
    if X.size and not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(X)


def check_int_matrix(V, bits: int = 8, name: str = "V") -> np.ndarray:
    """Validate an int8 matrix whose entries fit the symmetric N-bit range."""
    V = np.asarray(V)
    if V.dtype != np.int8:
        V = V.astype(np.int8)
    if V.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {V.shape}")
    qmax = 2 ** (bits - 1) - 1
    if V.size and (V.min() < -qmax or V.max() > qmax):
        raise ValueError(f"{name} has entries outside [-{qmax}, {qmax}] for bits={bits}")
    return np.ascontiguousarray(V)


def check_channels(indices, c_in: int, name: str = "channels") -> np.ndarray:
    """Canonicalise a channel index set: sorted, unique int64, all in [0, c_in)."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return idx
    if idx.min() < 0 or idx.max() >= c_in:
        raise ValueError(f"{name} has out-of-range index for c_in={c_in}: {idx}")
    out = np.unique(idx)
    if out.size != idx.size:
        raise ValueError(f"{name} contains duplicate indices")
    return out


def check_vector(v, length: int | None = None, name: str = "v", dtype=np.float32) -> np.ndarray:
    v = np.asarray(v, dtype=dtype).ravel()
    if length is not None and v.size != length:
        raise ValueError(f"{name} must have length {length}, got {v.size}")
    if v.size and not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite entries")
    return v
