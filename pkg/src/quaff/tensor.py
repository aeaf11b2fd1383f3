"""Dense numeric kernels and seeded randomness.

Float matrices are float32 row-major throughout; integer matrices are int8
with 32-bit accumulation in the GEMM.  Randomness uses numpy's Philox
counter-based generator (four 64-bit counter words, ten rounds, documented
constants), so the same seed yields the same stream on every platform for a
given numpy build.  Named sub-streams are derived from a root seed via
``SeedSequence([seed, crc32(label), ...])``.
"""

from __future__ import annotations

import zlib

import numpy as np

from .validation import check_channels, check_matrix, check_vector

# 32-bit accumulators hold k * 127 * 127 without overflow up to this k.
MAX_I8_INNER_DIM = 2 ** 16


def matmul_f32(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Single-precision dense product ``A @ B``.

    Deterministic for a given build and thread configuration, which is all
    the test baselines rely on.
    """
    A = check_matrix(A, "A")
    B = check_matrix(B, "B")
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul_f32 shape mismatch: {A.shape} x {B.shape}")
    return A @ B


def matmul_i8_acc32(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Integer product of int8 matrices with exact int32 accumulation."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("matmul_i8_acc32 expects 2-D operands")
    if A.dtype != np.int8 or B.dtype != np.int8:
        raise TypeError(f"matmul_i8_acc32 expects int8 operands, got {A.dtype}/{B.dtype}")
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul_i8_acc32 shape mismatch: {A.shape} x {B.shape}")
    if A.shape[1] > MAX_I8_INNER_DIM:
        raise ValueError(
            f"inner dimension {A.shape[1]} exceeds {MAX_I8_INNER_DIM}; "
            "32-bit accumulators could overflow"
        )
    # Run the GEMM in float64: every product is an integer <= 127*127 and
    # every partial sum stays below k_max * 127^2 < 2^31 < 2^53, so the
    # float path is exact and an order of magnitude faster than numpy's
    # integer matmul (which has no BLAS backend).
    return np.rint(A.astype(np.float64) @ B.astype(np.float64)).astype(np.int32)


def select_columns(X: np.ndarray, channels) -> np.ndarray:
    """Submatrix of the given channels, in their sorted order."""
    X = np.asarray(X)
    idx = check_channels(channels, X.shape[1])
    return np.ascontiguousarray(X[:, idx])


def scale_columns(X: np.ndarray, s, mode: str = "multiply") -> np.ndarray:
    """Per-channel scaling: ``out[i, j] = X[i, j] * s[j]`` or ``X[i, j] / s[j]``."""
    X = np.asarray(X)
    s = check_vector(s, X.shape[1], "s", dtype=X.dtype)
    if mode == "multiply":
        return X * s[np.newaxis, :]
    if mode == "divide":
        if np.any(s <= 0):
            raise ValueError("divide mode requires all scale entries > 0")
        return X / s[np.newaxis, :]
    raise ValueError(f"unknown mode {mode!r}")


def scale_rows(X: np.ndarray, s, mode: str = "multiply") -> np.ndarray:
    """Per-row scaling: ``out[i, j] = X[i, j] * s[i]`` or ``X[i, j] / s[i]``."""
    X = np.asarray(X)
    s = check_vector(s, X.shape[0], "s", dtype=X.dtype)
    if mode == "multiply":
        return X * s[:, np.newaxis]
    if mode == "divide":
        if np.any(s <= 0):
            raise ValueError("divide mode requires all scale entries > 0")
        return X / s[:, np.newaxis]
    raise ValueError(f"unknown mode {mode!r}")


def _check_nonempty(X: np.ndarray, op: str) -> np.ndarray:
    X = np.asarray(X)
    if X.size == 0:
        raise ValueError(f"{op} of an empty matrix")
    return X


def row_abs_max(X: np.ndarray) -> np.ndarray:
    return np.abs(_check_nonempty(X, "row_abs_max")).max(axis=1)


def col_abs_max(X: np.ndarray) -> np.ndarray:
    return np.abs(_check_nonempty(X, "col_abs_max")).max(axis=0)


def abs_mean(X: np.ndarray) -> float:
    return float(np.abs(_check_nonempty(X, "abs_mean")).mean())


def global_abs_max(X: np.ndarray) -> float:
    return float(np.abs(_check_nonempty(X, "global_abs_max")).max())


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    """Derive a named sub-stream key from one root seed.

    String labels are hashed with crc32 so the derivation is stable across
    runs and platforms; integer labels are used as-is.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        if isinstance(label, str):
            words.append(zlib.crc32(label.encode("utf-8")))
        else:
            words.append(int(label) & 0xFFFFFFFFFFFFFFFF)
    return np.random.SeedSequence(words)


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Philox generator for the sub-stream named by ``labels``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *labels)))


def random_matrix(
    rows: int,
    cols: int,
    seed: int,
    distribution: str = "normal",
    scale: float = 1.0,
) -> np.ndarray:
    """Seeded float32 matrix; same seed gives a bit-identical result."""
    rng = make_rng(seed, "random_matrix")
    if distribution == "normal":
        M = rng.standard_normal((rows, cols)) * scale
    elif distribution == "uniform":
        M = rng.uniform(-scale, scale, size=(rows, cols))
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return M.astype(np.float32)
