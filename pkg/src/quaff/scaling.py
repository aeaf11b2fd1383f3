"""Channel scaling factors: momentum-blended outlier scaling and smoothing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import col_abs_max
from .validation import check_channels, check_matrix, check_vector

SMOOTH_INPUT_FLOOR = 1e-8
SMOOTH_OUTPUT_FLOOR = 1e-5


@dataclass
class ScalingState:
    """Current scaling vector with its momentum coefficient and step count.

    Off the outlier set the vector is identically 1 and stays there; on it
    the entries are >= 1.  Single writer: one training loop updates, anyone
    may snapshot ``s`` between steps.
    """

    s: np.ndarray
    gamma: float = 0.2
    step: int = field(default=0)

    def __post_init__(self) -> None:
        self.s = check_vector(self.s, None, "s", dtype=np.float32)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")


def beta_from_maxima(col_max, w_row_abs_max, outliers, c_in: int) -> np.ndarray:
    """Scaling targets from precomputed per-channel activation maxima.

    ``col_max`` has length ``c_in``; ``w_row_abs_max`` aligns with the
    sorted outlier indices.  Off-outlier channels get 1; outlier channels
    get ``max(1, sqrt(col_max / w_row_abs_max))``.
    """
    idx = check_channels(outliers, c_in)
    col_max = check_vector(col_max, c_in, "col_max", dtype=np.float64)
    wmax = check_vector(w_row_abs_max, len(idx), "w_row_abs_max", dtype=np.float64)
    if np.any(wmax <= 0):
        raise ValueError("w_row_abs_max must be positive on every outlier channel")
    beta = np.ones(c_in, dtype=np.float32)
    if len(idx):
        ratio = np.sqrt(np.maximum(col_max[idx], 0.0) / wmax)
        beta[idx] = np.maximum(1.0, ratio).astype(np.float32)
    return beta


def compute_beta(X, w_row_abs_max, outliers) -> np.ndarray:
    """Per-channel scaling targets from the current batch.

    Column maxima are taken over all tokens of ``X`` (the batch at this
    step, not a running maximum).
    """
    X = check_matrix(X, "X", allow_empty=False)
    return beta_from_maxima(col_abs_max(X), w_row_abs_max, outliers, X.shape[1])


def momentum_update(state: ScalingState, beta) -> ScalingState:
    """Blend the previous scaling vector with the current targets.

    ``s_t = gamma * s_{t-1} + (1 - gamma) * beta``; mutates and returns
    ``state``.
    """
    beta = check_vector(beta, len(state.s), "beta", dtype=np.float32)
    g = np.float32(state.gamma)
    state.s = (g * state.s + (np.float32(1.0) - g) * beta).astype(np.float32)
    state.step += 1
    return state


def smooth_factors(x_col_abs_max, w_row_abs_max, alpha: float = 0.5) -> np.ndarray:
    """Channel-wise smoothing factors ``x_max^alpha / w_max^(1-alpha)``.

    Zero maxima are floored at 1e-8 before the power, and the result is
    floored at 1e-5, so the factors are always safe to divide by.
    """
    x_max = check_vector(x_col_abs_max, None, "x_col_abs_max", dtype=np.float64)
    w_max = check_vector(w_row_abs_max, len(x_max), "w_row_abs_max", dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    x_max = np.maximum(x_max, SMOOTH_INPUT_FLOOR)
    w_max = np.maximum(w_max, SMOOTH_INPUT_FLOOR)
    s = np.power(x_max, alpha) / np.power(w_max, 1.0 - alpha)
    return np.maximum(s, SMOOTH_OUTPUT_FLOOR).astype(np.float32)


def pearson_similarity(a, b, top_frac: float = 1.0) -> float:
    """Pearson correlation over the channels where ``a`` is largest.

    The filter keeps ``ceil(top_frac * len(a))`` indices ranked by the
    magnitude of ``a`` (ties broken by position).  Either vector being
    constant on the filtered set gives 0 rather than NaN.
    """
    a = check_vector(a, None, "a", dtype=np.float64)
    b = check_vector(b, len(a), "b", dtype=np.float64)
    if not 0.0 < top_frac <= 1.0:
        raise ValueError(f"top_frac must be in (0, 1], got {top_frac}")
    keep = math.ceil(top_frac * len(a))
    if keep < 2:
        raise ValueError(
            f"top_frac={top_frac} keeps {keep} of {len(a)} entries; need at least 2"
        )
    order = np.argsort(-np.abs(a), kind="stable")[:keep]
    av = a[order] - a[order].mean()
    bv = b[order] - b[order].mean()
    denom = float(np.linalg.norm(av) * np.linalg.norm(bv))
    if denom == 0.0:
        return 0.0
    return float(np.dot(av, bv) / denom)
