"""Symmetric round-to-nearest quantization at hardware-friendly granularities.

Conventions (documented because the usual references leave them open):

* Rounding rule is round-half-away-from-zero.
* The integer range is symmetric, ``[-(2^(N-1) - 1), 2^(N-1) - 1]`` --
  -128 is never produced for N = 8.
* An all-zero quantization group gets step 1 and all-zero values.
* The integer selection divides by the stored float32 step in float64, so
  the reconstruction bound ``|x - v * step| <= step / 2`` holds up to
  float32 representation error of the reconstruction itself.

Granularities: ``per_tensor`` (one step), ``per_token`` (one step per
activation row), ``per_oc`` (one step per weight output-channel column).
Per-token is an activation role, per-OC a weight role; mixing them the
other way round is rejected where it matters (``quantized_matmul``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import matmul_i8_acc32
from .validation import check_matrix

PER_TENSOR = "per_tensor"
PER_TOKEN = "per_token"
PER_OC = "per_oc"
GRANULARITIES = (PER_TENSOR, PER_TOKEN, PER_OC)

ACTIVATION_GRANULARITIES = (PER_TOKEN, PER_TENSOR)
WEIGHT_GRANULARITIES = (PER_OC, PER_TENSOR)


@dataclass
class QuantizedTensor:
    """Int8 values plus positive float32 step size(s).

    ``steps`` has length 1 (per-tensor), ``rows`` (per-token) or ``cols``
    (per-OC).
    """

    values: np.ndarray
    steps: np.ndarray
    granularity: str
    bits: int = 8

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def nbytes(self) -> int:
        """Byte census: 1 byte per int value, 4 per step."""
        return self.values.size + 4 * self.steps.size


def _group_abs_max(X: np.ndarray, granularity: str) -> np.ndarray:
    if granularity == PER_TENSOR:
        return np.array([np.abs(X).max() if X.size else 0.0], dtype=np.float32)
    if granularity == PER_TOKEN:
        return np.abs(X).max(axis=1).astype(np.float32)
    if granularity == PER_OC:
        return np.abs(X).max(axis=0).astype(np.float32)
    raise ValueError(f"unknown granularity {granularity!r}")


def _broadcast_steps(steps: np.ndarray, granularity: str) -> np.ndarray:
    if granularity == PER_TOKEN:
        return steps[:, np.newaxis]
    if granularity == PER_OC:
        return steps[np.newaxis, :]
    return steps[0]


def quantize(X, bits: int = 8, granularity: str = PER_TENSOR) -> QuantizedTensor:
    """Symmetric RTN quantization: ``step = group_max / (2^(N-1) - 1)``."""
    X = check_matrix(X, "X")
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")

    qmax = 2 ** (bits - 1) - 1
    group_max = _group_abs_max(X, granularity)
    steps = (group_max / np.float32(qmax)).astype(np.float32)
    steps[group_max == 0] = 1.0  # degenerate all-zero group

    wide = _broadcast_steps(steps, granularity).astype(np.float64)
    v = X.astype(np.float64) / wide
    v = np.trunc(v + np.copysign(0.5, v))  # round half away from zero
    values = np.clip(v, -qmax, qmax).astype(np.int8)

    # Reconstruction self-check against the source (slack covers float32
    # representation error of value * step).
    recon = values.astype(np.float32) * _broadcast_steps(steps, granularity)
    bound = _broadcast_steps(steps, granularity) * np.float32(0.5) + 1e-6 * np.abs(X) + 1e-6
    if X.size and np.any(np.abs(X - recon) > bound):
        raise AssertionError("RTN reconstruction bound violated; quantizer bug")

    return QuantizedTensor(values=values, steps=steps, granularity=granularity, bits=bits)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Entrywise ``value * step`` for the value's group."""
    return (q.values.astype(np.float32) * _broadcast_steps(q.steps, q.granularity)).astype(
        np.float32
    )


def quantized_matmul(qx: QuantizedTensor, qw: QuantizedTensor) -> np.ndarray:
    """Integer product rescaled by activation row steps and weight column steps."""
    if qx.granularity not in ACTIVATION_GRANULARITIES:
        raise ValueError(f"activation operand cannot be {qx.granularity!r}")
    if qw.granularity not in WEIGHT_GRANULARITIES:
        raise ValueError(f"weight operand cannot be {qw.granularity!r}")
    prod = matmul_i8_acc32(qx.values, qw.values).astype(np.float32)
    row = qx.steps if qx.granularity == PER_TOKEN else qx.steps[:1]
    col = qw.steps if qw.granularity == PER_OC else qw.steps[:1]
    return (prod * row[:, np.newaxis]) * col[np.newaxis, :]


class QuantError(NamedTuple):
    frobenius_rel: float
    max_abs: float


def quant_error(X, Xref) -> QuantError:
    """Relative Frobenius error and max absolute deviation vs a reference."""
    X = np.asarray(X, dtype=np.float32)
    Xref = np.asarray(Xref, dtype=np.float32)
    if X.shape != Xref.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {Xref.shape}")
    diff = (X - Xref).astype(np.float64)
    ref_norm = float(np.linalg.norm(Xref.astype(np.float64)))
    diff_norm = float(np.linalg.norm(diff))
    if ref_norm == 0.0:
        rel = 0.0 if diff_norm == 0.0 else float("inf")
    else:
        rel = diff_norm / ref_norm
    max_abs = float(np.abs(diff).max()) if diff.size else 0.0
    return QuantError(frobenius_rel=rel, max_abs=max_abs)
