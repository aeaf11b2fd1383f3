"""Seven interchangeable forward engines for one frozen linear layer.

kind            weights kept                 activation treatment
--------------  ---------------------------  -------------------------------
fp32            full precision               none
naive           int8 per-OC                  int8 per-token
smooth_static   int8 per-OC of s*W, plus s   divide by fixed s, then int8
smooth_dynamic  full precision               s recomputed per call, then int8
llm_int8        full precision + int8 copy   live split at column max > sigma
quaff           int8 per-OC + outlier rows   divide by momentum-blended s,
                full precision               then int8; outlier correction
                                             term reuses the same int tensor
quaff_no_momentum  same as quaff with gamma = 0

The integer path is emulated on int8/int32 numpy arrays; `forward_reference`
runs the identical control flow with the integer GEMMs replaced by float
GEMMs on dequantized operands, as a cross-check oracle.

`effective_weight` exposes the float matrix W_eff such that the last
forward was approximately X @ W_eff; the training loop backpropagates
straight through the engine using it (rounding and scaling treated as
constants).
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator

from .outliers import CalibrationStats
from .quantization import PER_OC, PER_TOKEN, QuantizedTensor, dequantize, quantize, quantized_matmul
from .scaling import ScalingState, beta_from_maxima, compute_beta, momentum_update, smooth_factors
from .tensor import col_abs_max, matmul_f32, row_abs_max, scale_columns, scale_rows, select_columns
from .validation import check_channels, check_matrix

KINDS = (
    "fp32",
    "naive",
    "smooth_static",
    "smooth_dynamic",
    "llm_int8",
    "quaff",
    "quaff_no_momentum",
)

QUAFF_KINDS = ("quaff", "quaff_no_momentum")


def _float_matmul(qx: QuantizedTensor, qw: QuantizedTensor) -> np.ndarray:
    """Reference product: dequantize both operands, multiply in float."""
    return matmul_f32(dequantize(qx), dequantize(qw))


class QuantLinear(BaseEstimator):
    """One frozen linear layer prepared under one of the seven schemes.

    Parameters
    ----------
    kind : str
        One of ``KINDS``.
    bits : int
        Quantizer width (2..8).
    gamma : float
        Momentum coefficient for the scaling state (quaff only; forced to
        0 for ``quaff_no_momentum``).
    sigma : float
        Live outlier threshold on column abs-max (llm_int8 only).
    alpha : float
        Smoothing exponent (smooth_static / smooth_dynamic only).

    Mutable kinds (quaff variants, smooth_dynamic) have a single writer:
    one loop calls ``forward``; snapshots of ``state_.s`` between calls
    are safe.
    """

    def __init__(
        self,
        kind: str = "fp32",
        bits: int = 8,
        gamma: float = 0.2,
        sigma: float = 6.0,
        alpha: float = 0.5,
    ):
        self.kind = kind
        self.bits = bits
        self.gamma = gamma
        self.sigma = sigma
        self.alpha = alpha

    # ------------------------------------------------------------------
    # preparation

    def fit(self, W, calib: CalibrationStats | None = None, outliers=None):
        """Quantize / split the frozen weight matrix per the engine kind.

        Args:
            W: float weight matrix, shape (c_in, c_out).
            calib: calibration stats for this layer's input; required for
                smooth_static (smoothing factors) and for quaff kinds with
                a nonempty outlier set (initial scaling vector).
            outliers: predefined outlier channel indices (quaff kinds).

        Returns:
            self, prepared for ``forward``.
        """
        if self.kind not in KINDS:
            raise ValueError(f"unknown engine kind {self.kind!r}")
        W = check_matrix(W, "W", allow_empty=False)
        self.c_in_, self.c_out_ = W.shape
        self.last_forward_ms_ = 0.0

        if self.kind == "fp32":
            self.W_ = W.copy()
            self.W_eff_ = self.W_
            return self

        if self.kind == "naive":
            self.Wq_ = quantize(W, self.bits, PER_OC)
            self.W_eff_ = dequantize(self.Wq_)
            return self

        if self.kind == "smooth_static":
            if calib is None:
                raise ValueError("smooth_static requires calibration stats")
            s = smooth_factors(calib.channel_abs_max, row_abs_max(W), self.alpha)
            self.s_static_ = s
            self.calib_max_ = calib.channel_abs_max.copy()
            self.Wq_ = quantize(scale_rows(W, s), self.bits, PER_OC)
            self.W_eff_ = scale_rows(dequantize(self.Wq_), s, mode="divide").astype(np.float32)
            return self

        if self.kind == "smooth_dynamic":
            self.W_ = W.copy()
            self.W_eff_ = self.W_  # until the first forward fixes an s
            return self

        if self.kind == "llm_int8":
            self.W_ = W.copy()
            self.Wq_ = quantize(W, self.bits, PER_OC)
            self.W_eff_ = dequantize(self.Wq_)
            return self

        # quaff / quaff_no_momentum
        gamma = 0.0 if self.kind == "quaff_no_momentum" else self.gamma
        O = check_channels(outliers if outliers is not None else [], self.c_in_)
        self.O_ = O
        self.Wq_ = quantize(W, self.bits, PER_OC)  # full W, outlier rows included
        if len(O):
            self.W_O_ = np.ascontiguousarray(W[O, :])
            wmax = row_abs_max(self.W_O_)
            zero_rows = np.nonzero(wmax == 0)[0]
            if len(zero_rows):
                bad = int(O[zero_rows[0]])
                raise ValueError(
                    f"outlier weight row {bad} has zero absolute maximum; "
                    "cannot derive a scaling factor for it"
                )
            self.w_row_abs_max_ = wmax
            if calib is None:
                raise ValueError("quaff with outlier channels requires calibration stats")
            self.calib_max_ = calib.channel_abs_max.copy()
            s0 = beta_from_maxima(calib.channel_abs_max, wmax, O, self.c_in_)
        else:
            self.W_O_ = np.zeros((0, self.c_out_), dtype=np.float32)
            self.w_row_abs_max_ = np.zeros(0, dtype=np.float32)
            s0 = np.ones(self.c_in_, dtype=np.float32)
        self.s0_ = s0.copy()
        self.state_ = ScalingState(s=s0, gamma=gamma)
        self.W_eff_ = self._quaff_effective(dequantize(self.Wq_), self.state_.s)
        return self

    # ------------------------------------------------------------------
    # forward

    def forward(self, X) -> np.ndarray:
        """Apply the engine to a (tokens, c_in) activation batch."""
        t0 = time.perf_counter()
        Y = self._forward_impl(X, quantized_matmul)
        self.last_forward_ms_ = (time.perf_counter() - t0) * 1e3
        return Y

    def transform(self, X) -> np.ndarray:
        return self.forward(X)

    def forward_reference(self, X) -> np.ndarray:
        """Same control flow as forward, integer GEMMs done in float.

        Advances mutable state exactly as ``forward`` does, so comparisons
        should use two identically prepared engines.
        """
        return self._forward_impl(X, _float_matmul)

    def _forward_impl(self, X, mm) -> np.ndarray:
        X = check_matrix(X, "X")
        if X.shape[1] != self.c_in_:
            raise ValueError(f"X has {X.shape[1]} columns, engine expects {self.c_in_}")
        if X.shape[0] == 0:  # empty batch: no work, no state advance
            return np.zeros((0, self.c_out_), dtype=np.float32)

        if self.kind == "fp32":
            return matmul_f32(X, self.W_)

        if self.kind == "naive":
            return mm(quantize(X, self.bits, PER_TOKEN), self.Wq_)

        if self.kind == "smooth_static":
            Xs = scale_columns(X, self.s_static_, mode="divide").astype(np.float32)
            return mm(quantize(Xs, self.bits, PER_TOKEN), self.Wq_)

        if self.kind == "smooth_dynamic":
            s = smooth_factors(col_abs_max(X), row_abs_max(self.W_), self.alpha)
            Wq = quantize(scale_rows(self.W_, s).astype(np.float32), self.bits, PER_OC)
            Xs = scale_columns(X, s, mode="divide").astype(np.float32)
            self.W_eff_ = scale_rows(dequantize(Wq), s, mode="divide").astype(np.float32)
            return mm(quantize(Xs, self.bits, PER_TOKEN), Wq)

        if self.kind == "llm_int8":
            return self._forward_llm_int8(X, mm)

        return self._forward_quaff(X, mm)

    def _forward_llm_int8(self, X, mm) -> np.ndarray:
        live = np.nonzero(col_abs_max(X) > self.sigma)[0]
        if len(live) == 0:
            self.W_eff_ = dequantize(self.Wq_)
            return mm(quantize(X, self.bits, PER_TOKEN), self.Wq_)
        keep = np.setdiff1d(np.arange(self.c_in_), live)
        Y = matmul_f32(
            np.ascontiguousarray(X[:, live]), np.ascontiguousarray(self.W_[live, :])
        )
        if len(keep):
            Wq_keep = QuantizedTensor(
                values=np.ascontiguousarray(self.Wq_.values[keep, :]),
                steps=self.Wq_.steps,
                granularity=PER_OC,
                bits=self.Wq_.bits,
            )
            Xq = quantize(np.ascontiguousarray(X[:, keep]), self.bits, PER_TOKEN)
            Y = Y + mm(Xq, Wq_keep)
        W_eff = dequantize(self.Wq_)
        W_eff[live, :] = self.W_[live, :]
        self.W_eff_ = W_eff
        return Y

    def _forward_quaff(self, X, mm) -> np.ndarray:
        O = self.O_
        if len(O):
            beta = compute_beta(X, self.w_row_abs_max_, O)
        else:
            beta = np.ones(self.c_in_, dtype=np.float32)
        momentum_update(self.state_, beta)
        s = self.state_.s

        Xs = scale_columns(X, s, mode="divide").astype(np.float32)
        Xq = quantize(Xs, self.bits, PER_TOKEN)
        Y = mm(Xq, self.Wq_)

        W_deq = dequantize(self.Wq_)
        self.last_Xq_ = Xq
        self.last_Xq_O_ = None
        if len(O):
            w_hat = ((s[O] - np.float32(1.0))[:, np.newaxis] * self.W_O_).astype(np.float32)
            wq = quantize(w_hat, self.bits, PER_OC)
            # the outlier activation columns reuse term 1's integer tensor
            # and step objects outright - no second quantization pass
            Xq_O = QuantizedTensor(
                values=select_columns(Xq.values, O),
                steps=Xq.steps,
                granularity=PER_TOKEN,
                bits=Xq.bits,
            )
            Y = Y + mm(Xq_O, wq)
            W_deq[O, :] += dequantize(wq)
            self.last_Xq_O_ = Xq_O
        self.W_eff_ = self._quaff_effective(W_deq, s)
        return Y

    def _quaff_effective(self, W_with_correction: np.ndarray, s: np.ndarray) -> np.ndarray:
        return scale_rows(W_with_correction, s, mode="divide").astype(np.float32)

    # ------------------------------------------------------------------
    # accounting

    def effective_weight(self) -> np.ndarray:
        """W_eff of the most recent forward (straight-through backward)."""
        return self.W_eff_

    def storage_bytes(self) -> int:
        """Exact persistent byte census: 1 per int8 value, 4 per float."""
        if self.kind == "fp32":
            return 4 * self.c_in_ * self.c_out_
        if self.kind == "naive":
            return self.Wq_.nbytes()
        if self.kind == "smooth_static":
            return self.Wq_.nbytes() + 4 * self.c_in_
        if self.kind == "smooth_dynamic":
            return 4 * self.c_in_ * self.c_out_
        if self.kind == "llm_int8":
            return 4 * self.c_in_ * self.c_out_ + self.Wq_.nbytes() + 4
        return (
            self.Wq_.nbytes()
            + 4 * self.W_O_.size
            + 4 * len(self.w_row_abs_max_)
            + 4 * self.c_in_
        )


def prepare(W, kind: str, calib: CalibrationStats | None = None, outliers=None, **params) -> QuantLinear:
    """Build and fit a QuantLinear in one call."""
    return QuantLinear(kind=kind, **params).fit(W, calib=calib, outliers=outliers)
