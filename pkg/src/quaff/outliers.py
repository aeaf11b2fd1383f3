"""Outlier-channel calibration, selection, and hit-rate analytics.

A channel counts as an outlier in one calibration sample when its absolute
column maximum exceeds ``threshold`` (default 100) times the mean absolute
value of the whole sample matrix.  Counts accumulated over many samples
drive the selection of a fixed, budgeted outlier set per linear layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import abs_mean, col_abs_max
from .validation import check_channels, check_matrix

ROLES = ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj")

DEFAULT_BUDGET_FRACS = {
    "q_proj": 0.0003,
    "k_proj": 0.0003,
    "v_proj": 0.0003,
    "up_proj": 0.0003,
    "o_proj": 0.04,
    "down_proj": 0.10,
}

GLOBAL_FP_BUDGET = 0.05
OUTLIER_THRESHOLD = 100.0

CALIB_MAGIC = "quaff-calib v1"


@dataclass
class CalibrationStats:
    """Per-channel outlier counts and running maxima for one linear layer."""

    c_in: int
    xi_counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    channel_abs_max: np.ndarray = field(default=None)  # type: ignore[assignment]
    samples_seen: int = 0

    def __post_init__(self) -> None:
        if self.xi_counts is None:
            self.xi_counts = np.zeros(self.c_in, dtype=np.int64)
        else:
            self.xi_counts = np.asarray(self.xi_counts, dtype=np.int64).ravel()
        if self.channel_abs_max is None:
            self.channel_abs_max = np.zeros(self.c_in, dtype=np.float32)
        else:
            self.channel_abs_max = np.asarray(self.channel_abs_max, dtype=np.float32).ravel()
        if len(self.xi_counts) != self.c_in or len(self.channel_abs_max) != self.c_in:
            raise ValueError("stats vectors must have length c_in")

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        """Associative merge of two partial accumulations (for sharded runs)."""
        if other.c_in != self.c_in:
            raise ValueError(f"cannot merge stats of width {other.c_in} into {self.c_in}")
        return CalibrationStats(
            c_in=self.c_in,
            xi_counts=self.xi_counts + other.xi_counts,
            channel_abs_max=np.maximum(self.channel_abs_max, other.channel_abs_max),
            samples_seen=self.samples_seen + other.samples_seen,
        )


def accumulate_calibration(
    stats: CalibrationStats, X, threshold: float = OUTLIER_THRESHOLD
) -> CalibrationStats:
    """Fold one calibration sample into the stats (mutates and returns them).

    A channel's count is incremented when its abs column max exceeds
    ``threshold * mean(|X|)``, the mean running over the full matrix.
    """
    X = check_matrix(X, "X", allow_empty=False)
    if X.shape[1] != stats.c_in:
        raise ValueError(f"sample has {X.shape[1]} channels, stats expect {stats.c_in}")
    colmax = col_abs_max(X)
    cut = threshold * abs_mean(X)
    stats.xi_counts += (colmax > cut).astype(np.int64)
    np.maximum(stats.channel_abs_max, colmax.astype(np.float32), out=stats.channel_abs_max)
    stats.samples_seen += 1
    return stats


def runtime_outliers(X, threshold: float = OUTLIER_THRESHOLD) -> np.ndarray:
    """Channels exceeding the outlier criterion in this batch, sorted ascending."""
    X = check_matrix(X, "X", allow_empty=False)
    colmax = col_abs_max(X)
    return np.nonzero(colmax > threshold * abs_mean(X))[0].astype(np.int64)


def select_outliers(stats: CalibrationStats, budget: int) -> np.ndarray:
    """The top-``budget`` channels by outlier count.

    Ties break toward the larger observed channel maximum, then the lower
    index.  Channels never seen as outliers (count 0) are excluded even if
    the budget has room, so the result may be smaller than ``budget``.
    Returned sorted ascending.
    """
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if budget > stats.c_in:
        raise ValueError(f"budget {budget} exceeds channel count {stats.c_in}")
    order = np.lexsort(
        (
            np.arange(stats.c_in),
            -stats.channel_abs_max.astype(np.float64),
            -stats.xi_counts,
        )
    )
    picked = [i for i in order[:budget] if stats.xi_counts[i] > 0]
    return np.sort(np.asarray(picked, dtype=np.int64))


def allocate_budgets(
    layers,
    budget_fracs=None,
    global_cap: float = GLOBAL_FP_BUDGET,
) -> list[int]:
    """Per-layer outlier budgets from role fractions, capped globally.

    Args:
        layers: sequence of ``(role, c_in, c_out)`` triples.
        budget_fracs: role -> fraction mapping (defaults per role).
        global_cap: max fraction of total weight entries kept full precision.

    Returns:
        One count per layer, ``floor(frac * c_in)``.  If the implied
        full-precision weight fraction ``sum(count * c_out) / sum(c_in *
        c_out)`` exceeds the cap, the o_proj and down_proj counts are
        scaled down proportionally until it fits.
    """
    fracs = dict(DEFAULT_BUDGET_FRACS)
    if budget_fracs:
        fracs.update(budget_fracs)
    counts = []
    for role, c_in, c_out in layers:
        if role not in fracs:
            raise ValueError(f"no budget fraction for role {role!r}")
        counts.append(math.floor(fracs[role] * c_in))

    total = sum(c_in * c_out for _, c_in, c_out in layers)
    if total == 0:
        return counts
    fixed = sum(
        cnt * c_out
        for cnt, (role, _, c_out) in zip(counts, layers)
        if role not in ("o_proj", "down_proj")
    )
    scaled = sum(
        cnt * c_out
        for cnt, (role, _, c_out) in zip(counts, layers)
        if role in ("o_proj", "down_proj")
    )
    if fixed + scaled > global_cap * total and scaled > 0:
        r = max(0.0, (global_cap * total - fixed) / scaled)
        counts = [
            math.floor(r * cnt) if role in ("o_proj", "down_proj") else cnt
            for cnt, (role, _, _) in zip(counts, layers)
        ]
    return counts


def hit_rate(predefined, runtime) -> float:
    """Fraction of live outliers covered by the predefined set.

    An empty runtime set counts as fully covered (1.0).
    """
    pre = set(int(i) for i in np.asarray(predefined, dtype=np.int64).ravel())
    run = set(int(i) for i in np.asarray(runtime, dtype=np.int64).ravel())
    if not run:
        return 1.0
    return len(run & pre) / len(run)


# === calibration artifact (text, versioned) ===


@dataclass
class LayerCalibration:
    """One layer's calibration outcome as stored in the artifact file."""

    layer: int
    role: str
    stats: CalibrationStats
    outliers: np.ndarray
    budget: int

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        self.outliers = check_channels(self.outliers, self.stats.c_in)


def _fmt_floats(v: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in v)


def save_calibration(path, entries) -> None:
    """Write the calibration artifact: header line, then one block per layer."""
    lines = [CALIB_MAGIC, f"layers {len(entries)}"]
    for e in entries:
        st = e.stats
        lines.append(
            f"layer {e.layer} role {e.role} c_in {st.c_in} "
            f"samples {st.samples_seen} budget {e.budget}"
        )
        lines.append("xi " + " ".join(str(int(x)) for x in st.xi_counts))
        lines.append("max " + _fmt_floats(st.channel_abs_max))
        lines.append("outliers " + " ".join(str(int(i)) for i in e.outliers))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_calibration(path) -> list[LayerCalibration]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != CALIB_MAGIC:
        raise ValueError(f"{path}: not a calibration artifact (bad header)")
    if len(lines) < 2 or not lines[1].startswith("layers "):
        raise ValueError(f"{path}: missing layer count")
    n = int(lines[1].split()[1])
    entries = []
    pos = 2
    for _ in range(n):
        if pos + 3 >= len(lines) + 1:
            raise ValueError(f"{path}: truncated artifact")
        head = lines[pos].split()
        if head[0] != "layer" or head[2] != "role" or head[4] != "c_in":
            raise ValueError(f"{path}: malformed layer header {lines[pos]!r}")
        layer, role = int(head[1]), head[3]
        c_in, samples, budget = int(head[5]), int(head[7]), int(head[9])
        xi = np.array([int(x) for x in lines[pos + 1].split()[1:]], dtype=np.int64)
        cmax = np.array(
            [float(x) for x in lines[pos + 2].split()[1:]], dtype=np.float32
        )
        outs = np.array([int(x) for x in lines[pos + 3].split()[1:]], dtype=np.int64)
        stats = CalibrationStats(
            c_in=c_in, xi_counts=xi, channel_abs_max=cmax, samples_seen=samples
        )
        entries.append(
            LayerCalibration(layer=layer, role=role, stats=stats, outliers=outs, budget=budget)
        )
        pos += 4
    return entries


# === estimator-style wrapper ===

try:
    from sklearn.base import BaseEstimator
except ImportError:  # pragma: no cover - sklearn is a hard dependency
    BaseEstimator = object


class OutlierCalibrator(BaseEstimator):
    """Fits the outlier set of one linear layer from calibration samples.

    Parameters
    ----------
    budget : int
        Maximum number of channels to select.
    threshold : float
        Multiplier on the sample's mean absolute value in the criterion.
    """

    def __init__(self, budget: int = 8, threshold: float = OUTLIER_THRESHOLD):
        self.budget = budget
        self.threshold = threshold

    def fit(self, samples, y=None):
        """Accumulate stats over an iterable of (tokens, c_in) matrices."""
        stats = None
        for X in samples:
            X = check_matrix(X, "sample", allow_empty=False)
            if stats is None:
                stats = CalibrationStats(c_in=X.shape[1])
            accumulate_calibration(stats, X, threshold=self.threshold)
        if stats is None:
            raise ValueError("need at least one calibration sample")
        self.stats_ = stats
        self.outliers_ = select_outliers(stats, self.budget)
        self.n_samples_ = stats.samples_seen
        return self

    def transform(self, X) -> np.ndarray:
        """Live outlier channels of a batch under the fitted criterion."""
        return runtime_outliers(X, threshold=self.threshold)

    def score(self, X) -> float:
        """Hit rate of the fitted set against the batch's live outliers."""
        return hit_rate(self.outliers_, self.transform(X))
