"""Calibration driver and the LoRA fine-tuning loop.

Everything stochastic here is a pure function of ``(seed, index)``: batch
``k`` and its dropout mask depend only on the run seed and the micro-batch
counter, never on loop history.  Together with the checkpoint carrying the
optimizer moments and the engines' scaling state, that makes a resumed run
replay the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_load, checkpoint_save
from .model import ToyLM, TrainConfig, sample_batch
from .outliers import (
    GLOBAL_FP_BUDGET,
    OUTLIER_THRESHOLD,
    ROLES,
    CalibrationStats,
    LayerCalibration,
    accumulate_calibration,
    allocate_budgets,
    hit_rate,
    runtime_outliers,
    select_outliers,
)
from .quantization import quant_error
from .scaling import pearson_similarity
from .tensor import make_rng, matmul_f32

METRICS_COLUMNS = (
    "step",
    "layer",
    "role",
    "loss",
    "hit_rate",
    "pearson_sim",
    "quant_error",
    "step_latency_ms",
    "storage_bytes",
)
METRICS_HEADER = ",".join(METRICS_COLUMNS)

PEARSON_TOP_FRAC = 0.01


# ----------------------------------------------------------------------
# calibration


def calibration_batches(ids, seq_len, batch_size, seed, n_batches):
    """Token batches for calibration, drawn from their own seed stream."""
    for k in range(n_batches):
        rng = make_rng(seed, "calib-batch", k)
        n = len(ids)
        if n < seq_len + 1:
            raise ValueError(f"corpus of {n} ids too short for seq_len {seq_len}")
        starts = rng.integers(0, n - seq_len, size=batch_size)
        yield np.stack([ids[s : s + seq_len] for s in starts])


def run_calibration(
    model: ToyLM,
    batches,
    threshold: float = OUTLIER_THRESHOLD,
    budget_fracs=None,
    global_cap: float = GLOBAL_FP_BUDGET,
) -> list[LayerCalibration]:
    """Accumulate outlier statistics over forward passes and select O.

    The model should still be running its default full-precision engines;
    traces are the engine inputs at every projection site.

    Returns one `LayerCalibration` per site, in (layer, role) order.
    """
    sites = [(lin.layer, lin.role) for lin in model.linears()]
    stats = {
        (lin.layer, lin.role): CalibrationStats(c_in=lin.c_in)
        for lin in model.linears()
    }
    n_batches = 0
    for tokens in batches:
        _, traces = model.forward_lm(tokens, record=True)
        for key in sites:
            accumulate_calibration(stats[key], traces[key], threshold)
        n_batches += 1
    if n_batches == 0:
        raise ValueError("calibration needs at least one batch")

    triples = [(lin.role, lin.c_in, lin.c_out) for lin in model.linears()]
    budgets = allocate_budgets(triples, budget_fracs, global_cap)
    entries = []
    for (layer, role), budget in zip(sites, budgets):
        st = stats[(layer, role)]
        entries.append(
            LayerCalibration(
                layer=layer,
                role=role,
                stats=st,
                outliers=select_outliers(st, budget),
                budget=budget,
            )
        )
    return entries


def entries_by_site(entries) -> dict:
    return {(e.layer, e.role): e for e in entries}


def attach_from_calibration(model: ToyLM, kind: str, entries, **params) -> None:
    """Prepare every projection engine from the calibration artifact."""
    model.attach_engines(kind, calib_entries=entries_by_site(entries), **params)


# ----------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction over a named parameter dict.

    Parameters are updated in place, so the dict should hold references to
    the live model arrays.
    """

    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = np.float32(lr)
        self.beta1 = np.float32(beta1)
        self.beta2 = np.float32(beta2)
        self.eps = np.float32(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = np.float32(1.0 - float(self.beta1) ** self.t)
        c2 = np.float32(1.0 - float(self.beta2) ** self.t)
        for key, p in self.params.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (np.float32(1.0) - b1) * g
            v *= b2
            v += (np.float32(1.0) - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------------------
# metrics formatting


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def format_row(
    step,
    layer=None,
    role=None,
    loss=None,
    hit=None,
    pearson=None,
    qerr=None,
    latency_ms=None,
    storage=None,
) -> str:
    return ",".join(
        _fmt(v) for v in (step, layer, role, loss, hit, pearson, qerr, latency_ms, storage)
    )


# ----------------------------------------------------------------------
# training loop


class Trainer:
    """Runs the LoRA fine-tuning loop and records per-step metrics.

    Each step draws ``grad_accum`` independent micro-batches, averages
    their adapter gradients, and applies one Adam update.  Metrics rows:
    one loss row per step (loss + latency), plus one row per projection
    site carrying hit rate, scaling-vector similarity, quantization error,
    and the engine's storage census.
    """

    def __init__(
        self,
        model: ToyLM,
        ids: np.ndarray,
        tc: TrainConfig,
        calib_entries=None,
        threshold: float = OUTLIER_THRESHOLD,
    ):
        self.model = model
        self.ids = np.asarray(ids, dtype=np.int64)
        self.tc = tc
        self.threshold = float(threshold)
        self.step = 0
        self.losses: list[float] = []
        params = {}
        for lin in model.linears():
            params[(lin.layer, lin.role, "A")] = lin.A
            params[(lin.layer, lin.role, "B")] = lin.B
        self.opt = Adam(params, tc.lr, tc.beta1, tc.beta2, tc.eps)
        # runtime outlier channels per site, from the most recent step's
        # recorded micro-batch; lets callers score alternative predefined
        # sets against the same activations the metrics used
        self.last_live_: dict = {}
        entries = entries_by_site(calib_entries) if calib_entries else {}
        self.artifact_outliers = {}
        for lin in model.linears():
            key = (lin.layer, lin.role)
            if key in entries:
                self.artifact_outliers[key] = entries[key].outliers
            elif hasattr(lin.engine, "O_"):
                self.artifact_outliers[key] = lin.engine.O_
            else:
                self.artifact_outliers[key] = np.zeros(0, dtype=np.int64)

    # -- one optimization step -----------------------------------------

    def train_step(self):
        """Run one update; returns (mean micro-batch loss, metrics rows)."""
        t0 = time.perf_counter()
        tc = self.tc
        acc: dict | None = None
        losses = []
        traces = None
        for i in range(tc.grad_accum):
            k = self.step * tc.grad_accum + i
            inputs, targets = sample_batch(self.ids, tc.seq_len, tc.batch_size, tc.seed, k)
            rng = make_rng(tc.seed, "dropout", k)
            record = i == tc.grad_accum - 1
            try:
                out = self.model.loss_and_grads(
                    inputs, targets, train=True, rng=rng, record=record
                )
            except FloatingPointError as exc:
                raise FloatingPointError(f"at step {self.step}: {exc}") from exc
            except ValueError as exc:
                if "non-finite" in str(exc):  # blown-up activation caught by validation
                    raise FloatingPointError(f"at step {self.step}: {exc}") from exc
                raise
            loss, grads = out[0], out[1]
            if record:
                traces = out[2]
            losses.append(loss)
            if acc is None:
                acc = grads
            else:
                for key in acc:
                    acc[key] += grads[key]
        if tc.grad_accum > 1:
            scale = np.float32(1.0 / tc.grad_accum)
            for key in acc:
                acc[key] *= scale
        self.opt.step(acc)
        latency_ms = (time.perf_counter() - t0) * 1000.0
        loss = float(np.mean(losses))

        rows = [format_row(self.step, loss=loss, latency_ms=latency_ms)]
        for lin in self.model.linears():
            key = (lin.layer, lin.role)
            X = traces[key]
            live = runtime_outliers(X, self.threshold)
            self.last_live_[key] = live
            hr = hit_rate(self.artifact_outliers[key], live)
            qe = quant_error(lin.last_Y_, matmul_f32(X, lin.W)).frobenius_rel
            eng = lin.engine
            ps = None
            if hasattr(eng, "state_") and hasattr(eng, "s0_"):
                # keep at least two entries so the statistic stays defined
                # on narrow layers
                frac = max(PEARSON_TOP_FRAC, 2.0 / len(eng.s0_))
                ps = pearson_similarity(eng.s0_, eng.state_.s, frac)
            rows.append(
                format_row(
                    self.step,
                    layer=lin.layer,
                    role=lin.role,
                    hit=hr,
                    pearson=ps,
                    qerr=qe,
                    storage=eng.storage_bytes(),
                )
            )
        self.step += 1
        self.losses.append(loss)
        return loss, rows

    # -- driver ---------------------------------------------------------

    def run(
        self,
        steps: int | None = None,
        metrics_path=None,
        out_dir=None,
        checkpoint_every: int = 0,
    ) -> list[float]:
        """Train until ``self.step`` reaches ``steps`` (default: tc.steps).

        Appends to an existing metrics file when resuming (step > 0),
        otherwise writes a fresh one with the header line.
        """
        target = self.tc.steps if steps is None else steps
        f = None
        if metrics_path is not None:
            fresh = self.step == 0
            f = open(metrics_path, "a" if not fresh else "w", encoding="utf-8")
            if fresh:
                f.write(METRICS_HEADER + "\n")
        try:
            while self.step < target:
                _, rows = self.train_step()
                if f is not None:
                    f.write("\n".join(rows) + "\n")
                    f.flush()
                if (
                    out_dir is not None
                    and checkpoint_every > 0
                    and self.step % checkpoint_every == 0
                    and self.step < target
                ):
                    self.save(Path(out_dir) / "checkpoint.bin")
        finally:
            if f is not None:
                f.close()
        if out_dir is not None:
            self.save(Path(out_dir) / "checkpoint.bin")
        return self.losses

    # -- persistence ----------------------------------------------------

    def _extra_tensors(self) -> dict:
        extra = {
            "train/step": np.asarray(self.step, dtype=np.int64),
            "opt/t": np.asarray(self.opt.t, dtype=np.int64),
        }
        for (layer, role, pname) in self.opt.params:
            base = f"opt/layer{layer}/{role}/{pname}"
            extra[f"{base}/m"] = self.opt.m[(layer, role, pname)]
            extra[f"{base}/v"] = self.opt.v[(layer, role, pname)]
        return extra

    def save(self, path) -> None:
        checkpoint_save(self.model, path, extra=self._extra_tensors())

    @classmethod
    def resume(
        cls,
        path,
        ids,
        tc: TrainConfig,
        calib_entries=None,
        threshold: float = OUTLIER_THRESHOLD,
    ) -> "Trainer":
        """Rebuild a trainer mid-run from a checkpoint written by `save`."""
        model, extra = checkpoint_load(path)
        tr = cls(model, ids, tc, calib_entries=calib_entries, threshold=threshold)
        tr.step = int(extra["train/step"])
        tr.opt.t = int(extra["opt/t"])
        for key in tr.opt.params:
            layer, role, pname = key
            base = f"opt/layer{layer}/{role}/{pname}"
            tr.opt.m[key] = extra[f"{base}/m"].copy()
            tr.opt.v[key] = extra[f"{base}/v"].copy()
        return tr
