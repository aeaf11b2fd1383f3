"""Command-line front end.

    quaff calibrate  --config F --out F
    quaff train      --config F --calib F --engine K --seed N --out DIR
    quaff compare    DIR... --out DIR
    quaff microbench --config F

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
``QUAFF_THREADS`` caps intra-op (BLAS) parallelism for the process.
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import (
    TOOL_VERSION,
    ConfigError,
    DataError,
    NumericalError,
    RunConfig,
    load_run_config,
    manifest_text,
)
from .engines import KINDS, prepare
from .model import ToyLM, char_tokenize
from .outliers import ROLES, CalibrationStats, load_calibration, save_calibration
from .tensor import col_abs_max, make_rng, matmul_f32, matmul_i8_acc32
from .training import (
    METRICS_HEADER,
    Trainer,
    attach_from_calibration,
    calibration_batches,
    run_calibration,
)
from . import svg


def _read_corpus(rc: RunConfig) -> tuple[dict, np.ndarray]:
    if rc.corpus is None:
        raise ConfigError("this command needs a corpus path in [run]")
    try:
        text = Path(rc.corpus).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"corpus is not UTF-8 text: {exc}") from exc
    if not text:
        raise DataError(f"corpus {rc.corpus} is empty")
    return char_tokenize(text)


def _model_sites(model: ToyLM):
    return {(lin.layer, lin.role): lin.c_in for lin in model.linears()}


def _check_artifact(model: ToyLM, entries) -> None:
    found = {(e.layer, e.role): e.stats.c_in for e in entries}
    expected = _model_sites(model)
    if found != expected:
        raise ConfigError(
            "calibration artifact does not match the model: "
            f"artifact has {len(found)} sites, model expects {len(expected)}"
        )


# ----------------------------------------------------------------------
# calibrate


def cmd_calibrate(args) -> int:
    rc = load_run_config(args.config)
    vocab, ids = _read_corpus(rc)
    cfg = rc.model_config(len(vocab), "fp32", rc.seed)
    model = ToyLM(cfg)
    tc = rc.train_config(rc.seed)
    try:
        batches = calibration_batches(
            ids, tc.seq_len, tc.batch_size, rc.seed, rc.calib_batches
        )
        entries = run_calibration(
            model,
            batches,
            threshold=rc.threshold,
            budget_fracs=rc.budget_fracs or None,
            global_cap=rc.global_cap,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_calibration(args.out, entries)

    c_outs = {(lin.layer, lin.role): lin.c_out for lin in model.linears()}
    kept = total = 0
    for e in entries:
        c_out = c_outs[(e.layer, e.role)]
        kept += len(e.outliers) * c_out
        total += e.stats.c_in * c_out
        print(f"layer {e.layer} {e.role}: |O| = {len(e.outliers)} (budget {e.budget})")
    print(f"global full-precision fraction: {kept / total:.6f}")
    print(f"wrote {args.out}")
    return 0


# ----------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    engine = args.engine if args.engine else rc.engine
    seed = args.seed if args.seed is not None else rc.seed
    out = args.out if args.out else rc.out_dir
    if not out:
        raise ConfigError("no output directory: pass --out or set [run] out_dir")
    out = Path(out)

    vocab, ids = _read_corpus(rc)
    try:
        entries = load_calibration(args.calib)
    except OSError as exc:
        raise DataError(f"cannot read calibration artifact: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    tc = rc.train_config(seed)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        ckpt = out / "checkpoint.bin"
        if not ckpt.is_file():
            raise DataError(f"no checkpoint to resume from at {ckpt}")
        try:
            trainer = Trainer.resume(
                ckpt, ids, tc, calib_entries=entries, threshold=rc.threshold
            )
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        _check_artifact(trainer.model, entries)
    else:
        cfg = rc.model_config(len(vocab), engine, seed)
        model = ToyLM(cfg)
        _check_artifact(model, entries)
        if engine != "fp32":
            attach_from_calibration(model, engine, entries, **rc.engine_params())
        trainer = Trainer(model, ids, tc, calib_entries=entries, threshold=rc.threshold)
        (out / "manifest.txt").write_text(
            manifest_text(rc, engine, seed, calib=args.calib), encoding="utf-8"
        )

    losses = trainer.run(
        metrics_path=out / "metrics.csv",
        out_dir=out,
        checkpoint_every=rc.checkpoint_every,
    )
    done = trainer.step
    final = losses[-1] if losses else float("nan")
    print(f"{engine} seed {seed}: {done} steps, final loss {final:.4f}")
    print(f"run directory: {out}")
    return 0


# ----------------------------------------------------------------------
# compare


def _load_run(run_dir: Path):
    manifest = run_dir / "manifest.txt"
    metrics = run_dir / "metrics.csv"
    if not metrics.is_file():
        raise DataError(f"{run_dir}: missing metrics.csv")
    engine, seed = "unknown", "?"
    if manifest.is_file():
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if line.startswith("engine = "):
                engine = line.split("=", 1)[1].strip()
            elif line.startswith("seed = "):
                seed = line.split("=", 1)[1].strip()
    with open(metrics, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{metrics}: empty metrics file") from None
        if ",".join(header) != METRICS_HEADER:
            raise DataError(f"{metrics}: unexpected metrics columns")
        rows = []
        for row in reader:
            if len(row) != len(header):
                raise DataError(f"{metrics}: malformed row {reader.line_num}")
            rows.append(row)
    return {"dir": run_dir, "engine": engine, "seed": seed, "rows": rows}


def _f(cell: str) -> float | None:
    return float(cell) if cell else None


def cmd_compare(args) -> int:
    runs = [_load_run(Path(d)) for d in args.run_dirs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "merged.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "engine", "seed"] + METRICS_HEADER.split(","))
        for r in runs:
            for row in r["rows"]:
                w.writerow([r["dir"].name, r["engine"], r["seed"]] + row)

    # loss curves, one series per run
    loss_series = []
    for r in runs:
        xs, ys = [], []
        for row in r["rows"]:
            if row[3]:  # loss rows only
                xs.append(int(row[0]))
                ys.append(float(row[3]))
        loss_series.append((f'{r["engine"]}/s{r["seed"]}', xs, ys))
    svg.line_chart(
        out / "loss_vs_step.svg", "Training loss", "step", "cross-entropy", loss_series
    )

    engines = sorted({r["engine"] for r in runs})
    all_steps = sorted(
        {int(row[0]) for r in runs for row in r["rows"] if row[3]}
    )

    def engine_band(value_of):
        """Per-engine mean line + std band over runs (and sites) per step."""
        series, bands = [], []
        for eng in engines:
            per_step: dict[int, list[float]] = {}
            for r in runs:
                if r["engine"] != eng:
                    continue
                for row in r["rows"]:
                    v = value_of(row)
                    if v is not None:
                        per_step.setdefault(int(row[0]), []).append(v)
            xs, mean, lo, hi = [], [], [], []
            for s in all_steps:
                xs.append(s)
                vals = per_step.get(s)
                if vals:
                    m = float(np.mean(vals))
                    sd = float(np.std(vals))
                    mean.append(m)
                    lo.append(m - sd)
                    hi.append(m + sd)
                else:
                    mean.append(None)
                    lo.append(None)
                    hi.append(None)
            series.append((eng, xs, mean))
            bands.append((eng, xs, lo, hi))
        return series, bands

    for role in ROLES:
        series, bands = engine_band(
            lambda row, role=role: _f(row[4]) if row[2] == role else None
        )
        svg.line_chart(
            out / f"hit_rate_{role}.svg",
            f"Outlier hit rate: {role}",
            "step",
            "hit rate",
            series,
            bands=bands,
        )

    series, bands = engine_band(lambda row: _f(row[5]))
    svg.line_chart(
        out / "pearson_vs_step.svg",
        "Scaling-vector similarity (top channels)",
        "step",
        "Pearson r",
        series,
        bands=bands,
    )

    storage, latency = [], []
    for eng in engines:
        per_run_storage, lat = [], []
        for r in runs:
            if r["engine"] != eng:
                continue
            last = max(int(row[0]) for row in r["rows"])
            per_run_storage.append(
                sum(
                    float(row[8])
                    for row in r["rows"]
                    if int(row[0]) == last and row[8]
                )
            )
            lat += [float(row[7]) for row in r["rows"] if row[7]]
        storage.append(float(np.mean(per_run_storage)) if per_run_storage else 0.0)
        latency.append(float(np.mean(lat)) if lat else 0.0)
    svg.bar_chart(
        out / "storage_latency.svg",
        [
            ("Engine storage (linear layers)", "bytes", engines, storage),
            ("Mean step latency", "ms", engines, latency),
        ],
    )
    print(f"compared {len(runs)} runs -> {out}")
    return 0


# ----------------------------------------------------------------------
# microbench


def _bench(fn, reps: int) -> float:
    for _ in range(3):  # warmup, discarded
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


def cmd_microbench(args) -> int:
    rc = load_run_config(args.config)
    t = rc.bench_tokens
    reps = rc.bench_reps
    print("kernel,c_in,c_out,tokens,reps,median_ms")
    for c in rc.bench_shapes:
        rng = make_rng(0, "microbench", c)
        X = rng.standard_normal((t, c)).astype(np.float32)
        W = (rng.standard_normal((c, c)) / np.sqrt(c)).astype(np.float32)
        Ai = rng.integers(-127, 128, size=(t, c), dtype=np.int8)
        Bi = rng.integers(-127, 128, size=(c, c), dtype=np.int8)

        rows = [
            ("matmul_f32", lambda: matmul_f32(X, W)),
            ("matmul_i8_acc32", lambda: matmul_i8_acc32(Ai, Bi)),
        ]
        Xcal = np.abs(X) if t else np.ones((1, c), dtype=np.float32)
        stats = CalibrationStats(c_in=c, channel_abs_max=col_abs_max(Xcal))
        n_out = max(1, c // 100)
        O = np.sort(np.argsort(-stats.channel_abs_max.astype(np.float64))[:n_out])
        for kind in KINDS:
            calib = stats if kind in ("smooth_static", "quaff", "quaff_no_momentum") else None
            outliers = O if kind in ("quaff", "quaff_no_momentum") else None
            eng = prepare(W, kind, calib=calib, outliers=outliers, **rc.engine_params())
            rows.append((f"engine:{kind}", lambda e=eng: e.forward(X)))
        for name, fn in rows:
            ms = _bench(fn, reps)
            print(f"{name},{c},{c},{t},{reps},{ms:.4f}")
    return 0


# ----------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quaff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pc = sub.add_parser("calibrate", help="select outlier channels from a corpus")
    pc.add_argument("--config", required=True)
    pc.add_argument("--out", required=True)
    pc.set_defaults(fn=cmd_calibrate)

    pt = sub.add_parser("train", help="fine-tune adapters under an engine")
    pt.add_argument("--config", required=True)
    pt.add_argument("--calib", required=True)
    pt.add_argument("--engine", choices=KINDS, default=None)
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--out", default=None)
    pt.add_argument("--resume", action="store_true",
                    help="continue from the run directory's checkpoint")
    pt.set_defaults(fn=cmd_train)

    pp = sub.add_parser("compare", help="merge run metrics and render plots")
    pp.add_argument("run_dirs", nargs="+", metavar="DIR")
    pp.add_argument("--out", required=True)
    pp.set_defaults(fn=cmd_compare)

    pm = sub.add_parser("microbench", help="time the kernels and engines")
    pm.add_argument("--config", required=True)
    pm.set_defaults(fn=cmd_microbench)

    p.add_argument("--version", action="version", version=TOOL_VERSION)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limit = os.environ.get("QUAFF_THREADS")
    try:
        if limit is not None:
            try:
                limit = int(limit)
            except ValueError as exc:
                raise ConfigError(f"QUAFF_THREADS={limit!r} is not an integer") from exc
            with threadpool_limits(limits=limit):
                return args.fn(args)
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
