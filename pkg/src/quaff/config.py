"""Run configuration: a line-oriented ``key = value`` format with
``[section]`` headers, parsed strictly against a declared schema.

Unknown sections or keys, malformed values, and out-of-range numbers all
raise `ConfigError`; the command-line front end maps the error classes to
stable exit codes (config 2, data 3, numerical 4).

Relative paths in the file resolve against the config file's directory,
so a checked-in recipe works from any working directory.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .engines import KINDS
from .model import ModelConfig, TrainConfig
from .outliers import DEFAULT_BUDGET_FRACS, GLOBAL_FP_BUDGET, OUTLIER_THRESHOLD, ROLES

TOOL_VERSION = "quaff 0.1.0"


class ConfigError(Exception):
    """Invalid or inconsistent configuration (exit code 2)."""

    exit_code = 2


class DataError(Exception):
    """Unreadable or malformed input data (exit code 3)."""

    exit_code = 3


class NumericalError(Exception):
    """Non-finite or otherwise broken numerics at runtime (exit code 4)."""

    exit_code = 4


# section -> key -> (converter name, default)
_SCHEMA = {
    "run": {
        "corpus": ("path", None),
        "out_dir": ("str", None),
        "seed": ("int", 0),
        "engine": ("str", "quaff"),
    },
    "model": {
        "d_model": ("int", 128),
        "n_layers": ("int", 2),
        "n_heads": ("int", 4),
        "d_ff": ("int", 512),
        "max_seq_len": ("int", 128),
        "lora_r": ("int", 16),
        "lora_alpha": ("int", 16),
        "lora_dropout": ("float", 0.1),
        "hot_channels": ("int", 2),
        "hot_gain": ("float", 300.0),
    },
    "train": {
        "lr": ("float", 2e-4),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.999),
        "eps": ("float", 1e-8),
        "batch_size": ("int", 16),
        "seq_len": ("int", 64),
        "grad_accum": ("int", 1),
        "steps": ("int", 200),
        "checkpoint_every": ("int", 100),
    },
    "engine": {
        "gamma": ("float", 0.2),
        "sigma": ("float", 6.0),
        "alpha": ("float", 0.5),
        "bits": ("int", 8),
        "threshold": ("float", OUTLIER_THRESHOLD),
        "global_cap": ("float", GLOBAL_FP_BUDGET),
        # plus budget.<role> overrides, validated dynamically
    },
    "calibrate": {
        "batches": ("int", 8),
    },
    "microbench": {
        "shapes": ("ints", "128 256 512"),
        "tokens": ("int", 64),
        "reps": ("int", 25),
    },
}


@dataclasses.dataclass
class RunConfig:
    corpus: Path | None
    out_dir: str | None
    seed: int
    engine: str
    model_kw: dict
    train_kw: dict
    checkpoint_every: int
    gamma: float
    sigma: float
    alpha: float
    bits: int
    threshold: float
    global_cap: float
    budget_fracs: dict
    calib_batches: int
    bench_shapes: list
    bench_tokens: int
    bench_reps: int

    def model_config(self, vocab_size: int, engine_kind: str, seed: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, seed=seed, engine_kind=engine_kind, **self.model_kw
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.train_kw)

    def engine_params(self) -> dict:
        return {
            "gamma": self.gamma,
            "sigma": self.sigma,
            "alpha": self.alpha,
            "bits": self.bits,
        }


def _convert(section: str, key: str, kind: str, raw):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "ints":
            return [int(tok) for tok in str(raw).split()]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return raw


def _check_range(name, value, lo=None, hi=None):
    if lo is not None and value < lo:
        raise ConfigError(f"{name} = {value} out of range (min {lo})")
    if hi is not None and value > hi:
        raise ConfigError(f"{name} = {value} out of range (max {hi})")


def load_run_config(path) -> RunConfig:
    """Parse and validate a config file; all defaults resolved."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case as written
    try:
        with open(path, "r", encoding="utf-8") as f:
            cp.read_file(f)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values: dict[str, dict] = {s: dict(kv) for s, kv in _SCHEMA.items()}
    for s in values:
        values[s] = {k: d for k, (_, d) in _SCHEMA[s].items()}
    budget_fracs: dict[str, float] = {}

    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if section == "engine" and key.startswith("budget."):
                role = key[len("budget.") :]
                if role not in ROLES:
                    raise ConfigError(f"{path}: unknown role in key {key!r}")
                frac = _convert(section, key, "float", raw)
                _check_range(key, frac, 0.0, 1.0)
                budget_fracs[role] = frac
                continue
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            kind, _ = _SCHEMA[section][key]
            values[section][key] = _convert(section, key, kind, raw)

    run = values["run"]
    eng = values["engine"]
    tr = values["train"]

    corpus = run["corpus"]
    if corpus is not None:
        corpus = (path.parent / corpus).resolve()
        if not corpus.is_file():
            raise ConfigError(f"corpus file not found: {corpus}")
    if run["engine"] not in KINDS:
        raise ConfigError(f"unknown engine kind {run['engine']!r}")
    _check_range("gamma", eng["gamma"], 0.0, 1.0)
    _check_range("alpha", eng["alpha"], 0.0, 1.0)
    _check_range("sigma", eng["sigma"], 0.0)
    _check_range("bits", eng["bits"], 2, 8)
    _check_range("threshold", eng["threshold"], 0.0)
    _check_range("global_cap", eng["global_cap"], 0.0, 1.0)
    _check_range("lora_dropout", values["model"]["lora_dropout"], 0.0, 1.0)
    for name in ("steps", "batch_size", "seq_len", "grad_accum"):
        _check_range(name, tr[name], 1)
    _check_range("checkpoint_every", tr["checkpoint_every"], 0)
    _check_range("batches", values["calibrate"]["batches"], 1)
    _check_range("reps", values["microbench"]["reps"], 1)

    train_kw = {k: v for k, v in tr.items() if k != "checkpoint_every"}
    try:
        TrainConfig(seed=0, **train_kw)  # surface range errors here, not later
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        corpus=corpus,
        out_dir=run["out_dir"],
        seed=run["seed"],
        engine=run["engine"],
        model_kw=values["model"],
        train_kw=train_kw,
        checkpoint_every=tr["checkpoint_every"],
        gamma=eng["gamma"],
        sigma=eng["sigma"],
        alpha=eng["alpha"],
        bits=eng["bits"],
        threshold=eng["threshold"],
        global_cap=eng["global_cap"],
        budget_fracs=budget_fracs,
        calib_batches=values["calibrate"]["batches"],
        bench_shapes=values["microbench"]["shapes"],
        bench_tokens=values["microbench"]["tokens"],
        bench_reps=values["microbench"]["reps"],
    )


def manifest_text(rc: RunConfig, engine: str, seed: int, calib=None) -> str:
    """Fully resolved configuration in the same format, plus tool version.

    This is what a run directory records; feeding it back through
    `load_run_config` reproduces the run.
    """
    fracs = dict(DEFAULT_BUDGET_FRACS)
    fracs.update(rc.budget_fracs)
    lines = [
        "[run]",
        f"corpus = {rc.corpus}" if rc.corpus else "",
        f"out_dir = {rc.out_dir}" if rc.out_dir else "",
        f"seed = {seed}",
        f"engine = {engine}",
        "",
        "[model]",
    ]
    lines += [f"{k} = {v}" for k, v in sorted(rc.model_kw.items())]
    lines += ["", "[train]"]
    lines += [f"{k} = {v}" for k, v in sorted(rc.train_kw.items())]
    lines += [f"checkpoint_every = {rc.checkpoint_every}", "", "[engine]"]
    lines += [
        f"gamma = {rc.gamma}",
        f"sigma = {rc.sigma}",
        f"alpha = {rc.alpha}",
        f"bits = {rc.bits}",
        f"threshold = {rc.threshold}",
        f"global_cap = {rc.global_cap}",
    ]
    lines += [f"budget.{role} = {fracs[role]}" for role in ROLES]
    lines += ["", "[calibrate]", f"batches = {rc.calib_batches}"]
    if calib is not None:
        lines += ["", f"# calibration artifact: {calib}"]
    lines += ["", f"# tool: {TOOL_VERSION}", ""]
    return "\n".join(ln for ln in lines if ln is not None)
