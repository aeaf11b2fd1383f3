"""Binary checkpointing for the toy model and its engines.

Layout (all integers little-endian):

    magic   9 bytes  b"QUAFFCKPT"
    version u32      currently 1
    count   u32      number of tensors
    table   per tensor: u16 name length, utf-8 name, u8 dtype tag,
            u8 ndim, ndim x u64 dims, u64 payload offset
    payload concatenated raw C-order tensor bytes

Tensors are written sorted by name with tightly packed offsets, so the
same state always produces byte-identical files.

Engine payloads are stored as the *inputs* to preparation (base weights,
calibration maxima, outlier sets) plus the mutable scaling state; loading
re-runs the deterministic preparation and then restores the state, which
reproduces every derived quantized tensor bit for bit.
"""

from __future__ import annotations

import struct

import numpy as np

from .outliers import CalibrationStats
from .model import ModelConfig, ToyLM, build_model
from .scaling import ScalingState

MAGIC = b"QUAFFCKPT"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.int8): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_tensors(path, tensors: dict) -> None:
    """Serialize a name -> ndarray mapping (sorted, packed, deterministic)."""
    names = sorted(tensors)
    table = bytearray()
    payload = bytearray()
    for name in names:
        arr = np.asarray(tensors[name])
        if not arr.flags.c_contiguous:  # 0-d stays 0-d; ascontiguousarray would flatten it
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
        table += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        table += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        f.write(table)
        f.write(payload)


def read_tensors(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = len(MAGIC) + 8
    metas = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            tag, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            (offset,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            metas.append((name, tag, shape, offset))
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint table") from exc
    base = pos
    out = {}
    for name, tag, shape, offset in metas:
        if tag not in _TAG_DTYPES:
            raise ValueError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = base + offset
        end = start + n * dtype.itemsize
        if end > len(data):
            raise ValueError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(data[start:end], dtype=dtype).reshape(shape).copy()
    return out


def _scalar(x, dtype) -> np.ndarray:
    return np.asarray(x, dtype=dtype)


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def _untext(arr: np.ndarray) -> str:
    return arr.tobytes().decode("utf-8")


_INT_CFG = (
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "max_seq_len",
    "seed",
    "lora_r",
    "lora_alpha",
    "hot_channels",
)
_FLOAT_CFG = ("lora_dropout", "hot_gain")


def checkpoint_save(model: ToyLM, path, extra: dict | None = None) -> None:
    """Write model weights, adapters, engine payloads, and extra tensors."""
    t: dict[str, np.ndarray] = {}
    cfg = model.cfg
    for f in _INT_CFG:
        t[f"config/{f}"] = _scalar(getattr(cfg, f), np.int64)
    for f in _FLOAT_CFG:
        t[f"config/{f}"] = _scalar(getattr(cfg, f), np.float32)
    t["config/engine_kind"] = _text(cfg.engine_kind)

    t["model/tok_emb"] = model.tok_emb
    t["model/pos_emb"] = model.pos_emb
    t["model/lnf/gamma"] = model.lnf.gamma
    t["model/lnf/beta"] = model.lnf.beta
    for li, blk in enumerate(model.blocks):
        t[f"layer{li}/ln1/gamma"] = blk.ln1.gamma
        t[f"layer{li}/ln1/beta"] = blk.ln1.beta
        t[f"layer{li}/ln2/gamma"] = blk.ln2.gamma
        t[f"layer{li}/ln2/beta"] = blk.ln2.beta
        for lin in blk.linears():
            p = f"layer{li}/{lin.role}"
            t[f"{p}/W"] = lin.W
            t[f"{p}/lora_A"] = lin.A
            t[f"{p}/lora_B"] = lin.B
            eng = lin.engine
            t[f"{p}/engine/kind"] = _text(eng.kind)
            t[f"{p}/engine/bits"] = _scalar(eng.bits, np.int64)
            t[f"{p}/engine/sigma"] = _scalar(eng.sigma, np.float32)
            t[f"{p}/engine/alpha"] = _scalar(eng.alpha, np.float32)
            if hasattr(eng, "calib_max_"):
                t[f"{p}/engine/calib_max"] = eng.calib_max_
            if hasattr(eng, "Wq_"):
                t[f"{p}/engine/W_int"] = eng.Wq_.values
                t[f"{p}/engine/W_steps"] = eng.Wq_.steps
            if eng.kind in ("quaff", "quaff_no_momentum"):
                t[f"{p}/engine/outliers"] = eng.O_.astype(np.int64)
                t[f"{p}/engine/W_O"] = eng.W_O_
                t[f"{p}/engine/s"] = eng.state_.s
                t[f"{p}/engine/gamma"] = _scalar(eng.state_.gamma, np.float32)
                t[f"{p}/engine/step"] = _scalar(eng.state_.step, np.int64)
    if extra:
        for name, arr in extra.items():
            t[f"extra/{name}"] = np.asarray(arr)
    write_tensors(path, t)


def checkpoint_load(path, expect_cfg: ModelConfig | None = None):
    """Rebuild the model from a checkpoint.

    Returns ``(model, extra)`` where extra holds whatever was stored under
    ``extra/`` at save time (optimizer state, trainer counters, ...).
    """
    t = read_tensors(path)
    kw = {f: int(t[f"config/{f}"]) for f in _INT_CFG}
    kw.update({f: float(t[f"config/{f}"]) for f in _FLOAT_CFG})
    kw["engine_kind"] = _untext(t["config/engine_kind"])
    cfg = ModelConfig(**kw)
    if expect_cfg is not None:
        for f in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(expect_cfg, f) != getattr(cfg, f):
                raise ValueError(
                    f"checkpoint {f}={getattr(cfg, f)} does not match "
                    f"expected {getattr(expect_cfg, f)}"
                )

    model = ToyLM(cfg)
    model.tok_emb = t["model/tok_emb"]
    model.pos_emb = t["model/pos_emb"]
    model.lnf.gamma = t["model/lnf/gamma"]
    model.lnf.beta = t["model/lnf/beta"]
    for li, blk in enumerate(model.blocks):
        blk.ln1.gamma = t[f"layer{li}/ln1/gamma"]
        blk.ln1.beta = t[f"layer{li}/ln1/beta"]
        blk.ln2.gamma = t[f"layer{li}/ln2/gamma"]
        blk.ln2.beta = t[f"layer{li}/ln2/beta"]
        for lin in blk.linears():
            p = f"layer{li}/{lin.role}"
            if t[f"{p}/W"].shape != lin.W.shape:
                raise ValueError(f"checkpoint weight shape mismatch at {p}")
            lin.W = t[f"{p}/W"]
            lin.A = t[f"{p}/lora_A"]
            lin.B = t[f"{p}/lora_B"]
            kind = _untext(t[f"{p}/engine/kind"])
            bits = int(t[f"{p}/engine/bits"])
            sigma = float(t[f"{p}/engine/sigma"])
            alpha = float(t[f"{p}/engine/alpha"])
            calib = None
            if f"{p}/engine/calib_max" in t:
                calib = CalibrationStats(
                    c_in=lin.c_in, channel_abs_max=t[f"{p}/engine/calib_max"]
                )
            outliers = t.get(f"{p}/engine/outliers")
            gamma = (
                float(t[f"{p}/engine/gamma"]) if f"{p}/engine/gamma" in t else 0.2
            )
            lin.attach_engine(
                kind, calib=calib, outliers=outliers, bits=bits, sigma=sigma,
                alpha=alpha, gamma=gamma,
            )
            eng = lin.engine
            # the quantized payloads are re-derived from W; the stored copies
            # must agree bit for bit or the file is inconsistent
            if f"{p}/engine/W_int" in t:
                if not (
                    np.array_equal(t[f"{p}/engine/W_int"], eng.Wq_.values)
                    and np.array_equal(t[f"{p}/engine/W_steps"], eng.Wq_.steps)
                ):
                    raise ValueError(f"checkpoint engine payload mismatch at {p}")
            if kind in ("quaff", "quaff_no_momentum"):
                if not np.array_equal(t[f"{p}/engine/W_O"], eng.W_O_):
                    raise ValueError(f"checkpoint engine payload mismatch at {p}")
                eng.state_ = ScalingState(s=t[f"{p}/engine/s"], gamma=gamma)
                eng.state_.step = int(t[f"{p}/engine/step"])
    extra = {k[len("extra/") :]: v for k, v in t.items() if k.startswith("extra/")}
    return model, extra
