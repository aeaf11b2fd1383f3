"""Tiny decoder-only transformer driven by the quantized linear engines.

Architecture: learned token + position embeddings, pre-layernorm blocks,
four-head causal attention, a GELU MLP, and a weight-tied output head.
Six projection sites per block (q/k/v/o/up/down) each run through a
`QuantLinear` engine plus a LoRA adapter; only the adapters train, the
base weights stay frozen.

Backpropagation is hand-written.  Quantized engines are differentiated
with a straight-through rule: the backward pass treats each engine as the
plain matmul ``X @ engine.effective_weight()``, with rounding and the
scaling vector held constant.

Initialization can plant a few "hot" input channels on the o_proj and
down_proj sites (the roles that get a meaningful outlier budget at desk
scale): the corresponding v/up output columns are boosted by ``hot_gain``
and the matching o/down input rows shrunk by the same factor, so those
engine inputs carry realistic high-magnitude outlier channels while the
rest of the network keeps ordinary statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engines import KINDS, QuantLinear
from .outliers import ROLES
from .tensor import make_rng, matmul_f32

LN_EPS = 1e-5
_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_K = np.float32(0.044715)


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 128
    seed: int = 0
    engine_kind: str = "fp32"
    lora_r: int = 16
    lora_alpha: int = 16
    lora_dropout: float = 0.1
    hot_channels: int = 2
    hot_gain: float = 300.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.engine_kind not in KINDS:
            raise ValueError(f"unknown engine kind {self.engine_kind!r}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    seq_len: int = 64
    grad_accum: int = 1
    steps: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")


def gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_K * x * x * x)
    return (np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))).astype(np.float32)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_K * x * x * x)
    t = np.tanh(inner)
    d_inner = _GELU_C * (np.float32(1.0) + np.float32(3.0) * _GELU_K * x * x)
    return (
        np.float32(0.5) * (np.float32(1.0) + t)
        + np.float32(0.5) * x * (np.float32(1.0) - t * t) * d_inner
    ).astype(np.float32)


class LayerNorm:
    """Row-wise layernorm with frozen gain/bias."""

    def __init__(self, gamma: np.ndarray, beta: np.ndarray):
        self.gamma = gamma.astype(np.float32)
        self.beta = beta.astype(np.float32)

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = xc * inv
        out = (xhat * self.gamma + self.beta).astype(np.float32)
        return out, (xhat.astype(np.float32), inv.astype(np.float32))

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        xhat, inv = cache
        d = xhat.shape[1]
        dxhat = dy * self.gamma
        term = dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (
            (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return (term * inv).astype(np.float32)


class EngineLinear:
    """One projection site: frozen engine + trainable LoRA adapter.

    ``W`` stays owned here as the source for engine preparation and
    checkpointing; the engine itself holds only its kind-specific payload.
    """

    def __init__(self, layer: int, role: str, W: np.ndarray, cfg: ModelConfig, rng):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.layer = layer
        self.role = role
        self.W = W.astype(np.float32)
        self.c_in, self.c_out = W.shape
        self.r = cfg.lora_r
        self.scale = np.float32(cfg.lora_alpha / cfg.lora_r)
        self.dropout_p = float(cfg.lora_dropout)
        self.A = (rng.standard_normal((self.c_in, self.r)) / np.sqrt(self.c_in)).astype(
            np.float32
        )
        self.B = np.zeros((self.r, self.c_out), dtype=np.float32)
        self.gA = np.zeros_like(self.A)
        self.gB = np.zeros_like(self.B)
        self.engine = QuantLinear(kind="fp32").fit(self.W)
        self._cache = None

    def attach_engine(self, kind: str, calib=None, outliers=None, **params) -> None:
        self.engine = QuantLinear(kind=kind, **params).fit(
            self.W, calib=calib, outliers=outliers
        )

    def forward(self, X: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        Y = self.engine.forward(X)
        if train and self.dropout_p > 0.0:
            if rng is None:
                raise ValueError("training forward with dropout needs an rng")
            mask = (rng.random(X.shape) >= self.dropout_p).astype(np.float32)
            mask /= np.float32(1.0 - self.dropout_p)
            Z = X * mask
        else:
            mask = None
            Z = X
        ZA = matmul_f32(Z, self.A)
        delta = matmul_f32(ZA, self.B) * self.scale
        self._cache = (X, Z, ZA, mask, self.engine.effective_weight())
        self.last_Y_ = Y  # engine output pre-adapter, for error metrics
        return (Y + delta).astype(np.float32)

    def backward(self, dY: np.ndarray) -> np.ndarray:
        X, Z, ZA, mask, W_eff = self._cache
        self.gB += self.scale * (ZA.T @ dY)
        dZA = self.scale * (dY @ self.B.T)
        self.gA += Z.T @ dZA
        dZ = dZA @ self.A.T
        if mask is not None:
            dZ = dZ * mask
        dX = dY @ W_eff.T + dZ
        return dX.astype(np.float32)

    def zero_grads(self) -> None:
        self.gA[:] = 0.0
        self.gB[:] = 0.0


class Block:
    def __init__(self, layer: int, cfg: ModelConfig, rng, hot_v, hot_u):
        d, f = cfg.d_model, cfg.d_ff
        std = 1.0 / np.sqrt(d)
        std_f = 1.0 / np.sqrt(f)

        def w(rows, cols, scale):
            return (rng.standard_normal((rows, cols)) * scale).astype(np.float32)

        Wq, Wk, Wv, Wo = (w(d, d, std) for _ in range(4))
        Wup = w(d, f, std)
        Wdown = w(f, d, std_f)

        def plant(Wcol, Wrow, channels):
            # boost a column to a fixed norm `gain * median column norm`,
            # and shrink the matching downstream row by the same factor so
            # only the engine INPUT sees the large magnitudes
            med = np.median(np.linalg.norm(Wcol, axis=0))
            for c in channels:
                factor = np.float32(cfg.hot_gain * med / np.linalg.norm(Wcol[:, c]))
                Wcol[:, c] *= factor
                Wrow[c, :] /= factor

        plant(Wv, Wo, hot_v)
        plant(Wup, Wdown, hot_u)

        self.ln1 = LayerNorm(np.ones(d), np.zeros(d))
        self.ln2 = LayerNorm(np.ones(d), np.zeros(d))
        self.q = EngineLinear(layer, "q_proj", Wq, cfg, rng)
        self.k = EngineLinear(layer, "k_proj", Wk, cfg, rng)
        self.v = EngineLinear(layer, "v_proj", Wv, cfg, rng)
        self.o = EngineLinear(layer, "o_proj", Wo, cfg, rng)
        self.up = EngineLinear(layer, "up_proj", Wup, cfg, rng)
        self.down = EngineLinear(layer, "down_proj", Wdown, cfg, rng)

    def linears(self):
        yield self.q
        yield self.k
        yield self.v
        yield self.o
        yield self.up
        yield self.down


class ToyLM:
    """The assembled model; see `build_model`."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = make_rng(cfg.seed, "model-init")
        d = cfg.d_model
        std = 1.0 / np.sqrt(d)
        self.tok_emb = (rng.standard_normal((cfg.vocab_size, d)) * std).astype(np.float32)
        self.pos_emb = (rng.standard_normal((cfg.max_seq_len, d)) * std).astype(np.float32)
        self.hot_channels_: dict[tuple[int, str], np.ndarray] = {}
        self.blocks = []
        for layer in range(cfg.n_layers):
            if cfg.hot_channels > 0 and cfg.hot_gain != 1.0:
                # attention outputs are softmax-averaged, which flattens the
                # hot channel's max-to-mean ratio; a single channel there
                # keeps the outlier criterion margin comfortable
                hot_rng = make_rng(cfg.seed, "hot-channels", layer)
                hot_v = np.sort(hot_rng.choice(d, size=1, replace=False))
                hot_u = np.sort(
                    hot_rng.choice(cfg.d_ff, size=cfg.hot_channels, replace=False)
                )
            else:
                hot_v = np.array([], dtype=np.int64)
                hot_u = np.array([], dtype=np.int64)
            self.hot_channels_[(layer, "o_proj")] = hot_v.astype(np.int64)
            self.hot_channels_[(layer, "down_proj")] = hot_u.astype(np.int64)
            self.blocks.append(Block(layer, cfg, rng, hot_v, hot_u))
        self.lnf = LayerNorm(np.ones(d), np.zeros(d))
        self._tape = None

    # ------------------------------------------------------------------

    def linears(self):
        for b in self.blocks:
            yield from b.linears()

    def attach_engines(self, kind: str, calib_entries=None, **params) -> None:
        """Re-prepare every projection engine under the given kind.

        ``calib_entries`` maps ``(layer, role)`` to a `LayerCalibration`
        carrying the stats and selected outlier channels for that site.
        """
        for lin in self.linears():
            calib = outliers = None
            if calib_entries is not None:
                entry = calib_entries.get((lin.layer, lin.role))
                if entry is not None:
                    calib = entry.stats
                    outliers = entry.outliers
            lin.attach_engine(kind, calib=calib, outliers=outliers, **params)

    def num_parameters(self, trainable_only: bool = False) -> int:
        n_lora = sum(lin.A.size + lin.B.size for lin in self.linears())
        if trainable_only:
            return n_lora
        n = self.tok_emb.size + self.pos_emb.size
        for b in self.blocks:
            n += b.ln1.gamma.size + b.ln1.beta.size + b.ln2.gamma.size + b.ln2.beta.size
            for lin in b.linears():
                n += lin.W.size
        n += self.lnf.gamma.size + self.lnf.beta.size
        return n + n_lora

    # ------------------------------------------------------------------
    # forward / backward

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError("tokens must be (batch, seq)")
        B, T = tokens.shape
        if T > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max {self.cfg.max_seq_len}")
        if tokens.size == 0:
            raise ValueError("empty token batch")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of range")
        return tokens

    def forward_lm(self, tokens, record: bool = False, train: bool = False, rng=None):
        """Logits for a (batch, seq) id matrix.

        With ``record=True`` also returns ``{(layer, role): X}`` traces of
        each engine's input, flattened to (batch*seq, c_in).
        """
        tokens = self._check_tokens(tokens)
        B, T = tokens.shape
        d = self.cfg.d_model
        H = self.cfg.n_heads
        dh = d // H
        inv_sqrt = np.float32(1.0 / np.sqrt(dh))

        x = (self.tok_emb[tokens] + self.pos_emb[:T]).astype(np.float32)
        x = x.reshape(B * T, d)
        traces = {} if record else None
        tape = {"tokens": tokens, "B": B, "T": T, "blocks": []}
        mask = np.triu(np.full((T, T), -np.inf, dtype=np.float32), k=1)

        for li, blk in enumerate(self.blocks):
            bt = {}
            h1, bt["ln1"] = blk.ln1.forward(x)
            if record:
                h1c = h1.copy()  # q/k/v share the same input
                for role in ("q_proj", "k_proj", "v_proj"):
                    traces[(li, role)] = h1c
            q = blk.q.forward(h1, train, rng)
            k = blk.k.forward(h1, train, rng)
            v = blk.v.forward(h1, train, rng)
            # (B, H, T, dh)
            q4 = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k4 = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v4 = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            scores = np.einsum("bhid,bhjd->bhij", q4, k4) * inv_sqrt + mask
            scores -= scores.max(axis=3, keepdims=True)
            e = np.exp(scores, dtype=np.float32)
            P = e / e.sum(axis=3, keepdims=True)
            attn = np.einsum("bhij,bhjd->bhid", P, v4)
            attn2 = attn.transpose(0, 2, 1, 3).reshape(B * T, d)
            if record:
                traces[(li, "o_proj")] = attn2.copy()
            o = blk.o.forward(attn2, train, rng)
            x = x + o
            h2, bt["ln2"] = blk.ln2.forward(x)
            if record:
                traces[(li, "up_proj")] = h2.copy()
            u = blk.up.forward(h2, train, rng)
            gu = gelu(u)
            if record:
                traces[(li, "down_proj")] = gu.copy()
            dn = blk.down.forward(gu, train, rng)
            x = x + dn
            bt.update(P=P, q4=q4, k4=k4, v4=v4, u=u, inv_sqrt=inv_sqrt)
            tape["blocks"].append(bt)

        hf, lnf_cache = self.lnf.forward(x)
        tape["lnf"] = lnf_cache
        logits = matmul_f32(hf, self.tok_emb.T).reshape(B, T, self.cfg.vocab_size)
        self._tape = tape
        if record:
            return logits, traces
        return logits

    def loss_and_grads(self, inputs, targets, train: bool = True, rng=None, record: bool = False):
        """Mean next-token cross-entropy and LoRA gradients.

        Returns ``(loss, grads)`` with grads keyed ``(layer, role, "A"|"B")``,
        plus the activation traces as a third element when ``record`` is set.
        Base weights are frozen; only adapters receive gradients.
        """
        targets = np.asarray(targets, dtype=np.int64)
        traces = None
        if record:
            logits, traces = self.forward_lm(inputs, record=True, train=train, rng=rng)
        else:
            logits = self.forward_lm(inputs, train=train, rng=rng)
        B, T, V = logits.shape
        if targets.shape != (B, T):
            raise ValueError("targets must match inputs shape")
        flat = logits.reshape(B * T, V).astype(np.float64)
        flat -= flat.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(flat).sum(axis=1))
        tgt = targets.reshape(B * T)
        loss = float(np.mean(logZ - flat[np.arange(B * T), tgt]))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss}")

        probs = np.exp(flat - logZ[:, None])
        dlogits = probs
        dlogits[np.arange(B * T), tgt] -= 1.0
        dlogits = (dlogits / (B * T)).astype(np.float32)

        for lin in self.linears():
            lin.zero_grads()
        self._backward(dlogits)
        grads = {}
        for lin in self.linears():
            grads[(lin.layer, lin.role, "A")] = lin.gA.copy()
            grads[(lin.layer, lin.role, "B")] = lin.gB.copy()
        if record:
            return loss, grads, traces
        return loss, grads

    def _backward(self, dlogits: np.ndarray) -> None:
        tape = self._tape
        if tape is None:
            raise RuntimeError("backward called before forward")
        B, T = tape["B"], tape["T"]
        d = self.cfg.d_model
        H = self.cfg.n_heads
        dh = d // H

        dhf = matmul_f32(dlogits, self.tok_emb)
        dx = self.lnf.backward(dhf, tape["lnf"])

        for blk, bt in zip(reversed(self.blocks), reversed(tape["blocks"])):
            # MLP branch
            ddn = dx
            dgu = blk.down.backward(ddn)
            du = (dgu * gelu_grad(bt["u"])).astype(np.float32)
            dh2 = blk.up.backward(du)
            dx = dx + blk.ln2.backward(dh2, bt["ln2"])
            # attention branch
            do = dx
            dattn2 = blk.o.backward(do)
            dattn = dattn2.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            P, q4, k4, v4 = bt["P"], bt["q4"], bt["k4"], bt["v4"]
            dP = np.einsum("bhid,bhjd->bhij", dattn, v4)
            dv4 = np.einsum("bhij,bhid->bhjd", P, dattn)
            dS = P * (dP - (dP * P).sum(axis=3, keepdims=True))
            dS = (dS * bt["inv_sqrt"]).astype(np.float32)
            dq4 = np.einsum("bhij,bhjd->bhid", dS, k4)
            dk4 = np.einsum("bhij,bhid->bhjd", dS, q4)
            dq = dq4.transpose(0, 2, 1, 3).reshape(B * T, d)
            dk = dk4.transpose(0, 2, 1, 3).reshape(B * T, d)
            dv = dv4.transpose(0, 2, 1, 3).reshape(B * T, d)
            dh1 = blk.q.backward(dq) + blk.k.backward(dk) + blk.v.backward(dv)
            dx = dx + blk.ln1.backward(dh1, bt["ln1"])


def build_model(cfg: ModelConfig) -> ToyLM:
    """Deterministic model from config: same seed, bit-identical weights."""
    model = ToyLM(cfg)
    if cfg.engine_kind != "fp32":
        model.attach_engines(cfg.engine_kind)
    return model


# ----------------------------------------------------------------------
# character-level data plumbing


def char_tokenize(text: str):
    """Codepoint-sorted character vocab and the encoded id sequence."""
    if not text:
        raise ValueError("empty corpus")
    chars = sorted(set(text))
    vocab = {c: i for i, c in enumerate(chars)}
    ids = np.array([vocab[c] for c in text], dtype=np.int64)
    return vocab, ids


def sample_batch(ids: np.ndarray, seq_len: int, batch_size: int, seed: int, k: int):
    """Batch ``k`` of the run seeded by ``seed`` - a pure function, so a
    resumed run regenerates exactly the batches it would have seen."""
    n = len(ids)
    if n < seq_len + 1:
        raise ValueError(f"corpus of {n} ids too short for seq_len {seq_len}")
    rng = make_rng(seed, "batch", k)
    starts = rng.integers(0, n - seq_len, size=batch_size)
    inputs = np.stack([ids[s : s + seq_len] for s in starts])
    targets = np.stack([ids[s + 1 : s + seq_len + 1] for s in starts])
    return inputs, targets
