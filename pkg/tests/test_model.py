"""Toy transformer: shapes, init contracts, manual backward, tokenizing."""

from __future__ import annotations

import numpy as np
import pytest

from quaff.model import (
    ModelConfig,
    TrainConfig,
    build_model,
    char_tokenize,
    gelu,
    sample_batch,
)
from quaff.tensor import make_rng


def _small_cfg(**kw) -> ModelConfig:
    base = dict(
        vocab_size=20,
        d_model=32,
        n_layers=1,
        n_heads=2,
        d_ff=64,
        max_seq_len=16,
        seed=3,
        lora_dropout=0.0,
        hot_channels=0,
    )
    base.update(kw)
    return ModelConfig(**base)


def _toks(shape, vocab=20, seed=1):
    return np.random.default_rng(seed).integers(0, vocab, size=shape)


# --- config & construction ---


def test_config_rejects_bad_head_split():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(vocab_size=10, d_model=30, n_heads=4)


def test_config_rejects_unknown_engine():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, engine_kind="int2")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_same_seed_identical_weights():
    a = build_model(_small_cfg())
    b = build_model(_small_cfg())
    np.testing.assert_array_equal(a.tok_emb, b.tok_emb)
    for la, lb in zip(a.linears(), b.linears()):
        np.testing.assert_array_equal(la.W, lb.W)
        np.testing.assert_array_equal(la.A, lb.A)


def test_parameter_census_closed_form():
    cfg = ModelConfig(vocab_size=30)  # defaults: d=128, L=2, f=512, r=16
    m = build_model(cfg)
    d, f, L, r, V, S = 128, 512, 2, 16, 30, 128
    base = V * d + S * d + L * (4 * d * d + 2 * d * f + 4 * d) + 2 * d
    lora = L * (10 * r * d + 2 * r * f)
    assert m.num_parameters() == base + lora
    assert m.num_parameters(trainable_only=True) == lora


# --- forward ---


def test_logits_shape():
    m = build_model(ModelConfig(vocab_size=50, seed=0))
    logits = m.forward_lm(_toks((2, 8), vocab=50))
    assert logits.shape == (2, 8, 50)
    assert logits.dtype == np.float32


def test_lora_zero_init_is_identity_delta():
    m = build_model(_small_cfg())
    toks = _toks((2, 8))
    base = m.forward_lm(toks)
    for lin in m.linears():  # scrambling A is invisible while B == 0
        lin.A = np.ones_like(lin.A) * 5.0
    np.testing.assert_array_equal(m.forward_lm(toks), base)


def test_record_traces_one_per_role():
    cfg = ModelConfig(vocab_size=30, seed=1)
    m = build_model(cfg)
    toks = _toks((2, 8), vocab=30)
    logits, traces = m.forward_lm(toks, record=True)
    assert len(traces) == 6 * cfg.n_layers
    for (layer, role), X in traces.items():
        assert X.shape[0] == 2 * 8
        assert 0 <= layer < cfg.n_layers


def test_planted_channels_are_live_outliers():
    from quaff.outliers import runtime_outliers

    m = build_model(ModelConfig(vocab_size=30, seed=2))
    _, traces = m.forward_lm(_toks((4, 32), vocab=30, seed=5), record=True)
    for key, hot in m.hot_channels_.items():
        live = set(runtime_outliers(traces[key]).tolist())
        assert set(hot.tolist()) <= live


def test_hot_channels_disabled_gives_calm_activations():
    from quaff.outliers import runtime_outliers

    m = build_model(ModelConfig(vocab_size=30, seed=2, hot_channels=0))
    _, traces = m.forward_lm(_toks((4, 32), vocab=30, seed=5), record=True)
    for X in traces.values():
        assert len(runtime_outliers(X)) == 0


def test_token_validation():
    m = build_model(_small_cfg())
    with pytest.raises(ValueError, match="range"):
        m.forward_lm(np.array([[25]]))
    with pytest.raises(ValueError, match="exceeds"):
        m.forward_lm(np.zeros((1, 17), dtype=np.int64))
    with pytest.raises(ValueError, match="empty"):
        m.forward_lm(np.zeros((0, 4), dtype=np.int64))


def test_engine_swap_touches_only_linear_outputs():
    # with benign activations, int8 engines perturb logits only slightly;
    # attention masking and normalization stay engine-agnostic
    cfg = _small_cfg(seed=8)
    toks = _toks((2, 8))
    fp = build_model(cfg)
    ref = fp.forward_lm(toks)
    qm = build_model(cfg)
    qm.attach_engines("naive")
    out = qm.forward_lm(toks)
    rel = np.linalg.norm(out - ref) / np.linalg.norm(ref)
    assert 0 < rel < 0.05
    # re-attaching fp32 restores the exact baseline
    qm.attach_engines("fp32")
    np.testing.assert_array_equal(qm.forward_lm(toks), ref)


# --- loss & gradients ---


def test_uniform_logits_loss_is_log_vocab():
    m = build_model(_small_cfg())
    m.tok_emb[:] = 0.0
    m.pos_emb[:] = 0.0
    toks = _toks((2, 8))
    loss, _ = m.loss_and_grads(toks, toks, train=False)
    assert loss == pytest.approx(np.log(20), abs=1e-5)


def test_loss_rejects_shape_mismatch():
    m = build_model(_small_cfg())
    with pytest.raises(ValueError):
        m.loss_and_grads(_toks((2, 8)), _toks((2, 7)))


def test_non_finite_loss_raises():
    m = build_model(_small_cfg())
    m.tok_emb[0, 0] = np.nan
    with pytest.raises((FloatingPointError, ValueError)):
        m.loss_and_grads(_toks((2, 8)), _toks((2, 8)), train=False)


def test_grads_only_for_adapters():
    m = build_model(_small_cfg())
    loss, grads = m.loss_and_grads(_toks((2, 8)), _toks((2, 8)), train=False)
    assert set(k[2] for k in grads) == {"A", "B"}
    assert len(grads) == 12 * m.cfg.n_layers  # 6 roles x (A, B)
    # B=0 blocks the A-path, so A grads vanish at init while B grads do not
    assert all(not grads[k].any() for k in grads if k[2] == "A")
    assert any(grads[k].any() for k in grads if k[2] == "B")


def _fd_check(model, inp, tgt, n_coords=30, h=1e-3):
    loss, grads = model.loss_and_grads(inp, tgt, train=False)

    def f():
        l, _ = model.loss_and_grads(inp, tgt, train=False)
        return l

    worst = 0.0
    for lin in model.linears():
        for name in ("A", "B"):
            P = getattr(lin, name)
            G = grads[(lin.layer, lin.role, name)]
            idx = np.argsort(-np.abs(G).ravel())[: n_coords // 12 + 1]
            for i in idx:
                r, c = np.unravel_index(i, P.shape)
                keep = P[r, c]
                P[r, c] = keep + h
                lp = f()
                P[r, c] = keep - h
                lm = f()
                P[r, c] = keep
                fd = (lp - lm) / (2 * h)
                a = G[r, c]
                denom = max(abs(a), abs(fd), 1e-12)
                worst = max(worst, abs(a - fd) / denom)
    return worst


def test_gradient_check_against_central_differences():
    m = build_model(_small_cfg())
    rng = make_rng(99, "gradcheck-init")
    for lin in m.linears():
        lin.B = (rng.standard_normal(lin.B.shape) * 0.05).astype(np.float32)
    worst = _fd_check(m, _toks((2, 8)), _toks((2, 8), seed=2))
    assert worst <= 1e-2


def test_straight_through_grads_track_smooth_path():
    # FD through the quantized forward only measures rounding jumps, so the
    # meaningful check is that the surrogate gradients align with the
    # gradients of the smooth (fp32-engine) model at the same parameters
    def grads_for(kind):
        m = build_model(_small_cfg(seed=11))
        if kind != "fp32":
            m.attach_engines(kind)
        rng = make_rng(5, "gradcheck-init")
        for lin in m.linears():
            lin.B = (rng.standard_normal(lin.B.shape) * 0.05).astype(np.float32)
        _, g = m.loss_and_grads(_toks((2, 8)), _toks((2, 8), seed=2), train=False)
        return g

    gf = grads_for("fp32")
    gn = grads_for("naive")
    for key in gf:
        a, b = gf[key].ravel(), gn[key].ravel()
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)
        assert cos > 0.99, f"{key}: cos={cos}"


def test_dropout_requires_rng_and_perturbs_delta():
    cfg = _small_cfg(lora_dropout=0.5)
    m = build_model(cfg)
    for lin in m.linears():
        lin.B = np.ones_like(lin.B) * 0.1
    toks = _toks((2, 8))
    with pytest.raises(ValueError, match="rng"):
        m.forward_lm(toks, train=True)
    a = m.forward_lm(toks, train=True, rng=make_rng(0, "drop"))
    b = m.forward_lm(toks, train=True, rng=make_rng(1, "drop"))
    assert not np.array_equal(a, b)
    # eval mode ignores dropout entirely
    np.testing.assert_array_equal(m.forward_lm(toks), m.forward_lm(toks))


# --- gelu ---


def test_gelu_reference_values():
    # values of the tanh form 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
    x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0], dtype=np.float32)
    y = gelu(x)
    assert y[2] == 0.0
    assert y[3] == pytest.approx(0.841192, abs=1e-5)
    assert y[4] == pytest.approx(2.996363, abs=1e-5)
    assert y[0] == pytest.approx(-0.003638, abs=1e-5)


# --- char data ---


def test_char_tokenize_example():
    vocab, ids = char_tokenize("abab")
    assert vocab == {"a": 0, "b": 1}
    np.testing.assert_array_equal(ids, [0, 1, 0, 1])


def test_char_tokenize_vocab_is_distinct_codepoints():
    text = "hello world"
    vocab, ids = char_tokenize(text)
    assert len(vocab) == len(set(text))
    assert len(ids) == len(text)
    assert list(vocab) == sorted(vocab)


def test_char_tokenize_empty_raises():
    with pytest.raises(ValueError):
        char_tokenize("")


def test_sample_batch_deterministic_and_shifted():
    _, ids = char_tokenize("the quick brown fox jumps over the lazy dog " * 20)
    a_in, a_tgt = sample_batch(ids, seq_len=12, batch_size=4, seed=5, k=3)
    b_in, b_tgt = sample_batch(ids, seq_len=12, batch_size=4, seed=5, k=3)
    np.testing.assert_array_equal(a_in, b_in)
    np.testing.assert_array_equal(a_tgt, b_tgt)
    c_in, _ = sample_batch(ids, seq_len=12, batch_size=4, seed=5, k=4)
    assert not np.array_equal(a_in, c_in)
    # targets are inputs shifted by one position
    np.testing.assert_array_equal(a_in[:, 1:], a_tgt[:, :-1])


def test_sample_batch_corpus_too_short():
    with pytest.raises(ValueError):
        sample_batch(np.arange(5), seq_len=8, batch_size=2, seed=0, k=0)
