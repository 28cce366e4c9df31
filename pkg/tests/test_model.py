import math

import numpy as np
import pytest

from mdap.errors import CheckpointError, ParameterError
from mdap.model import (ModelConfig, PARAM_FIELDS, category_logits,
                        combine_views, decode, encode_rows, forward,
                        gate_weights, glorot_uniform, gumbel_softmax_assign,
                        init_params, load_checkpoint, save_checkpoint,
                        variant_config, view_inputs)
from mdap.numerics import Rng, row_l2_normalize, softmax_rows


def toy_params(k=3, embed=8, hidden=16, n_s=6, n_t=5, seed=0, ablation="full"):
    config = ModelConfig(k=k, embed_dim=embed, hidden=hidden, tau=0.2,
                         keep_prob=0.5, lam=0.5, ablation=ablation)
    return config, init_params(config, n_s, n_t, Rng(seed))


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(k=0)
    with pytest.raises(ParameterError):
        ModelConfig(tau=0.0)
    with pytest.raises(ParameterError):
        ModelConfig(keep_prob=0.0)
    with pytest.raises(ParameterError):
        ModelConfig(ablation="bogus")
    assert ModelConfig(k=9, ablation="single_view").k == 1


def test_glorot_bound_and_zero_init():
    w = glorot_uniform(Rng(3), 40, 60)
    limit = math.sqrt(6.0 / (40 + 60))
    assert float(np.abs(w).max()) <= limit
    assert abs(float(w.mean())) < 0.02
    config, params = toy_params()
    assert not params.enc_b1.any() and not params.enc_b2.any()
    assert not params.dec_b1.any() and not params.dec_b2.any()
    assert not params.gate.any()


def test_init_params_shapes():
    config, params = toy_params(k=3, embed=8, hidden=16, n_s=6, n_t=5)
    n = 6 + 5
    assert params.item_emb.shape == (n, 8)
    assert params.core_emb.shape == (3, 8)
    assert params.enc_w1.shape == (n, 16)
    assert params.enc_w2.shape == (16, 8)
    assert params.dec_w1.shape == (8, 16)
    assert params.dec_w2.shape == (16, n)
    assert params.gate.shape == (2, 3)


def test_category_logits_zero_row_is_zero():
    config, params = toy_params()
    logits = category_logits(params, np.zeros((1, 11)))
    assert np.array_equal(logits, np.zeros((1, 3)))


def test_assign_eval_closed_form():
    assign, noise = gumbel_softmax_assign(np.array([[1.0, 0.0]]), tau=0.2)
    assert noise is None
    # softmax([5, 0])
    assert np.allclose(assign, [[0.99330715, 0.00669285]], atol=1e-7)


def test_assign_training_matches_gumbel_argmax_probability():
    logits = np.tile(np.array([[1.0, 0.0]]), (10000, 1))
    assign, noise = gumbel_softmax_assign(logits, tau=0.2, rng=Rng(0), training=True)
    assert noise is not None and noise.shape == assign.shape
    freq = float((np.argmax(assign, axis=1) == 0).mean())
    assert abs(freq - math.e / (1 + math.e)) < 0.02


def test_assign_no_gumbel_is_plain_softmax():
    logits = np.array([[0.3, -0.2, 0.1]])
    assign, noise = gumbel_softmax_assign(logits, tau=0.5, rng=Rng(1),
                                          training=True, ablation="no_gumbel")
    assert noise is None
    assert np.allclose(assign, softmax_rows(logits, 0.5))


def test_view_inputs_recompose_input():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((7, 9))
    assign = softmax_rows(rng.standard_normal((7, 4)), 1.0)
    views = view_inputs(x, assign)
    assert len(views) == 4
    assert np.max(np.abs(sum(views) - x)) < 1e-12


def test_encode_decode_formulas():
    # tanh hidden layer, linear output layer on both sides
    config, params = toy_params()
    x = Rng(7).uniform(4, 11)
    hidden, emb = encode_rows(params, x)
    assert np.allclose(hidden, np.tanh(x @ params.enc_w1 + params.enc_b1))
    assert np.allclose(emb, hidden @ params.enc_w2 + params.enc_b2)
    dh, scores = decode(params, emb)
    assert np.allclose(dh, np.tanh(emb @ params.dec_w1 + params.dec_b1))
    assert np.allclose(scores, dh @ params.dec_w2 + params.dec_b2)


def test_gate_weights_hand_value():
    config, params = toy_params(k=2)
    params.gate[0] = [math.log(2.0), 0.0]
    assert np.allclose(gate_weights(params, "s"), [2 / 3, 1 / 3], atol=1e-12)
    assert np.allclose(gate_weights(params, "t"), [0.5, 0.5])


def test_gate_weights_no_gate_is_uniform():
    config, params = toy_params(k=4)
    params.gate[:] = Rng(2).uniform(2, 4)
    assert np.array_equal(gate_weights(params, "s", "no_gate"), np.full(4, 0.25))


def test_combine_views_weighted_sum():
    embs = [np.full((2, 3), 1.0), np.full((2, 3), 2.0)]
    z = combine_views(embs, np.array([0.25, 0.75]))
    assert np.allclose(z, np.full((2, 3), 1.75))


def test_forward_eval_is_deterministic():
    config, params = toy_params()
    x = Rng(4).uniform(5, 11)
    a = forward(params, config, x)
    b = forward(params, config, x)
    assert np.array_equal(a.recon_s, b.recon_s)
    assert np.array_equal(a.recon_t, b.recon_t)
    assert a.input_mask is None and a.gumbel is None


def test_forward_training_reproducible_by_seed():
    config, params = toy_params()
    x = Rng(4).uniform(5, 11)
    a = forward(params, config, x, Rng(9), training=True)
    b = forward(params, config, x, Rng(9), training=True)
    c = forward(params, config, x, Rng(10), training=True)
    assert np.array_equal(a.recon_s, b.recon_s)
    assert not np.array_equal(a.recon_s, c.recon_s)


def test_forward_shared_corruption_feeds_both_paths():
    config, params = toy_params()
    x = Rng(4).uniform(5, 11)
    trace = forward(params, config, x, Rng(9), training=True)
    # the dropped input the views decompose is the one the logits saw
    assert np.max(np.abs(sum(trace.views) - trace.x)) < 1e-9
    assert np.array_equal(trace.x, trace.input_mask.apply(trace.x_norm))


def test_forward_k1_matches_single_view():
    base = ModelConfig(k=1, embed_dim=8, hidden=16, tau=0.2, keep_prob=0.5, lam=0.5)
    params = init_params(base, 6, 5, Rng(0))
    sv = variant_config(base, "single_view")
    x = Rng(4).uniform(5, 11)
    a = forward(params, base, x)
    b = forward(params, sv, x)
    assert np.max(np.abs(a.recon_s - b.recon_s)) < 1e-9
    assert np.max(np.abs(a.recon_t - b.recon_t)) < 1e-9


def test_forward_padded_user_gets_uniform_assignment():
    config, params = toy_params(k=3)
    x = Rng(4).uniform(5, 11)
    x[2] = 0.0
    trace = forward(params, config, x)
    assert np.allclose(trace.assign[2], np.full(3, 1 / 3), atol=1e-12)


def test_forward_trace_shapes():
    config, params = toy_params(k=3, embed=8, hidden=16, n_s=6, n_t=5)
    x = Rng(1).uniform(4, 11)
    trace = forward(params, config, x, Rng(2), training=True)
    assert trace.x_norm.shape == (4, 11)
    assert trace.logits.shape == (4, 3)
    assert trace.gumbel.shape == (4, 3)
    assert trace.assign.shape == (4, 3)
    assert len(trace.views) == 3 and trace.views[0].shape == (4, 11)
    assert len(trace.view_embs) == 3 and trace.view_embs[0].shape == (4, 8)
    assert trace.gate_s.shape == (3,) and trace.gate_t.shape == (3,)
    assert trace.z_s.shape == (4, 8) and trace.z_t.shape == (4, 8)
    assert trace.recon_s.shape == (4, 6)
    assert trace.recon_t.shape == (4, 5)


def test_forward_single_view_skips_logit_path():
    config = ModelConfig(k=4, embed_dim=8, hidden=16, tau=0.2, keep_prob=0.5,
                         lam=0.5, ablation="single_view")
    params = init_params(config, 6, 5, Rng(0))
    trace = forward(params, config, Rng(1).uniform(4, 11), Rng(2), training=True)
    assert trace.logits is None and trace.gumbel is None
    assert np.array_equal(trace.assign, np.ones((4, 1)))


def test_variant_config():
    base = ModelConfig(k=8)
    assert variant_config(base, "no_gumbel").ablation == "no_gumbel"
    assert variant_config(base, "single_view").k == 1
    assert variant_config(base, "full") == base


def test_checkpoint_round_trip(tmp_path):
    config, params = toy_params(k=3, embed=8, hidden=16, n_s=6, n_t=5, seed=42)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params, config, extra={"note": "toy", "epoch": 3})
    loaded, loaded_config, extra = load_checkpoint(path)
    assert loaded_config == config
    assert extra == {"note": "toy", "epoch": 3}
    assert loaded.n_items_s == 6 and loaded.n_items_t == 5
    for field in PARAM_FIELDS:
        assert np.array_equal(getattr(loaded, field), getattr(params, field)), field


def test_checkpoint_rejects_corruption(tmp_path):
    config, params = toy_params()
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params, config)
    blob = open(path, "rb").read()

    bad_magic = tmp_path / "bad_magic.ckpt"
    bad_magic.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(bad_magic))

    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(blob[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(truncated))

    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(padded))


def test_params_copy_is_deep():
    config, params = toy_params()
    clone = params.copy()
    clone.item_emb[0, 0] += 1.0
    assert params.item_emb[0, 0] != clone.item_emb[0, 0]
