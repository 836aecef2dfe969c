import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, small_config
from schubert import autograd as ag
from schubert.autograd import DimensionError, Tensor
from schubert.config import ArchConfig, ConfigError, toy_config
from schubert.data import build_vocab, collate, generate_synthetic_corpus, infinite_batches, make_examples
from schubert.model import encoder_layer_forward, init_model, mlm_logits, mlm_nsp_loss, model_forward
from schubert.training import evaluate, train


def ln_ref(x, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


class TestInit:
    def test_deterministic(self):
        cfg = small_config()
        a, b = init_model(cfg, seed=5), init_model(cfg, seed=5)
        for (n1, t1), (_, t2) in zip(a.named_tensors(), b.named_tensors()):
            assert t1.data.tobytes() == t2.data.tobytes(), n1

    def test_shapes_smallest_config(self):
        cfg = ArchConfig(ell=1, h=2, a=[1], k=[1], v=[1], f=[2], vocab_size=3)
        w = init_model(cfg)
        layer = w.layers[0]
        assert layer.K.shape == (1, 1, 2) and layer.Q.shape == (1, 1, 2)
        assert layer.V.shape == (1, 1, 2) and layer.P.shape == (2, 1, 1)
        assert layer.D.shape == (2, 2) and layer.G.shape == (2, 2)
        assert w.E.shape == (3, 2)

    def test_embedding_std(self):
        w = init_model(toy_config(), seed=0)  # 512 x 64 entries
        assert w.E.data.size >= 1e4
        assert abs(w.E.data.std() - 0.02) <= 0.1 * 0.02
        assert np.abs(w.E.data).max() <= 2 * 0.02 / 0.87962566 + 1e-9

    def test_biases_and_norms(self):
        w = init_model(small_config())
        assert (w.layers[0].D_bias.data == 0).all() and (w.layers[1].ln2_gain.data == 1).all()
        assert (w.mlm_bias.data == 0).all() and (w.emb_ln_shift.data == 0).all()


class TestEncoderLayer:
    def test_zero_projections_give_double_layer_norm(self):
        cfg = small_config()
        w = init_model(cfg, seed=1, requires_grad=False)
        layer = dataclasses.replace(w.layers[0], P=Tensor(np.zeros(w.layers[0].P.shape)), G=Tensor(np.zeros(w.layers[0].G.shape)))
        x = np.random.default_rng(0).normal(size=(5, cfg.h))
        out = encoder_layer_forward(Tensor(x), layer, eps=1e-12).data
        np.testing.assert_allclose(out, ln_ref(ln_ref(x)), atol=1e-5)

    def test_single_unmasked_key_gets_all_attention(self):
        cfg = small_config()
        w = init_model(cfg, seed=2, requires_grad=False)
        x = Tensor(np.random.default_rng(1).normal(size=(4, cfg.h)))
        _, probs = encoder_layer_forward(x, w.layers[1], np.array([True, False, False, False]), return_probs=True)
        np.testing.assert_array_equal(probs.data[:, :, 0], 1.0)
        np.testing.assert_array_equal(probs.data[:, :, 1:], 0.0)

    def test_hand_computed_single_head(self):
        cfg = ArchConfig(ell=1, h=2, a=[1], k=[1], v=[1], f=[1], vocab_size=3)
        w = init_model(cfg, requires_grad=False)
        layer = dataclasses.replace(
            w.layers[0],
            Q=Tensor([[[1.0, 0.0]]]),
            K=Tensor([[[0.0, 1.0]]]),
            V=Tensor([[[1.0, 1.0]]]),
            P=Tensor([[[1.0]], [[0.5]]]),
            G=Tensor(np.zeros((2, 1))),
        )
        x = np.array([[1.0, 0.0], [0.0, 2.0]])
        out, probs = encoder_layer_forward(Tensor(x), layer, return_probs=True)
        # q = [1, 0], key = [0, 2] -> scores row 0: [0, 2], row 1: [0, 0]
        p0 = 1 / (1 + math.e**2)
        np.testing.assert_allclose(probs.data[0], [[p0, 1 - p0], [0.5, 0.5]], atol=1e-6)
        value = np.array([1.0, 2.0])
        ctx = np.array([p0 * value[0] + (1 - p0) * value[1], value.mean()])
        attn = ctx[:, None] * np.array([1.0, 0.5])[None, :]
        np.testing.assert_allclose(out.data, ln_ref(ln_ref(x + attn)), atol=1e-5)

    def test_hidden_size_mismatch(self):
        w = init_model(small_config(), requires_grad=False)
        with pytest.raises(DimensionError):
            encoder_layer_forward(Tensor(np.ones((3, 5))), w.layers[0])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_attention_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        cfg = small_config()
        w = init_model(cfg, seed=seed % 7, requires_grad=False)
        seq = int(rng.integers(1, 8))
        mask = rng.random(seq) < 0.7
        mask[0] = True
        x = Tensor(rng.normal(size=(seq, cfg.h)))
        _, probs = encoder_layer_forward(x, w.layers[0], mask, return_probs=True)
        np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-6)
        assert (probs.data[..., ~mask] == 0).all()


class TestModelForward:
    def test_zero_layers_rejected(self):
        with pytest.raises(ConfigError):
            ArchConfig(ell=0, h=4, a=[], k=[], v=[], f=[])

    def test_output_shapes(self):
        cfg = small_config()
        w = init_model(cfg, requires_grad=False)
        seq, cls = model_forward(w, [2, 7, 9, 3])
        assert seq.shape == (4, cfg.h) and cls.shape == (cfg.h,)

    def test_token_out_of_range(self):
        w = init_model(small_config(), requires_grad=False)
        with pytest.raises(IndexError):
            model_forward(w, [2, 40])

    def test_too_long(self):
        w = init_model(small_config(), requires_grad=False)
        with pytest.raises(IndexError):
            model_forward(w, [5] * 17)

    def test_batch_order_invariance(self):
        cfg = small_config()
        w = init_model(cfg, seed=3, requires_grad=False)
        b = random_batch(cfg, np.random.default_rng(0), batch=4)
        seq, cls = model_forward(w, b.tokens, b.segments, None, b.attention_mask)
        perm = np.array([2, 0, 3, 1])
        seq_p, cls_p = model_forward(w, b.tokens[perm], b.segments[perm], None, b.attention_mask[perm])
        np.testing.assert_allclose(seq_p.data, seq.data[perm], atol=1e-6)
        np.testing.assert_allclose(cls_p.data, cls.data[perm], atol=1e-6)

    def test_padding_does_not_leak(self):
        cfg = small_config()
        w = init_model(cfg, seed=4, requires_grad=False)
        tokens = np.array([[2, 8, 9, 3, 0, 0]])
        other = np.array([[2, 8, 9, 3, 17, 21]])
        mask = np.array([[True] * 4 + [False] * 2])
        a, _ = model_forward(w, tokens, mask=mask)
        b, _ = model_forward(w, other, mask=mask)
        np.testing.assert_allclose(a.data[0, :4], b.data[0, :4], atol=1e-6)

    def test_heterogeneous_layers_forward_backward(self):
        cfg = small_config(ell=3, a=(1, 3, 2), k=(2, 5, 1), v=(4, 1, 3), f=(3, 9, 1))
        w = init_model(cfg, seed=6)
        total, _, _ = mlm_nsp_loss(w, random_batch(cfg, np.random.default_rng(1)))
        total.backward()
        for name, t in w.named_tensors():
            assert t.grad is not None and t.grad.shape == t.shape, name


def _permute(weights, i, dim, perm):
    lw = weights.layers[i]
    K, Q, V, P = lw.K.data, lw.Q.data, lw.V.data, lw.P.data
    D, Db, G = lw.D.data, lw.D_bias.data, lw.G.data
    if dim == "f":
        D, Db, G = D[perm], Db[perm], G[:, perm]
    elif dim == "a":
        K, Q, V, P = K[:, perm], Q[:, perm], V[:, perm], P[:, :, perm]
    elif dim == "k":
        K, Q = K[perm], Q[perm]
    elif dim == "v":
        V, P = V[perm], P[:, perm]
    new = dataclasses.replace(
        lw, K=Tensor(K), Q=Tensor(Q), V=Tensor(V), P=Tensor(P), D=Tensor(D), D_bias=Tensor(Db), G=Tensor(G)
    )
    layers = list(weights.layers)
    layers[i] = new
    return dataclasses.replace(weights, layers=layers)


@pytest.mark.parametrize("dim", ["a", "k", "v", "f"])
def test_unit_permutation_equivariance(dim):
    cfg = small_config(a=(3, 3), k=(4, 4), v=(5, 3), f=(7, 6))
    w = init_model(cfg, seed=8, requires_grad=False)
    rng = np.random.default_rng(2)
    b = random_batch(cfg, rng)
    ref, ref_cls = model_forward(w, b.tokens, b.segments, None, b.attention_mask)
    for i in range(cfg.ell):
        perm = rng.permutation(cfg.layer(i)[dim])
        out, cls = model_forward(_permute(w, i, dim, perm), b.tokens, b.segments, None, b.attention_mask)
        np.testing.assert_allclose(out.data, ref.data, atol=1e-6)
        np.testing.assert_allclose(cls.data, ref_cls.data, atol=1e-6)


class TestLoss:
    def test_no_masked_positions(self):
        cfg = small_config()
        w = init_model(cfg, requires_grad=False)
        b = random_batch(cfg, np.random.default_rng(3), n_masked=0)
        total, mlm, nsp = mlm_nsp_loss(w, b)
        assert mlm.item() == 0.0 and total.item() == nsp.item()

    def test_masked_position_out_of_range(self):
        cfg = small_config()
        w = init_model(cfg, requires_grad=False)
        b = random_batch(cfg, np.random.default_rng(4))
        b.mlm_cols[0] = b.tokens.shape[1]
        with pytest.raises(IndexError):
            mlm_nsp_loss(w, b)

    def test_untrained_mlm_near_log_vocab(self):
        cfg = toy_config()
        w = init_model(cfg, seed=0, requires_grad=False)
        b = random_batch(cfg, np.random.default_rng(5), batch=8, seq=20, n_masked=40)
        _, mlm, _ = mlm_nsp_loss(w, b)
        assert abs(mlm.item() - math.log(cfg.vocab_size)) <= 0.15 * math.log(cfg.vocab_size)

    def test_decode_tie_gradient_has_both_paths(self):
        cfg = small_config()
        w = init_model(cfg, seed=9)
        b = random_batch(cfg, np.random.default_rng(6))
        total, _, _ = mlm_nsp_loss(w, b)
        total.backward()
        full = w.E.grad.copy()

        # same loss, but the decoder reads a separate copy of E
        w.zero_grad()
        E_dec = Tensor(w.E.data.copy(), requires_grad=True)
        seq, cls = model_forward(w, b.tokens, b.segments, None, b.attention_mask)
        logits = mlm_logits(dataclasses.replace(w, E=E_dec), seq, b.mlm_rows, b.mlm_cols)
        nsp = ag.cross_entropy(cls @ w.nsp_W.T + w.nsp_b, b.is_next)
        (ag.cross_entropy(logits, b.mlm_targets) + nsp).backward()
        lookup = w.E.grad
        assert np.abs(lookup).max() > 0 and np.abs(E_dec.grad).max() > 0
        np.testing.assert_allclose(full, lookup + E_dec.grad, rtol=1e-5, atol=1e-9)

    def test_training_decreases_loss(self):
        corpus = generate_synthetic_corpus(seed=1, n_sentences=50, vocab_hint=60)
        vocab = build_vocab(corpus, 128)
        cfg = dataclasses.replace(toy_config(), ell=2, h=32, a=[2, 2], k=[8, 8], v=[8, 8], f=[64, 64],
                                  vocab_size=len(vocab), max_positions=32)
        w = init_model(cfg, seed=0)
        examples = list(make_examples(corpus, vocab, seed=0, max_positions=32, n_examples=256))
        fixed = [collate(examples[i : i + 64]) for i in range(0, 256, 64)]
        batches = infinite_batches(examples, 16, seed=0)
        losses = [sum(evaluate(w, fixed))]
        for _ in range(4):
            train(w, batches, 50, lr=2e-3)
            losses.append(sum(evaluate(w, fixed)))
        assert all(b < a for a, b in zip(losses, losses[1:])), losses
