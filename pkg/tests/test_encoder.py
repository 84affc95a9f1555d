import numpy as np
import pytest

from flowig import encoder
from flowig.encoder import (
    ABSOLUTE,
    DISENTANGLED,
    EncoderConfig,
    _rel_index,
    backward,
    embed_ids,
    forward,
    forward_from_embeddings,
    init_params,
    zero_grads_like,
)
from flowig.errors import ConfigError

from conftest import finite_diff_check, make_example, randomize_params, small_config


class TestConfig:
    def test_divisibility_rejected(self):
        with pytest.raises(ConfigError, match="divisible"):
            EncoderConfig(vocab_size=10, max_seq_len=8, heads=3, d_model=8)

    def test_head_dim(self):
        cfg = EncoderConfig(vocab_size=10, max_seq_len=8, heads=4, d_model=64)
        assert cfg.d_head == 16
        assert cfg.rel_size == 2 * cfg.rel_window + 1

    def test_variant_rejected(self):
        with pytest.raises(ConfigError, match="variant"):
            EncoderConfig(vocab_size=10, max_seq_len=8, attention_variant="rope")

    def test_n_classes_fixed(self):
        with pytest.raises(ConfigError):
            EncoderConfig(vocab_size=10, max_seq_len=8, n_classes=5)


class TestInit:
    def test_deterministic(self):
        cfg = small_config(20)
        a, b = init_params(cfg), init_params(cfg)
        assert sorted(a) == sorted(b)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_variant_tables(self):
        assert "pos_emb" in init_params(small_config(20, ABSOLUTE))
        p = init_params(small_config(20, DISENTANGLED))
        assert "rel_emb" in p and "pos_emb" not in p
        assert p["rel_emb"].shape == (9, 8)

    def test_head_zeroed(self):
        p = init_params(small_config(20))
        assert not p["head.w"].any()
        assert not p["head.b"].any()

    def test_float64(self):
        for v in init_params(small_config(20)).values():
            assert v.dtype == np.float64


class TestEmbed:
    def test_position_only_for_absolute(self):
        ids = np.array([[1, 5, 0, 0]])
        cfg_a = small_config(20, ABSOLUTE, max_seq_len=4)
        cfg_d = small_config(20, DISENTANGLED, max_seq_len=4)
        pa, pd = init_params(cfg_a), init_params(cfg_d)
        xa = embed_ids(pa, cfg_a, ids)
        xd = embed_ids(pd, cfg_d, ids)
        np.testing.assert_allclose(xa[0], pa["tok_emb"][ids[0]] + pa["pos_emb"][:4])
        np.testing.assert_array_equal(xd[0], pd["tok_emb"][ids[0]])

    def test_out_of_range_id(self):
        cfg = small_config(20, max_seq_len=4)
        with pytest.raises(ConfigError, match="vocabulary"):
            embed_ids(init_params(cfg), cfg, np.array([[0, 1, 2, 20]]))


class TestForward:
    def test_attention_rows_normalized(self):
        rng = np.random.default_rng(0)
        cfg = small_config(20, layers=2)
        p = randomize_params(init_params(cfg), rng)
        emb = rng.normal(size=(3, 16, 8))
        mask = np.ones((3, 16))
        mask[1, 10:] = 0
        _, trace = forward_from_embeddings(p, cfg, emb, mask)
        for cache in trace.layer_caches:
            rows = cache["attn"].sum(axis=-1)
            np.testing.assert_allclose(rows, 1.0, atol=1e-12)
            # masked keys receive exactly zero attention
            assert not cache["attn"][1, :, :, 10:].any()

    def test_pad_embedding_invariance(self):
        rng = np.random.default_rng(1)
        cfg = small_config(20)
        p = randomize_params(init_params(cfg), rng)
        emb = rng.normal(size=(16, 8))
        mask = np.ones(16)
        mask[9:] = 0
        base, _ = forward_from_embeddings(p, cfg, emb, mask)
        emb2 = emb.copy()
        emb2[9:] = rng.normal(size=(7, 8)) * 10
        alt, _ = forward_from_embeddings(p, cfg, emb2, mask)
        np.testing.assert_allclose(base, alt, atol=1e-12)

    def test_untrained_softmax_uniform(self, schema, vocab):
        cfg = small_config(vocab.size, max_seq_len=64, d_model=16, d_ff=24)
        p = init_params(cfg)
        ex = make_example(vocab, schema, [100.0 + i for i in range(schema.d)])
        logits, _ = forward(p, cfg, ex)
        probs = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(probs, 1 / 3, atol=1e-12)

    def test_zero_layer_hand_check(self):
        # layers=0, no final norm: logits == head(emb[0]) exactly
        cfg = small_config(20, layers=0, use_final_norm=False)
        rng = np.random.default_rng(2)
        p = randomize_params(init_params(cfg), rng)
        emb = rng.normal(size=(16, 8))
        logits, _ = forward_from_embeddings(p, cfg, emb, np.ones(16))
        np.testing.assert_allclose(logits, emb[0] @ p["head.w"] + p["head.b"])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        for variant in (ABSOLUTE, DISENTANGLED):
            cfg = small_config(20, variant)
            p = randomize_params(init_params(cfg), rng)
            emb = rng.normal(size=(4, 16, 8))
            mask = (rng.random((4, 16)) > 0.2).astype(float)
            mask[:, 0] = 1
            batched, _ = forward_from_embeddings(p, cfg, emb, mask)
            for b in range(4):
                single, _ = forward_from_embeddings(p, cfg, emb[b], mask[b])
                np.testing.assert_allclose(single, batched[b], atol=1e-12)


class TestRelativePositions:
    def test_index_values(self):
        idx = _rel_index(5, 2)
        assert idx[0, 0] == 2
        assert idx[4, 0] == 4
        assert idx[0, 4] == 0
        assert idx[3, 1] == 4

    def test_clipping_saturates(self):
        idx = _rel_index(64, 16)
        assert idx[57, 40] == idx[33, 16] == 32  # 17 and 24 apart clip alike
        assert idx[40, 0] == 32
        assert idx[0, 40] == 0

    def test_zero_table_ablation(self):
        # with a zeroed relative table, disentangled scores are the absolute
        # content scores shrunk by exactly sqrt(3)
        rng = np.random.default_rng(4)
        cfg_a = small_config(20, ABSOLUTE)
        cfg_d = small_config(20, DISENTANGLED)
        shared = randomize_params(init_params(cfg_a), rng)
        pd = dict(shared)
        pd.pop("pos_emb")
        pd["rel_emb"] = np.zeros((cfg_d.rel_size, cfg_d.d_model))
        emb = rng.normal(size=(16, 8))
        mask = np.ones(16)
        _, ta = forward_from_embeddings(shared, cfg_a, emb, mask)
        _, td = forward_from_embeddings(pd, cfg_d, emb, mask)
        sa = ta.layer_caches[0]["scores"]
        sd = td.layer_caches[0]["scores"]
        np.testing.assert_allclose(sd * np.sqrt(3.0), sa, atol=1e-12)


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(5)
        cfg = small_config(20, DISENTANGLED)
        p = randomize_params(init_params(cfg), rng)
        emb = rng.normal(size=(16, 8))
        _, trace = forward_from_embeddings(p, cfg, emb, np.ones(16))
        grads, demb = backward(p, trace, np.zeros(3))
        assert not demb.any()
        for k, g in grads.items():
            assert not g.any(), k

    @pytest.mark.parametrize("variant", [ABSOLUTE, DISENTANGLED])
    def test_finite_difference(self, variant):
        rng = np.random.default_rng(6)
        cfg = small_config(20, variant)
        p = randomize_params(init_params(cfg), rng)
        emb = rng.normal(size=(16, 8))
        mask = np.ones(16)
        mask[12:] = 0
        worst = finite_diff_check(p, cfg, emb, mask, rng, coords_per_tensor=4)
        assert worst < 1e-4

    def test_batched_grad_is_sum_of_singles(self):
        rng = np.random.default_rng(7)
        cfg = small_config(20, DISENTANGLED)
        p = randomize_params(init_params(cfg), rng)
        emb = rng.normal(size=(3, 16, 8))
        mask = np.ones((3, 16))
        dlog = rng.normal(size=(3, 3))
        _, trace = forward_from_embeddings(p, cfg, emb, mask)
        gb, _ = backward(p, trace, dlog)
        acc = zero_grads_like(p)
        for b in range(3):
            _, t1 = forward_from_embeddings(p, cfg, emb[b], mask[b])
            g1, _ = backward(p, t1, dlog[b])
            for k in acc:
                acc[k] += g1[k]
        for k in acc:
            np.testing.assert_allclose(gb[k], acc[k], atol=1e-10, err_msg=k)
