import numpy as np
import pytest

from flowig import attribution, encoder
from flowig.attribution import (
    ALL_PAD_EMBEDDINGS,
    ZERO_EMBEDDINGS,
    ClassAttributionMatrix,
    IGConfig,
    aggregate_to_features,
    baseline_embeddings,
    class_attribution_matrix,
    export_heatmap,
    export_heatmap_csv,
    export_heatmap_svg,
    integrated_gradients,
)
from flowig.encoder import ABSOLUTE, DISENTANGLED, init_params
from flowig.errors import ConfigError, DataError
from flowig.flow_data import CoarseLabel, FeatureSchema

from conftest import make_example, randomize_params, small_config


@pytest.fixture(scope="module")
def trained_like(vocab):
    """Random nonzero weights standing in for a trained model."""
    cfg = small_config(vocab.size, max_seq_len=64, d_model=16, d_ff=24)
    rng = np.random.default_rng(11)
    return cfg, randomize_params(init_params(cfg), rng)


class TestBaseline:
    def test_all_pad_keeps_positions(self, vocab, schema):
        cfg = small_config(vocab.size, ABSOLUTE, max_seq_len=64, d_model=16, d_ff=24)
        p = init_params(cfg)
        ex = make_example(vocab, schema, [100.0] * schema.d)
        base = baseline_embeddings(p, cfg, ex, ALL_PAD_EMBEDDINGS)
        want = p["tok_emb"][vocab.pad_id][None] + p["pos_emb"][:64]
        np.testing.assert_allclose(base, want)

    def test_zero(self, vocab, schema, trained_like):
        cfg, p = trained_like
        ex = make_example(vocab, schema, [100.0] * schema.d)
        assert not baseline_embeddings(p, cfg, ex, ZERO_EMBEDDINGS).any()

    def test_unknown_kind(self, vocab, schema, trained_like):
        cfg, p = trained_like
        ex = make_example(vocab, schema, [100.0] * schema.d)
        with pytest.raises(ConfigError):
            baseline_embeddings(p, cfg, ex, "mean_embedding")


class TestIntegratedGradients:
    def test_linear_model_exact_at_any_steps(self, vocab, schema):
        # zero-layer model without final norm is linear in the embeddings, so
        # midpoint IG is exact at every step count
        cfg = small_config(
            vocab.size, max_seq_len=64, d_model=16, d_ff=24,
            layers=0, use_final_norm=False,
        )
        rng = np.random.default_rng(0)
        p = randomize_params(init_params(cfg), rng)
        ex = make_example(vocab, schema, [float(100 + 7 * i) for i in range(schema.d)])
        for steps in (1, 4, 64):
            res = integrated_gradients(
                p, cfg, ex, CoarseLabel.DDOS, IGConfig(steps=steps)
            )
            assert abs(res.completeness_gap) <= 1e-10
            assert not res.tolerance_exceeded

    def test_identical_input_and_baseline(self, vocab, schema, trained_like):
        cfg, p = trained_like
        ex = make_example(vocab, schema, [100.0] * schema.d)
        emb = encoder.embed(p, cfg, ex)
        base = baseline_embeddings(p, cfg, ex, ALL_PAD_EMBEDDINGS)
        delta = emb - base
        # force input == baseline by zeroing the token table difference
        p2 = dict(p)
        p2["tok_emb"] = np.tile(p["tok_emb"][0], (cfg.vocab_size, 1))
        res = integrated_gradients(p2, cfg, ex, CoarseLabel.BENIGN, IGConfig(steps=4))
        assert res.output_delta == 0.0
        np.testing.assert_allclose(res.token_attr, 0.0, atol=1e-12)
        assert res.relative_gap == 0.0
        assert delta.any()  # the original model does move

    def test_partition_identity(self, vocab, schema, trained_like):
        cfg, p = trained_like
        ex = make_example(vocab, schema, [float(100 + i) for i in range(schema.d)])
        res = integrated_gradients(p, cfg, ex, CoarseLabel.WEB_ATTACK, IGConfig(steps=16))
        lhs = res.feature_attr.sum() + res.structural_residue
        assert abs(lhs - res.token_attr.sum()) <= 1e-10

    def test_gap_shrinks_with_steps(self, vocab, schema, trained_like):
        cfg, p = trained_like
        ex = make_example(vocab, schema, [float(100 + i) for i in range(schema.d)])
        gaps = []
        for steps in (4, 16, 64):
            res = integrated_gradients(p, cfg, ex, CoarseLabel.DDOS, IGConfig(steps=steps))
            gaps.append(abs(res.completeness_gap))
        assert gaps[2] <= gaps[0]

    def test_target_independence(self, vocab, schema, trained_like):
        # zeroing the head columns of the other classes must not change the
        # attribution toward the target class
        cfg, p = trained_like
        ex = make_example(vocab, schema, [float(100 + i) for i in range(schema.d)])
        p2 = {k: v.copy() for k, v in p.items()}
        p2["head.w"][:, 1:] = 0.0
        p2["head.b"][1:] = 0.0
        a = integrated_gradients(p, cfg, ex, CoarseLabel.BENIGN, IGConfig(steps=8))
        b = integrated_gradients(p2, cfg, ex, CoarseLabel.BENIGN, IGConfig(steps=8))
        np.testing.assert_allclose(a.token_attr, b.token_attr, atol=1e-12)

    @pytest.mark.parametrize("variant", [ABSOLUTE, DISENTANGLED])
    def test_both_variants_run(self, vocab, schema, variant):
        cfg = small_config(vocab.size, variant, max_seq_len=64, d_model=16, d_ff=24)
        p = randomize_params(init_params(cfg), np.random.default_rng(3))
        ex = make_example(vocab, schema, [float(100 + i) for i in range(schema.d)])
        res = integrated_gradients(p, cfg, ex, CoarseLabel.DDOS, IGConfig(steps=32))
        assert res.relative_gap < 0.05


class TestAggregate:
    def test_one_hot_spans(self):
        token_attr = np.array([0.5, 1.0, 2.0, 3.0, -1.0, 0.25])
        spans = ((0, 1, 3), (1, 3, 5))
        feat, residue = aggregate_to_features(token_attr, spans)
        np.testing.assert_allclose(feat, [3.0, 2.0])
        assert residue == pytest.approx(0.75)

    def test_overlap_rejected(self):
        with pytest.raises(DataError, match="overlap"):
            aggregate_to_features(np.zeros(6), ((0, 1, 3), (1, 2, 5)))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            aggregate_to_features(np.zeros(6), ())


@pytest.fixture(scope="module")
def examples(vocab, schema):
    rng = np.random.default_rng(5)
    out = []
    for label in [CoarseLabel.BENIGN, CoarseLabel.DDOS, CoarseLabel.WEB_ATTACK] * 2:
        values = [float(rng.integers(100, 1000)) for _ in range(schema.d)]
        out.append(make_example(vocab, schema, values, label=label))
    return out


class TestClassMatrix:
    def test_shape_and_order(self, vocab, schema, trained_like, examples):
        cfg, p = trained_like
        m, results = class_attribution_matrix(
            p, cfg, examples, schema, IGConfig(steps=8), top_k=5
        )
        assert m.values.shape == (3, 5)
        assert len(m.feature_names) == 5
        assert set(m.feature_names) <= set(schema.names)
        assert m.sample_counts == (2, 2, 2)
        assert len(results) == len(examples)
        assert (m.values >= 0).all()

    def test_top_k_full_width(self, vocab, schema, trained_like, examples):
        cfg, p = trained_like
        m, _ = class_attribution_matrix(
            p, cfg, examples, schema, IGConfig(steps=4), top_k=schema.d + 10
        )
        assert len(m.feature_names) == schema.d
        assert sorted(m.feature_names) == sorted(schema.names)

    def test_missing_class_rejected(self, vocab, schema, trained_like, examples):
        cfg, p = trained_like
        only_benign = [e for e in examples if e.label is CoarseLabel.BENIGN]
        with pytest.raises(DataError, match="DDOS"):
            class_attribution_matrix(p, cfg, only_benign, schema, IGConfig(steps=2))

    def test_duplicate_example_mean_invariance(self, vocab, schema, trained_like, examples):
        cfg, p = trained_like
        m1, _ = class_attribution_matrix(
            p, cfg, examples, schema, IGConfig(steps=4), top_k=4
        )
        m2, _ = class_attribution_matrix(
            p, cfg, examples + examples, schema, IGConfig(steps=4), top_k=4
        )
        assert m1.feature_names == m2.feature_names
        np.testing.assert_allclose(m1.values, m2.values, atol=1e-12)


@pytest.fixture(scope="module")
def matrix():
    return ClassAttributionMatrix(
        feature_names=("Flow Duration", "Flow IAT Min"),
        values=np.array([[1.5, 0.25], [0.75, 2.0], [0.0, 1.0]]),
        sample_counts=(3, 3, 3),
    )


class TestExport:
    def test_csv_layout(self, matrix):
        data = export_heatmap_csv(matrix)
        lines = data.decode("utf-8").strip().split("\r\n")
        assert len(lines) == 4
        assert lines[0] == "class,Flow Duration,Flow IAT Min"
        assert lines[1] == "BENIGN,1.5,0.25"
        assert lines[3].startswith("WEB_ATTACK,")

    def test_svg_deterministic(self, matrix):
        a = export_heatmap_svg(matrix)
        assert a == export_heatmap_svg(matrix)
        assert a.startswith(b"<svg ")
        assert b"Flow Duration" in a
        assert b"BENIGN" in a and b"DDOS" in a and b"WEB_ATTACK" in a

    def test_dispatch(self, matrix):
        assert export_heatmap(matrix, "csv") == export_heatmap_csv(matrix)
        assert export_heatmap(matrix, "svg") == export_heatmap_svg(matrix)
        with pytest.raises(ConfigError, match="png"):
            export_heatmap(matrix, "png")
