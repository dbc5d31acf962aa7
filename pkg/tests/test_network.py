import numpy as np
import pytest

from emgdisent.autodiff import DimensionError, Tensor, softmax_cross_entropy
from emgdisent.network import (
    UnsupportedVariantError,
    build_model,
    export_features,
    forward,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def batch2():
    return np.random.default_rng(0).standard_normal((2, 408, 8)).astype(np.float32)


class TestForward:
    def test_full_shape_chain(self, batch2):
        m = build_model("proposed", 6, 30, seed=0)
        out = forward(m, batch2, "train", (0.1, 1.0), rng=np.random.default_rng(0))
        s = out.shapes
        assert s["input"] == (2, 408, 8)
        assert s["extractor"] == (2, 204, 32)
        assert s["encoder_p"] == s["encoder_s"] == (2, 51, 128)
        assert m.flat_features == 6528
        assert out.z_p.shape == out.z_s.shape == (2, 256)
        assert out.y_p.shape == (2, 6) and out.y_s.shape == (2, 30)
        assert out.y_adv_s.shape == (2, 30) and out.y_adv_p.shape == (2, 6)
        for y in (out.y_p, out.y_s, out.y_adv_s, out.y_adv_p):
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)

    def test_intermediate_encoder_shape(self, batch2):
        m = build_model("erm", 6, 30, seed=0)
        z = m.extractor(Tensor(batch2), "eval")
        h = m.encoder_p.blocks[0](z, "eval")
        assert h.shape == (2, 102, 64)
        assert m.encoder_p.blocks[1](h, "eval").shape == (2, 51, 128)

    def test_zero_lambda_adversarial_outputs(self, batch2):
        m = build_model("proposed", 6, 30, seed=0)
        out = forward(m, batch2, "eval", (0.0, 0.0))
        np.testing.assert_array_equal(out.logits_adv_s.data, m.classifier_s(out.z_p).data)
        np.testing.assert_array_equal(out.logits_adv_p.data, m.classifier_p(out.z_s).data)

    def test_erm_has_only_pattern_output(self, batch2):
        out = forward(build_model("erm", 6, 30), batch2, "eval")
        assert out.y_p is not None
        assert out.y_s is None and out.y_adv_s is None and out.y_adv_p is None

    def test_ponly_and_mtl_paths(self, batch2):
        out = forward(build_model("ponly", 6, 30), batch2, "eval", (0.1, 1.0))
        assert out.y_adv_s.shape == (2, 30) and out.y_s is None and out.z_s is None
        out = forward(build_model("mtl", 6, 30), batch2, "eval")
        assert out.y_s.shape == (2, 30) and out.y_adv_s is None and out.y_adv_p is None

    def test_unsupported_path(self, batch2):
        with pytest.raises(UnsupportedVariantError):
            forward(build_model("erm", 6, 30), batch2, "eval", paths={"s"})

    def test_wrong_input_shape(self):
        with pytest.raises(DimensionError):
            forward(build_model("erm", 6, 30), np.zeros((2, 400, 8), np.float32), "eval")

    def test_eval_is_pure(self, batch2):
        m = build_model("proposed", 6, 30, seed=3)
        a = forward(m, batch2, "eval")
        b = forward(m, batch2, "eval")
        assert a.logits_p.data.tobytes() == b.logits_p.data.tobytes()
        assert a.logits_s.data.tobytes() == b.logits_s.data.tobytes()

    def test_mirror_symmetry(self):
        m = build_model("proposed", 6, 30)
        p = m.parameters("encoder_p", "bottleneck_p")
        s = m.parameters("encoder_s", "bottleneck_s")
        assert [t.shape for t in p.values()] == [t.shape for t in s.values()]
        assert m.classifier_p.weight.shape == (6, 256) and m.classifier_s.weight.shape == (30, 256)

    def test_classifier_shared_between_paths(self, batch2):
        # the adversarial subject head must be the same parameters as C_s
        m = build_model("proposed", 6, 30, seed=0)
        out = forward(m, batch2, "train", (0.5, 1.0), rng=np.random.default_rng(0), paths={"adv_s"})
        y = np.eye(30, dtype=np.float32)[[0, 1]]
        softmax_cross_entropy(out.logits_adv_s, y)[0].backward()
        assert m.classifier_s.weight.grad is not None
        assert m.classifier_p.weight.grad is None


class TestBuildModel:
    def test_deterministic(self):
        a = build_model("proposed", 6, 30, seed=7).parameters()
        b = build_model("proposed", 6, 30, seed=7).parameters()
        assert list(a) == list(b)
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()

    def test_seed_changes_params(self):
        a = build_model("erm", 6, 30, seed=1).extractor.weight.data
        b = build_model("erm", 6, 30, seed=2).extractor.weight.data
        assert not np.array_equal(a, b)

    def test_erm_smaller(self):
        assert build_model("erm", 6, 30).parameter_count() < build_model("proposed", 6, 30).parameter_count()

    def test_shared_components_identical_across_variants(self):
        p = build_model("proposed", 6, 30, seed=4).parameters()
        for variant in ("erm", "mtl", "ponly"):
            q = build_model(variant, 6, 30, seed=4).parameters()
            for k, t in q.items():
                assert t.data.tobytes() == p[k].data.tobytes(), (variant, k)

    def test_init_conventions(self):
        m = build_model("proposed", 6, 30, seed=0)
        w = m.extractor.weight.data
        assert np.abs(w).max() <= np.sqrt(6 / (8 * 5))
        assert np.all(m.extractor.bias.data == 0)
        assert np.all(m.bottleneck_p.gamma.data == 1) and np.all(m.bottleneck_p.beta.data == 0)
        assert w.dtype == np.float32

    def test_counts_validated(self):
        with pytest.raises(ValueError):
            build_model("proposed", 1, 30)


class TestExportFeatures:
    def test_shapes(self):
        x = np.random.default_rng(1).standard_normal((5, 408, 8)).astype(np.float32)
        m = build_model("proposed", 6, 30)
        assert export_features(m, x, "pattern").shape == (5, 256)
        assert export_features(m, x, "subject").shape == (5, 256)
        assert export_features(m, x[:3], "original").shape == (3, 6528)

    def test_deterministic(self):
        x = np.random.default_rng(2).standard_normal((4, 408, 8)).astype(np.float32)
        m = build_model("proposed", 6, 30)
        np.testing.assert_array_equal(export_features(m, x, "pattern"), export_features(m, x, "pattern"))

    def test_chunking_agrees(self):
        x = np.random.default_rng(3).standard_normal((7, 408, 8)).astype(np.float32)
        m = build_model("erm", 6, 30)
        # BLAS blocking differs with batch size, so only rounding-level agreement
        np.testing.assert_allclose(export_features(m, x, "pattern", chunk=3), export_features(m, x, "pattern"),
                                   rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("variant", ["erm", "ponly"])
    def test_subject_features_unsupported(self, variant):
        with pytest.raises(UnsupportedVariantError):
            export_features(build_model(variant, 6, 30), np.zeros((1, 408, 8), np.float32), "subject")


class TestCheckpoint:
    def test_roundtrip_and_byte_stability(self, tmp_path, batch2):
        m = build_model("proposed", 6, 30, seed=5)
        forward(m, batch2, "train", rng=np.random.default_rng(0))  # move BN running stats
        p1 = save_checkpoint(m, tmp_path / "a.ckpt", {"fold": 1})
        p2 = save_checkpoint(m, tmp_path / "b.ckpt", {"fold": 1})
        assert p1.read_bytes() == p2.read_bytes()
        loaded, meta = load_checkpoint(p1)
        assert meta == {"fold": 1}
        assert loaded.variant == m.variant and loaded.seed == 5
        for k, t in m.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[k].data, t.data)
        for k, s in m.bn_states().items():
            np.testing.assert_array_equal(loaded.bn_states()[k].mean, s.mean)
            np.testing.assert_array_equal(loaded.bn_states()[k].var, s.var)
        np.testing.assert_array_equal(forward(loaded, batch2, "eval").logits_p.data,
                                      forward(m, batch2, "eval").logits_p.data)

    def test_rejects_garbage(self, tmp_path):
        from emgdisent.network import CheckpointError

        bad = tmp_path / "x.ckpt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
