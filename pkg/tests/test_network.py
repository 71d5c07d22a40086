import math

import numpy as np
import pytest

from g2gnet.errors import ConfigurationError, TrainingDiverged
from g2gnet.network import (
    G2GModel,
    ModelConfig,
    PatchEmbedder,
    build_baseline,
    build_g2gnet,
    build_model,
    fc_v1_width,
    matched_budget,
)
from g2gnet.tensor_core import softmax_cross_entropy
from g2gnet.topology import expected_density, partition_index, partition_interleaved

from conftest import small_config
from test_tensor_core import central_diff, rel_err


class TestEmbedder:
    def test_cifar_geometry(self):
        e = PatchEmbedder((3, 32, 32), (4, 4), 32, gen=np.random.default_rng(0))
        assert e.kernel == (8, 4) and e.stride == 4 and e.positions == 2
        assert e.features_per_patch == 64 and e.out_features == 1024

    def test_fashion_geometry(self):
        e = PatchEmbedder((1, 28, 28), (4, 4), 32)
        assert e.kernel == (7, 4) and e.stride == 3 and e.out_features == 1024

    def test_indivisible(self):
        with pytest.raises(ConfigurationError):
            PatchEmbedder((3, 30, 32), (4, 4), 32)

    def test_zero_image_gives_bias_pattern(self):
        e = PatchEmbedder((3, 32, 32), (4, 4), 32, gen=np.random.default_rng(0))
        e.bias = np.arange(32, dtype=np.float32)
        out = e.embed(np.zeros((3, 32, 32), np.float32))
        np.testing.assert_array_equal(out, np.tile(e.bias, 32))

    def test_matches_direct_convolution(self):
        gen = np.random.default_rng(1)
        e = PatchEmbedder((1, 28, 28), (4, 4), 3, gen=gen)
        img = gen.standard_normal((1, 28, 28)).astype(np.float32)
        out = e.embed(img).reshape(16, 2, 3)
        kh, kw = e.kernel
        w = e.weight.reshape(1, kh, kw, 3)
        for pr in range(4):
            for pc in range(4):
                for q in range(2):
                    r0, c0 = pr * 7, pc * 7 + q * 3
                    window = img[:, r0 : r0 + kh, c0 : c0 + kw]
                    ref = np.einsum("cij,cijo->o", window, w) + e.bias
                    np.testing.assert_allclose(out[pr * 4 + pc, q], ref, rtol=1e-5, atol=1e-5)

    def test_patch_permutation(self):
        gen = np.random.default_rng(2)
        e = PatchEmbedder((3, 32, 32), (4, 4), 32, gen=gen)
        img = gen.standard_normal((3, 32, 32)).astype(np.float32)
        swapped = img.copy()
        # swap patch 1 (row 0, col 1) with patch 6 (row 1, col 2)
        swapped[:, 0:8, 8:16], swapped[:, 8:16, 16:24] = img[:, 8:16, 16:24], img[:, 0:8, 8:16]
        a = e.embed(img).reshape(16, 64)
        b = e.embed(swapped).reshape(16, 64)
        np.testing.assert_array_equal(b[1], a[6])
        np.testing.assert_array_equal(b[6], a[1])
        keep = [i for i in range(16) if i not in (1, 6)]
        np.testing.assert_array_equal(a[keep], b[keep])

    def test_gradients(self):
        gen = np.random.default_rng(3)
        e = PatchEmbedder((2, 8, 12), (2, 2), 3, gen=gen)
        e.weight = e.weight.astype(np.float64)
        e.bias = gen.standard_normal(3)
        imgs = gen.standard_normal((2, 2, 8, 12))
        r = gen.standard_normal((2, e.out_features))

        def loss():
            return float(np.sum(e.forward(imgs)[0] * r))

        _, cols = e.forward(imgs)
        gw, gb, gin = e.backward(cols, r, need_input_grad=True)
        assert np.all(rel_err(gw, central_diff(loss, e.weight)) <= 1e-3)
        assert np.all(rel_err(gb, central_diff(loss, e.bias)) <= 1e-3)
        assert np.all(rel_err(gin, central_diff(loss, imgs)) <= 1e-3)


class TestBuild:
    def test_default_counts(self):
        m = build_g2gnet(ModelConfig())
        assert m.widths == [1024, 1024, 1024, 1024]
        assert matched_budget(ModelConfig()) == pytest.approx(806092.8)
        assert abs(m.masked_param_count() - 806092.8) <= 3 * 592
        assert m.masked_param_count() == sum(s["active_count"] for s in m.layer_stats())
        assert m.classifier.mask is None

    def test_mixer_schedule(self):
        m = build_g2gnet(small_config(grouping="mixer"))
        provs = [l.mask.provenance for l in m.hidden]
        assert [p["src"]["strategy"] for p in provs] == ["mixer"] * 3
        np.testing.assert_array_equal(provs[0]["src"]["assignment"], partition_index(64, 4).assignment)
        np.testing.assert_array_equal(provs[1]["src"]["assignment"], partition_interleaved(64, 4).assignment)
        np.testing.assert_array_equal(provs[1]["dst"]["assignment"], partition_interleaved(64, 4).assignment)
        np.testing.assert_array_equal(provs[2]["src"]["assignment"], partition_index(64, 4).assignment)

    def test_h1_groups_see_two_patches(self):
        m = build_g2gnet(ModelConfig(p_prime=0.0))
        bits = m.hidden[0].mask.bits
        dst = m.hidden[0].mask.dest_groups()
        for k in range(8):
            rows = np.flatnonzero(bits[:, dst.members(k)].any(axis=1))
            patches = np.unique(rows // 64)
            assert list(patches) == [2 * k, 2 * k + 1]
            assert bits[np.ix_(np.arange(128 * k, 128 * k + 128), dst.members(k))].all()

    def test_random_grouping_differs_per_side(self):
        m = build_g2gnet(small_config(grouping="random"))
        prov = m.hidden[0].mask.provenance
        assert prov["src"]["strategy"] == "random"
        assert prov["src"]["assignment"] != prov["dst"]["assignment"]

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            build_g2gnet(small_config(grouping="diagonal"))
        with pytest.raises(ConfigurationError):
            build_g2gnet(small_config(p=0.1, p_prime=0.2))
        with pytest.raises(ConfigurationError):
            build_baseline("mlp", small_config())

    def test_fc_v2(self):
        m = build_baseline("fc_v2", ModelConfig())
        assert m.masked_param_count() == 3 * 1024**2 == 3145728

    def test_fc_v1_width(self):
        # 1024 w + 2 w^2 = 806400 -> w = 428.6
        assert fc_v1_width(806400, 1024, 3) == 429
        m = build_baseline("fc_v1", ModelConfig(fc_v1_budget=806400))
        assert m.widths == [1024, 429, 429, 429]
        assert m.masked_param_count() == 1024 * 429 + 2 * 429**2
        g2g = build_g2gnet(ModelConfig())
        assert abs(m.masked_param_count() - g2g.masked_param_count()) / g2g.masked_param_count() < 0.01

    def test_er_matches_budget(self):
        er = build_baseline("er", ModelConfig())
        exp = expected_density(1, 0.15, 8) * 3 * 1024**2
        sigma = math.sqrt(3 * 1024**2 * 0.25625 * 0.74375)
        assert abs(er.masked_param_count() - exp) <= 3 * sigma
        assert [l.mask.provenance["kind"] for l in er.hidden] == ["er"] * 3

    def test_build_model_dispatch(self):
        assert build_model(small_config(kind="er")).kind == "er"
        assert build_model(small_config(kind="g2g")).kind == "g2g"


class TestForward:
    def test_rows_independent(self):
        m = build_g2gnet(small_config())
        x = np.random.default_rng(0).standard_normal((1, 3, 16, 16)).astype(np.float32)
        one, _ = m.forward(x)
        two, _ = m.forward(np.concatenate([x, x]))
        np.testing.assert_allclose(two[0], one[0], rtol=1e-6)
        np.testing.assert_array_equal(two[0], two[1])

    def test_zero_masks_give_constant_logits(self):
        m = build_g2gnet(small_config())
        for l in m.hidden:
            l.mask.bits[:] = False
            l.bias[:] = np.random.default_rng(1).standard_normal(l.bias.shape)
        x = np.random.default_rng(2).standard_normal((5, 3, 16, 16)).astype(np.float32)
        logits, _ = m.forward(x)
        assert np.all(logits == logits[0])

    def test_snapshots(self):
        m = build_g2gnet(small_config())
        x = np.random.default_rng(3).standard_normal((6, 3, 16, 16)).astype(np.float32)
        logits, snaps = m.forward(x)
        assert logits.shape == (6, 4)
        assert [s.shape for s in snaps] == [(6, 64)] + [(6, 64)] * 3
        assert all((s >= 0).all() for s in snaps[1:])

    def test_dense_limit_bitwise(self):
        cfg = small_config(p=1.0, p_prime=1.0)
        g = build_g2gnet(cfg)
        fc = build_baseline("fc_v2", cfg)
        x = np.random.default_rng(4).standard_normal((8, 3, 16, 16)).astype(np.float32)
        assert np.array_equal(g.forward(x)[0], fc.forward(x)[0])

    def test_patch_locality(self):
        # index grouping, p' = 0: changing pixels of patches 0 and 1 moves
        # only group-0 units of the first hidden layer
        m = build_g2gnet(ModelConfig(grouping="index", p_prime=0.0))
        gen = np.random.default_rng(5)
        x = gen.standard_normal((2, 3, 32, 32)).astype(np.float32)
        y = x.copy()
        y[:, :, 0:8, 0:16] = gen.standard_normal((2, 3, 8, 16))
        e1, _ = m.embedder.forward(x)
        e2, _ = m.embedder.forward(y)
        d = m.hidden[0].forward(e1) != m.hidden[0].forward(e2)
        group0 = m.hidden[0].mask.dest_groups().assignment == 0
        assert d[:, group0].any() and not d[:, ~group0].any()
        outside = x.copy()
        outside[:, :, 8:, :] = 0
        outside[:, :, :, 16:] = 0
        e3, _ = m.embedder.forward(outside)
        z1, z3 = m.hidden[0].forward(e1), m.hidden[0].forward(e3)
        np.testing.assert_array_equal(z1[:, group0], z3[:, group0])


def _float64(model):
    for l in model.hidden + [model.classifier]:
        l.weight = l.weight.astype(np.float64)
        l.bias = l.bias.astype(np.float64)
    model.embedder.weight = model.embedder.weight.astype(np.float64)
    model.embedder.bias = model.embedder.bias.astype(np.float64)
    return model


class TestTraining:
    def test_backward_matches_finite_differences(self):
        cfg = small_config(hidden_width=16, conv_channels=1, image_shape=(1, 8, 8), patch_grid=(2, 2), groups=2)
        m = _float64(build_g2gnet(cfg))
        gen = np.random.default_rng(6)
        for l in m.hidden:
            l.bias[:] = gen.uniform(0.1, 0.3, l.bias.shape)
        x = gen.standard_normal((4, 1, 8, 8))
        y = np.array([0, 1, 2, 3])

        def loss():
            return softmax_cross_entropy(m.forward(x)[0], y)[0]

        m.forward(x, keep_cache=True)
        grads = m.backward(softmax_cross_entropy(m.forward(x, keep_cache=True)[0], y)[1])
        for i, layer in enumerate(m.hidden):
            num = central_diff(loss, layer.weight)
            active = layer.mask.bits
            assert np.all(rel_err(grads[i][0][active], num[active]) <= 1e-3)
            assert np.all(grads[i][0][~active] == 0)
        assert np.all(rel_err(grads["embedder"][0], central_diff(loss, m.embedder.weight)) <= 1e-3)
        assert np.all(rel_err(grads["classifier"][0], central_diff(loss, m.classifier.weight)) <= 1e-3)

    def test_initial_loss_near_uniform(self):
        m = build_g2gnet(ModelConfig())
        gen = np.random.default_rng(7)
        x = gen.standard_normal((64, 3, 32, 32)).astype(np.float32)
        loss, _, _ = m.train_step(x, gen.integers(0, 10, 64))
        assert abs(loss - math.log(10)) <= 0.5

    def test_deterministic_steps(self):
        gen = np.random.default_rng(8)
        x = gen.standard_normal((16, 3, 16, 16)).astype(np.float32)
        y = gen.integers(0, 4, 16)
        a, b = build_g2gnet(small_config()), build_g2gnet(small_config())
        for _ in range(3):
            a.train_step(x, y)
            b.train_step(x, y)
        for la, lb in zip(a.hidden, b.hidden):
            assert np.array_equal(la.weight, lb.weight)

    def test_mask_zero_law_and_gradient_flow(self):
        m = build_g2gnet(small_config())
        gen = np.random.default_rng(9)
        before = [l.weight.copy() for l in m.hidden]
        for _ in range(5):
            m.train_step(gen.standard_normal((16, 3, 16, 16)).astype(np.float32), gen.integers(0, 4, 16))
        for l, w0 in zip(m.hidden, before):
            off = ~l.mask.bits
            assert not l.weight[off].any()
            assert not l.adam_w.first_moment[off].any() and not l.adam_w.second_moment[off].any()
            moved = l.weight != w0
            # active weights whose Adam moment is nonzero have been updated
            touched = l.mask.bits & (l.adam_w.second_moment > 0)
            assert moved[touched].mean() > 0.99
            assert touched.sum() > 0.5 * l.mask.bits.sum()

    def test_divergence_detected(self):
        m = build_g2gnet(small_config())
        m.classifier.weight[:] = np.nan
        x = np.ones((2, 3, 16, 16), np.float32)
        with pytest.raises(TrainingDiverged):
            m.train_step(x, np.array([0, 1]), iteration=7)

    def test_memorizes_small_random_subset(self):
        # no dataset available offline: 512 random CIFAR-shaped images with
        # random labels; any working optimizer overfits past 30 %
        gen = np.random.default_rng(10)
        x = gen.standard_normal((512, 3, 32, 32)).astype(np.float32)
        y = gen.integers(0, 10, 512)
        m = build_g2gnet(ModelConfig())
        for step in range(200):
            idx = gen.choice(512, 64, replace=False)
            m.train_step(x[idx], y[idx])
        assert m.evaluate(x, y) > 0.30


class TestCheckpoint:
    def test_round_trip_then_resume_bitwise(self, tmp_path):
        gen = np.random.default_rng(11)
        x = gen.standard_normal((16, 3, 16, 16)).astype(np.float32)
        y = gen.integers(0, 4, 16)
        a = build_g2gnet(small_config())
        a.train_step(x, y)
        a.save(tmp_path / "m.npz")
        b, meta = G2GModel.load(tmp_path / "m.npz")
        assert meta["model_config"]["hidden_width"] == 64
        for _ in range(2):
            a.train_step(x, y)
            b.train_step(x, y)
        assert np.array_equal(a.forward(x)[0], b.forward(x)[0])
        for la, lb in zip(a.hidden, b.hidden):
            assert np.array_equal(la.mask.bits, lb.mask.bits)
            assert la.adam_w.step_count == lb.adam_w.step_count == 3

    def test_describe(self):
        d = build_g2gnet(ModelConfig()).describe()
        assert d["embedder"]["out_features"] == 1024
        assert len(d["hidden_layers"]) == 3
        assert d["hidden_layers"][1]["grouping"] == {"src": "mixer", "dst": "mixer"}
        assert d["parameters"]["masked_weights"] == sum(l["active"] for l in d["hidden_layers"])
