import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rotdetr import tensor as T
from rotdetr.encoder import (AttentionLayer, DSConvLayer, Encoder, EncoderConfig, PyramidNeck, Stem,
                             asymptotic_cost, attention_encoder_layer, count_ops, dsconv_encoder_layer,
                             flatten_pyramid, fuse_adjacent_levels, sine_position_encoding, token_locations,
                             unflatten_tokens)
from rotdetr.errors import ConfigurationError
from rotdetr.pyramid import FeaturePyramid


def random_pyramid(rng, C=4, shapes=((8, 8), (4, 4), (2, 2)), ratios=(4, 8, 16)):
    return FeaturePyramid([T.Tensor(rng.normal(size=(H, W, C))) for H, W in shapes], list(ratios))


def layer_norm_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


class TestPyramid:
    def test_stem_and_neck_shapes(self):
        rng = np.random.default_rng(0)
        stem = Stem(rng, 8, 16)
        neck = PyramidNeck(rng, [8, 16, 32], 8, stem.out_channels, 16)
        pyr = neck(stem(rng.uniform(size=(64, 64, 3))))
        assert pyr.shapes == [(8, 8, 16), (4, 4, 16), (2, 2, 16)]
        assert pyr.ratios == [8, 16, 32]
        assert pyr.image_size == 64

    def test_rejects_bad_ratio_order(self):
        with pytest.raises(ValueError):
            FeaturePyramid([T.Tensor(np.zeros((2, 2, 1))), T.Tensor(np.zeros((4, 4, 1)))], [16, 8])

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError):
            FeaturePyramid([T.Tensor(np.zeros((4, 4, 2))), T.Tensor(np.zeros((2, 2, 1)))], [8, 16])

    def test_flatten_roundtrip(self):
        pyr = random_pyramid(np.random.default_rng(1))
        back = unflatten_tokens(flatten_pyramid(pyr), pyr)
        for a, b in zip(pyr.levels, back.levels):
            assert np.array_equal(a.data, b.data)

    def test_token_locations_in_unit_square(self):
        locs = token_locations([(4, 4, 1), (2, 2, 1)])
        assert locs.shape == (20, 2)
        assert locs.min() > 0 and locs.max() < 1

    def test_position_encoding(self):
        pe = sine_position_encoding(3, 5, 8)
        assert pe.shape == (15, 8)
        assert np.abs(pe).max() <= 1.0
        assert len({tuple(r) for r in pe.round(12)}) == 15
        with pytest.raises(ConfigurationError):
            sine_position_encoding(2, 2, 6)


class TestDSConvLayer:
    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(2)
        pyr = random_pyramid(rng)
        layer = DSConvLayer(rng, 4, 3)
        layer.norm.gamma.data = rng.normal(size=4)
        layer.norm.beta.data = rng.normal(size=4)
        out = dsconv_encoder_layer(pyr, layer)
        for x, y in zip(pyr.levels, out.levels):
            d = T.dsconv(x.data, layer.w_depth.data, layer.w_point.data, 1, 1).data + layer.b_point.data
            ref = layer_norm_np(x.data + d, layer.norm.gamma.data, layer.norm.beta.data)
            np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)

    def test_weights_shared_across_levels(self):
        rng = np.random.default_rng(3)
        layer = DSConvLayer(rng, 4, 3)
        x = rng.normal(size=(4, 4, 4))
        alone = dsconv_encoder_layer(FeaturePyramid([T.Tensor(x)], [8]), layer).levels[0].data
        pair = FeaturePyramid([T.Tensor(rng.normal(size=(6, 6, 4))), T.Tensor(x)], [4, 8])
        assert np.array_equal(dsconv_encoder_layer(pair, layer).levels[1].data, alone)

    def test_extent_preserved(self):
        rng = np.random.default_rng(4)
        out = dsconv_encoder_layer(random_pyramid(rng), DSConvLayer(rng, 4, 5))
        assert out.shapes == [(8, 8, 4), (4, 4, 4), (2, 2, 4)]


class TestFusion:
    def test_eval_mode_adds_resized_neighbours(self):
        rng = np.random.default_rng(5)
        pyr = random_pyramid(rng)
        out = fuse_adjacent_levels(pyr, 0.5, "eval")
        L = pyr.levels
        mid = L[1].data + T.bilinear_resize(L[0], 4, 4).data + T.bilinear_resize(L[2], 4, 4).data
        np.testing.assert_allclose(out.levels[1].data, mid, rtol=1e-12)
        np.testing.assert_allclose(out.levels[0].data, L[0].data + T.bilinear_resize(L[1], 8, 8).data, rtol=1e-12)

    def test_single_level_untouched(self):
        x = T.Tensor(np.ones((3, 3, 4)))
        assert fuse_adjacent_levels(FeaturePyramid([x], [8]), 0.1, "train").levels[0] is x

    def test_train_mode_reproducible_on_fresh_tape(self):
        rng = np.random.default_rng(6)
        pyr = random_pyramid(rng)
        outs = []
        for _ in range(2):
            with T.Tape(seed=9):
                outs.append(fuse_adjacent_levels(pyr, 0.5, "train").levels[1].data)
        assert np.array_equal(outs[0], outs[1])


class TestAttentionLayer:
    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(7)
        pyr = random_pyramid(rng, shapes=((3, 3), (2, 2)), ratios=(8, 16))
        layer = AttentionLayer(rng, 4)
        embed = T.Tensor(rng.normal(size=2))
        out = attention_encoder_layer(pyr, layer, embed)
        x = np.concatenate([l.data.reshape(-1, 4) for l in pyr.levels])
        pos = np.concatenate([sine_position_encoding(3, 3, 4), sine_position_encoding(2, 2, 4)])
        lvl = np.concatenate([np.full(9, embed.data[0]), np.full(4, embed.data[1])])[:, None]
        qk = x + pos + lvl
        q = qk @ layer.w_q.data + layer.b_q.data
        k = qk @ layer.w_k.data + layer.b_k.data
        v = x @ layer.w_v.data + layer.b_v.data
        s = q @ k.T / 2.0
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        ref = layer_norm_np(x + a @ v, layer.norm.gamma.data, layer.norm.beta.data)
        got = np.concatenate([l.data.reshape(-1, 4) for l in out.levels])
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)

    def test_token_cap(self):
        rng = np.random.default_rng(8)
        pyr = random_pyramid(rng)
        with pytest.raises(ConfigurationError):
            attention_encoder_layer(pyr, AttentionLayer(rng, 4), T.Tensor(np.zeros(3)), max_tokens=50)


class TestEncoder:
    @pytest.mark.parametrize("kind", ["dsconv", "attention"])
    def test_shapes_preserved(self, kind):
        rng = np.random.default_rng(9)
        pyr = random_pyramid(rng, C=8, shapes=((4, 4), (2, 2)), ratios=(8, 16))
        enc = Encoder(rng, EncoderConfig(kind=kind, num_layers=2, channels=8), 2)
        assert enc(pyr).shapes == pyr.shapes

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(kind="conv").validate()
        with pytest.raises(ConfigurationError):
            EncoderConfig(kernel=4).validate()

    @pytest.mark.parametrize("C,K,layers", [(8, 3, 1), (32, 3, 6), (256, 3, 6), (64, 5, 2)])
    def test_dsconv_has_fewer_parameters(self, C, K, layers):
        rng = np.random.default_rng(0)
        ds = Encoder(rng, EncoderConfig(kind="dsconv", num_layers=layers, channels=C, kernel=K), 4)
        at = Encoder(rng, EncoderConfig(kind="attention", num_layers=layers, channels=C, kernel=K), 4)
        assert ds.num_parameters() < at.num_parameters()


class TestCostModel:
    def test_exact_counts_small_case(self):
        ds = count_ops("dsconv", 4, 5, 8, 3)
        at = count_ops("attention", 4, 5, 8, 3)
        assert ds.multiply_adds == 20 * 9 * 8 + 20 * 64
        assert at.multiply_adds == 3 * 20 * 64 + 2 * 400 * 8
        assert ds.parameters == 9 * 8 + 64 + 8 + 16

    def test_counts_match_built_layers(self):
        rng = np.random.default_rng(1)
        C, K = 12, 3
        assert count_ops("dsconv", 2, 2, C, K).parameters == DSConvLayer(rng, C, K).num_parameters()
        assert count_ops("attention", 2, 2, C, K).parameters == AttentionLayer(rng, C).num_parameters()

    @settings(max_examples=200)
    @given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 512), st.sampled_from([1, 3, 5, 7]))
    def test_dsconv_cheaper_beyond_kernel_area(self, H, W, C, K):
        if H * W <= K * K + 1:
            return
        assert count_ops("dsconv", H, W, C, K).multiply_adds < count_ops("attention", H, W, C, K).multiply_adds

    def test_asymptotic_ratio_grows_with_area(self):
        ratios = [asymptotic_cost("attention", n, n, 32) / asymptotic_cost("dsconv", n, n, 32) for n in (4, 8, 16)]
        assert ratios == sorted(ratios) and ratios[-1] > ratios[0] * 10

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            count_ops("mlp", 2, 2, 2)
