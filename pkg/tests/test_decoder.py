import math

import numpy as np
import pytest

from rotdetr import tensor as T
from rotdetr.config import preset
from rotdetr.decoder import (CrossAttentionLayer, Decoder, DetectionHead, QuerySet, detection_head,
                             ms_cross_attention, spatial_bias, squash_box)
from rotdetr.errors import DimensionError
from rotdetr.geometry import HALF_PI
from rotdetr.model import Detector
from rotdetr.pyramid import FeaturePyramid


def memory(rng, C=8):
    return FeaturePyramid([T.Tensor(rng.normal(size=(4, 4, C))), T.Tensor(rng.normal(size=(2, 2, C)))], [8, 16])


class TestBoxes:
    def test_squash_ranges(self):
        out = squash_box(np.random.default_rng(0).normal(scale=20, size=(50, 5))).data
        assert np.all((out[:, :4] >= 0) & (out[:, :4] <= 1))
        assert np.all((out[:, 4] >= -HALF_PI) & (out[:, 4] <= HALF_PI))

    def test_squash_zero_is_centre(self):
        np.testing.assert_allclose(squash_box(np.zeros((1, 5))).data, [[0.5, 0.5, 0.5, 0.5, 0.0]], atol=1e-15)

    def test_reference_points_from_embeddings(self):
        rng = np.random.default_rng(1)
        dec = Decoder(rng, 8, 5, 1, 3)
        q = dec.queries()
        assert q.reference_points.shape == (5, 5)
        np.testing.assert_allclose(q.reference_points.data, squash_box(q.ref_logits).data)
        assert len(q) == 5

    def test_zero_head_reproduces_references(self):
        rng = np.random.default_rng(2)
        head = DetectionHead(rng, 8, 3)
        for layer in head.box_mlp.layers:
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        logits = T.Tensor(rng.normal(size=(4, 5)))
        q = QuerySet(T.Tensor(rng.normal(size=(4, 8))), logits, squash_box(logits))
        det = detection_head(rng.normal(size=(4, 8)), q, head)
        assert np.array_equal(det.boxes.data, q.reference_points.data)
        assert det.logits.shape == (4, 4)
        assert det.num_classes == 3


class TestCrossAttention:
    def test_weights_are_distributions(self):
        rng = np.random.default_rng(3)
        layer = CrossAttentionLayer(rng, 8, 16)
        dec = Decoder(rng, 8, 4, 1, 2)
        q = dec.queries()
        y, a = ms_cross_attention(q.embeddings, q, memory(rng), layer)
        assert y.shape == (4, 8)
        assert a.shape == (4, 20)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, rtol=1e-12)

    def test_spatial_bias_peaks_at_reference_centre(self):
        refs = T.Tensor(np.array([[0.25, 0.75, 0.2, 0.2, 0.0]]))
        locs = np.array([[0.25, 0.75], [0.5, 0.5], [0.9, 0.1]])
        b = spatial_bias(refs, locs).data[0]
        assert b[0] == 0.0 and b[0] > b[1] > b[2]

    def test_small_reference_concentrates_attention(self):
        rng = np.random.default_rng(4)
        layer = CrossAttentionLayer(rng, 8, 16)
        mem = memory(rng)
        emb = T.Tensor(rng.normal(size=(1, 8)))

        def peak(size):
            p = np.array([[0.2, 0.2, size, size, 0.5]])
            logits = np.log(p / (1 - p))
            q = QuerySet(emb, T.Tensor(logits), squash_box(T.Tensor(logits)))
            return ms_cross_attention(emb, q, mem, layer)[1].data.max()

        assert peak(0.05) > peak(0.8)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(5)
        layer = CrossAttentionLayer(rng, 4, 8)
        dec = Decoder(rng, 4, 2, 1, 2)
        q = dec.queries()
        with pytest.raises(DimensionError):
            ms_cross_attention(q.embeddings, q, memory(rng, C=8), layer)


class TestDecoder:
    def test_aux_outputs_per_layer(self):
        rng = np.random.default_rng(6)
        dec = Decoder(rng, 8, 6, 3, 2)
        mem = memory(rng)
        outs = dec(mem, aux=True)
        assert len(outs) == 3
        assert all(o.boxes.shape == (6, 5) and o.logits.shape == (6, 3) for o in outs)
        assert len(dec(mem, aux=False)) == 1

    def test_final_layer_independent_of_aux(self):
        rng = np.random.default_rng(7)
        dec = Decoder(rng, 8, 4, 2, 2)
        mem = memory(rng)
        assert np.array_equal(dec(mem, aux=True)[-1].boxes.data, dec(mem, aux=False)[-1].boxes.data)

    def test_query_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        dec = Decoder(rng, 8, 5, 2, 2)
        mem = memory(rng)
        base = dec(mem, aux=False)[-1]
        perm = np.array([3, 0, 4, 1, 2])
        dec.query_embed.data = dec.query_embed.data[perm]
        out = dec(mem, aux=False)[-1]
        np.testing.assert_allclose(out.boxes.data, base.boxes.data[perm], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(out.logits.data, base.logits.data[perm], rtol=1e-10, atol=1e-12)

    def test_rejects_zero_layers(self):
        with pytest.raises(ValueError):
            Decoder(np.random.default_rng(0), 8, 2, 0, 2)


class TestDetector:
    def test_overfit_preset_shapes(self):
        cfg = preset("overfit")
        model = Detector(cfg.model, 0)
        out = model(np.random.default_rng(0).uniform(size=(64, 64, 3)))
        assert len(out.detections) == 2
        assert out.final.boxes.shape == (20, 5)
        assert out.final.logits.shape == (20, 4)
        assert out.backbone.shapes == [(8, 8, 32), (4, 4, 32)]
        assert out.memory.shapes == out.backbone.shapes

    def test_same_seed_same_parameters(self):
        cfg = preset("overfit")
        assert Detector(cfg.model, 3).checksum() == Detector(cfg.model, 3).checksum()
        assert Detector(cfg.model, 3).checksum() != Detector(cfg.model, 4).checksum()

    def test_eval_forward_deterministic(self):
        cfg = preset("overfit")
        model = Detector(cfg.model, 1)
        img = np.random.default_rng(1).uniform(size=(64, 64, 3))
        assert np.array_equal(model(img).final.boxes.data, model(img).final.boxes.data)

    def test_boxes_are_valid(self):
        cfg = preset("overfit")
        out = Detector(cfg.model, 2)(np.random.default_rng(2).uniform(size=(64, 64, 3)))
        b = out.final.boxes.data
        assert np.all(b[:, 2:4] > 0)
        assert np.all((b[:, 4] >= -HALF_PI) & (b[:, 4] < HALF_PI))
        assert all(math.isfinite(v) for v in b.ravel())
