from fractions import Fraction

import numpy as np
import pytest

from tcs3d.backbone import (BackboneConfig, ClipBatch, box_to_cells, classify_regions,
                            extract_features, init_backbone, init_head, region_pool,
                            sample_pathways)
from tcs3d.metrics import Box
from tcs3d.tensor import Conv3dKernel, ShapeError, Tensor5, backward, pool_global, sum_all


def clip(t, h=8, w=8, n=1, seed=0):
    return ClipBatch(Tensor5(np.random.default_rng(seed).uniform(size=(n, 3, t, h, w))))


class TestPathways:
    def test_default_ratios(self):
        slow, fast = sample_pathways(clip(32), BackboneConfig())
        assert slow.shape[2] == 2 and fast.shape[2] == 16

    def test_short_clip(self):
        slow, fast = sample_pathways(clip(16), BackboneConfig())
        assert (slow.shape[2], fast.shape[2]) == (1, 8)

    def test_unit_ratio_samples_identically(self):
        c = clip(8)
        slow, fast = sample_pathways(c, BackboneConfig(tau=4, alpha=1))
        assert np.array_equal(slow.values, fast.values)

    def test_frames_are_strided_copies(self):
        c = clip(16)
        slow, fast = sample_pathways(c, BackboneConfig(tau=8, alpha=4))
        assert np.array_equal(slow.values, c.frames.values[:, :, ::8])
        assert np.array_equal(fast.values, c.frames.values[:, :, ::2])

    def test_bad_length(self):
        with pytest.raises(ShapeError):
            sample_pathways(clip(12), BackboneConfig())


class TestConfig:
    def test_fast_channels(self):
        cfg = BackboneConfig(base_channels=16)
        assert cfg.fast_channels(0) == 2 and cfg.fused_channels == 18

    def test_rejects_fractional_fast_channels(self):
        with pytest.raises(ValueError):
            BackboneConfig(base_channels=4, beta=Fraction(1, 8))

    def test_rejects_tau_not_multiple_of_alpha(self):
        with pytest.raises(ValueError):
            BackboneConfig(tau=6, alpha=4)


class TestFeatures:
    def test_toy_shape(self):
        cfg = BackboneConfig()
        f = extract_features(clip(32, 32, 32), cfg, init_backbone(0, cfg))
        assert f.shape == (1, 9, 2, 8, 8)
        assert cfg.feature_shape(32, 32, 32) == (9, 2, 8, 8)

    def test_zero_weights_give_bias(self):
        cfg = BackboneConfig(stages=((1, 2),))
        p = init_backbone(0, cfg)
        for k in p.slow + p.fast:
            k.weight.values[...] = 0.0
            k.bias.values[...] = 0.3
        f = extract_features(clip(16, 8, 8), cfg, p)
        assert np.allclose(f.values, 0.3)

    def test_both_pathways_receive_gradient(self):
        cfg = BackboneConfig(tau=4, alpha=2, beta=0.5, base_channels=2, stages=((1, 2),))
        p = init_backbone(1, cfg)
        c = clip(8, 4, 4)
        backward(sum_all(extract_features(c, cfg, p)))
        assert np.any(p.slow[0].weight.grad != 0) and np.any(p.fast[0].weight.grad != 0)

    def test_init_deterministic(self):
        cfg = BackboneConfig()
        a, b = init_backbone(5, cfg), init_backbone(5, cfg)
        for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb and np.array_equal(ta.values, tb.values)


class TestHead:
    def test_box_cells(self):
        assert box_to_cells(Box(0, 0, 1, 1), 4, 6) == (0, 4, 0, 6)
        assert box_to_cells(Box(0.25, 0.5, 0.75, 1.0), 4, 4) == (2, 4, 1, 3)
        with pytest.raises(ValueError):
            box_to_cells(Box(0.3, 0.3, 0.35, 0.35), 4, 4)

    def test_full_box_is_global_average(self):
        f = Tensor5(np.random.default_rng(2).normal(size=(1, 5, 2, 4, 4)))
        pooled = region_pool(f, [(0, 0, 4, 0, 4)])
        assert np.allclose(pooled.values, pool_global(f, "avg", ["C"]).values)

    def test_disjoint_boxes_distinct_logits(self):
        v = np.zeros((1, 3, 1, 4, 4))
        v[:, :, :, :, :2] = 1.0
        v[:, :, :, :, 2:] = -1.0
        head = init_head(0, 3)
        boxes = [[Box(0, 0, 0.5, 1), Box(0.5, 0, 1, 1)]]
        logits = classify_regions(Tensor5(v), boxes, head)
        assert logits.shape == (2, 8, 1, 1, 1)
        assert not np.allclose(logits.values[0], logits.values[1])

    def test_eight_outputs_per_box_and_linear(self):
        rng = np.random.default_rng(3)
        f = Tensor5(rng.normal(size=(2, 4, 1, 3, 3)))
        w = rng.normal(size=(8, 4, 1, 1, 1))
        b = rng.normal(size=(1, 8, 1, 1, 1))
        head = Conv3dKernel(Tensor5(w), Tensor5(b))
        boxes = [[Box(0, 0, 1, 1)], [Box(0, 0, 2 / 3, 2 / 3), Box(1 / 3, 1 / 3, 1, 1)]]
        out = classify_regions(f, boxes, head).values[:, :, 0, 0, 0]
        feats = [f.values[0].mean(axis=(1, 2, 3)), f.values[1, :, :, 0:2, 0:2].mean(axis=(1, 2, 3)),
                 f.values[1, :, :, 1:3, 1:3].mean(axis=(1, 2, 3))]
        expect = np.array([w[:, :, 0, 0, 0] @ x + b.ravel() for x in feats])
        assert np.allclose(out, expect, atol=1e-13)

    def test_needs_a_box(self):
        with pytest.raises(ValueError):
            classify_regions(Tensor5(np.zeros((1, 2, 1, 2, 2))), [[]], init_head(0, 2))

    def test_box_count_must_match_batch(self):
        with pytest.raises(ValueError):
            ClipBatch(Tensor5(np.zeros((2, 3, 1, 2, 2))), [[Box(0, 0, 1, 1)]])
