"""Miniature two-pathway feature extractor and per-region classification head.

The slow pathway sees every ``tau``-th frame with ``C`` channels; the fast
pathway sees every ``tau / alpha``-th frame with ``beta * C`` channels. Each
pathway is a plain stack of conv + relu + spatial average-pool stages. At the
end the fast features are average-pooled in time down to the slow frame
count and appended to the slow channels, giving the fused map the attention
block consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Sequence, Tuple

import numpy as np

from .metrics import Box
from .tensor import (
    Conv3dKernel,
    ShapeError,
    Tensor5,
    avg_pool,
    concat_channels,
    conv3d,
    node,
    relu,
)

NUM_CLASSES = 8


@dataclass(frozen=True)
class BackboneConfig:
    """Pathway ratios and a per-stage ``(channel multiplier, spatial stride)`` list."""

    tau: int = 16
    alpha: int = 8
    beta: Fraction = Fraction(1, 8)
    base_channels: int = 8
    stages: Tuple[Tuple[int, int], ...] = ((1, 2), (1, 2))
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "beta", Fraction(self.beta).limit_denominator(1024))
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        if self.tau < 1 or self.alpha < 1 or self.tau % self.alpha:
            raise ValueError(f"tau={self.tau} must be a positive multiple of alpha={self.alpha}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        for mult, _ in self.stages:
            if (self.base_channels * mult * self.beta).denominator != 1:
                raise ValueError(
                    f"beta * channels must be whole: {self.beta} * {self.base_channels * mult}")
        if not self.stages:
            raise ValueError("at least one stage is required")

    def slow_channels(self, stage: int) -> int:
        return self.base_channels * self.stages[stage][0]

    def fast_channels(self, stage: int) -> int:
        return int(self.slow_channels(stage) * self.beta)

    @property
    def spatial_stride(self) -> int:
        return int(np.prod([s for _, s in self.stages]))

    @property
    def fused_channels(self) -> int:
        last = len(self.stages) - 1
        return self.slow_channels(last) + self.fast_channels(last)

    def feature_shape(self, t_raw: int, h: int, w: int) -> Tuple[int, int, int, int]:
        """(C, T, H, W) of the fused feature map for a raw clip."""
        s = self.spatial_stride
        if h % s or w % s:
            raise ShapeError(f"frame {h}x{w} not divisible by total spatial stride {s}")
        return (self.fused_channels, t_raw // self.tau, h // s, w // s)


@dataclass
class ClipBatch:
    """Raw frames (N, 3, T_raw, H, W) and, per sample, the region boxes."""

    frames: Tensor5
    boxes: List[List[Box]] = field(default_factory=list)

    def __post_init__(self):
        if self.boxes and len(self.boxes) != self.frames.shape[0]:
            raise ValueError(f"{len(self.boxes)} box lists for {self.frames.shape[0]} clips")


@dataclass
class BackboneParams:
    slow: List[Conv3dKernel]
    fast: List[Conv3dKernel]

    def named_tensors(self):
        out = []
        for path, kernels in (("slow", self.slow), ("fast", self.fast)):
            for i, k in enumerate(kernels):
                out.append((f"backbone.{path}.{i}", k.weight))
                if k.bias is not None:
                    out.append((f"backbone.{path}.{i}.bias", k.bias))
        return out


def _kernel(rng, out_ch, in_ch, size, padding) -> Conv3dKernel:
    fan_in = in_ch * int(np.prod(size))
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor5(rng.uniform(-bound, bound, size=(out_ch, in_ch, *size)), requires_grad=True)
    b = Tensor5(np.zeros((1, out_ch, 1, 1, 1)), requires_grad=True)
    return Conv3dKernel(w, b, padding)


def init_backbone(seed: int, cfg: BackboneConfig) -> BackboneParams:
    """Seeded uniform(+-1/sqrt(fan_in)) initialization.

    Slow kernels are 1x3x3 (no temporal mixing); fast kernels are 3x3x3.
    """
    rng = np.random.default_rng(seed)
    slow, fast = [], []
    s_in = f_in = cfg.in_channels
    for i in range(len(cfg.stages)):
        slow.append(_kernel(rng, cfg.slow_channels(i), s_in, (1, 3, 3), (0, 1, 1)))
        fast.append(_kernel(rng, cfg.fast_channels(i), f_in, (3, 3, 3), (1, 1, 1)))
        s_in, f_in = cfg.slow_channels(i), cfg.fast_channels(i)
    return BackboneParams(slow, fast)


def take_frames(x: Tensor5, stride: int) -> Tensor5:
    """Every ``stride``-th frame along time, starting at frame 0."""
    t = x.shape[2]

    def back(g):
        full = np.zeros(x.shape)
        full[:, :, ::stride] = g
        return (full,)

    return node(np.ascontiguousarray(x.values[:, :, ::stride]), (x,), back)


def sample_pathways(clip: ClipBatch, cfg: BackboneConfig) -> Tuple[Tensor5, Tensor5]:
    t_raw = clip.frames.shape[2]
    if t_raw < cfg.tau or t_raw % cfg.tau:
        raise ShapeError(f"T_raw={t_raw} must be a positive multiple of tau={cfg.tau}")
    slow = take_frames(clip.frames, cfg.tau)
    fast = take_frames(clip.frames, cfg.tau // cfg.alpha)
    return slow, fast


def _stage(x: Tensor5, k: Conv3dKernel, stride: int) -> Tensor5:
    y = relu(conv3d(x, k))
    return avg_pool(y, (1, stride, stride)) if stride > 1 else y


def extract_features(clip: ClipBatch, cfg: BackboneConfig, params: BackboneParams) -> Tensor5:
    """Fused feature map (N, C + beta*C, T_raw/tau, H/s, W/s)."""
    slow, fast = sample_pathways(clip, cfg)
    for (_, stride), ks, kf in zip(cfg.stages, params.slow, params.fast):
        slow = _stage(slow, ks, stride)
        fast = _stage(fast, kf, stride)
    lateral = avg_pool(fast, (cfg.alpha, 1, 1))
    return concat_channels(slow, lateral)


# ---------------------------------------------------------------------------
# region head


def box_to_cells(box: Box, h: int, w: int) -> Tuple[int, int, int, int]:
    """Nearest-index feature cells ``(r0, r1, c0, c1)`` covered by a normalized box."""
    r0 = int(np.floor(box.y1 * h + 0.5))
    r1 = int(np.floor(box.y2 * h + 0.5))
    c0 = int(np.floor(box.x1 * w + 0.5))
    c1 = int(np.floor(box.x2 * w + 0.5))
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"box {box.as_tuple()} covers no cell on a {h}x{w} feature grid")
    return r0, r1, c0, c1


def region_pool(f: Tensor5, regions: Sequence[Tuple[int, int, int, int, int]]) -> Tensor5:
    """Mean of ``f[n, :, :, r0:r1, c0:c1]`` per region, stacked as (K, C, 1, 1, 1)."""
    v = f.values
    c = v.shape[1]
    out = np.empty((len(regions), c, 1, 1, 1))
    for i, (n, r0, r1, c0, c1) in enumerate(regions):
        out[i, :, 0, 0, 0] = v[n, :, :, r0:r1, c0:c1].mean(axis=(1, 2, 3))
    t = v.shape[2]

    def back(g):
        gx = np.zeros(v.shape)
        for i, (n, r0, r1, c0, c1) in enumerate(regions):
            cnt = t * (r1 - r0) * (c1 - c0)
            gx[n, :, :, r0:r1, c0:c1] += g[i, :, 0, 0, 0][:, None, None, None] / cnt
        return (gx,)

    return node(out, (f,), back)


def init_head(seed: int, channels: int, num_classes: int = NUM_CLASSES) -> Conv3dKernel:
    rng = np.random.default_rng(seed)
    return _kernel(rng, num_classes, channels, (1, 1, 1), (0, 0, 0))


def classify_regions(f: Tensor5, boxes: Sequence[Sequence[Box]], head: Conv3dKernel) -> Tensor5:
    """Per-box logits (K, M, 1, 1, 1); boxes are flattened in sample order."""
    h, w = f.shape[3:]
    regions = []
    for n, sample_boxes in enumerate(boxes):
        for b in sample_boxes:
            regions.append((n, *box_to_cells(b, h, w)))
    if not regions:
        raise ValueError("classify_regions needs at least one box")
    return conv3d(region_pool(f, regions), head)
