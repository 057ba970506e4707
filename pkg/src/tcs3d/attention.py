"""Temporal, channel and spatial attention over video feature maps.

The three gates are applied in series, temporal first::

    f1 = M_t(f)  * f
    f2 = M_c(f1) * f1
    f3 = M_s(f2) * f2

``M_t`` and ``M_c`` pool the feature map down to one axis with both average
and max pooling, pass each pooled vector through one shared bottleneck MLP
(two 1x1x1 convolutions with a relu between) and gate with a sigmoid of the
summed branches. ``M_s`` pools to (H, W), stacks the two pooled maps as two
channels and gates with a sigmoid of a 3x3x3 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .tensor import (
    Conv3dKernel,
    ShapeError,
    Tensor5,
    broadcast_mul,
    concat_channels,
    conv3d,
    ewise_add,
    pool_global,
    relu,
    sigmoid,
    transpose_ct,
)

TEMPORAL_RATIO = 8
CHANNEL_RATIO = 16


@dataclass
class AttentionParams:
    tam_w0: Conv3dKernel
    tam_w1: Conv3dKernel
    cam_w0: Conv3dKernel
    cam_w1: Conv3dKernel
    sam_conv: Conv3dKernel
    r_t: int = TEMPORAL_RATIO
    r_c: int = CHANNEL_RATIO

    @property
    def frames(self) -> int:
        return self.tam_w0.in_channels

    @property
    def channels(self) -> int:
        return self.cam_w0.in_channels

    def named_tensors(self) -> List[Tuple[str, Tensor5]]:
        out = []
        for name, k in (("tam.w0", self.tam_w0), ("tam.w1", self.tam_w1),
                        ("cam.w0", self.cam_w0), ("cam.w1", self.cam_w1),
                        ("sam.conv", self.sam_conv)):
            out.append((name, k.weight))
            if k.bias is not None:
                out.append((name + ".bias", k.bias))
        return out

    def tensors(self) -> List[Tensor5]:
        return [t for _, t in self.named_tensors()]


@dataclass
class AttentionTrace:
    m_t: Tensor5
    m_c: Tensor5
    m_s: Tensor5
    f1: Tensor5
    f2: Tensor5
    f3: Tensor5


def _uniform_kernel(rng: np.random.Generator, out_ch: int, in_ch: int,
                    size=(1, 1, 1), padding=(0, 0, 0), bias=True) -> Conv3dKernel:
    fan_in = in_ch * size[0] * size[1] * size[2]
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, *size))
    b = Tensor5(np.zeros((1, out_ch, 1, 1, 1)), requires_grad=True) if bias else None
    return Conv3dKernel(Tensor5(w, requires_grad=True), b, padding)


def init_params(seed: int, channels: int, frames: int,
                r_t: int = TEMPORAL_RATIO, r_c: int = CHANNEL_RATIO) -> AttentionParams:
    """Seeded uniform(+-1/sqrt(fan_in)) weights and zero biases for a (C, T) feature map."""
    if r_t < 1 or frames % r_t:
        raise ShapeError(f"frames={frames} not divisible by temporal ratio r_t={r_t}")
    if r_c < 1 or channels % r_c:
        raise ShapeError(f"channels={channels} not divisible by channel ratio r_c={r_c}")
    rng = np.random.default_rng(seed)
    return AttentionParams(
        tam_w0=_uniform_kernel(rng, frames // r_t, frames),
        tam_w1=_uniform_kernel(rng, frames, frames // r_t),
        cam_w0=_uniform_kernel(rng, channels // r_c, channels),
        cam_w1=_uniform_kernel(rng, channels, channels // r_c),
        sam_conv=_uniform_kernel(rng, 1, 2, size=(3, 3, 3), padding=(1, 1, 1)),
        r_t=r_t,
        r_c=r_c,
    )


def _shared_mlp(x: Tensor5, w0: Conv3dKernel, w1: Conv3dKernel) -> Tensor5:
    return conv3d(relu(conv3d(x, w0)), w1)


def tam_forward(f: Tensor5, p: AttentionParams) -> Tensor5:
    """Temporal attention map shaped (N, 1, T, 1, 1)."""
    t = f.shape[2]
    if t != p.frames:
        raise ShapeError(f"temporal attention built for T={p.frames}, got T={t}")
    branches = []
    for mode in ("avg", "max"):
        pooled = transpose_ct(pool_global(f, mode, keep_axes={"T"}))  # (N, T, 1, 1, 1)
        branches.append(_shared_mlp(pooled, p.tam_w0, p.tam_w1))
    return transpose_ct(sigmoid(ewise_add(*branches)))


def cam_forward(f: Tensor5, p: AttentionParams) -> Tensor5:
    """Channel attention map shaped (N, C, 1, 1, 1)."""
    c = f.shape[1]
    if c != p.channels:
        raise ShapeError(f"channel attention built for C={p.channels}, got C={c}")
    branches = [_shared_mlp(pool_global(f, mode, keep_axes={"C"}), p.cam_w0, p.cam_w1)
                for mode in ("avg", "max")]
    return sigmoid(ewise_add(*branches))


def sam_forward(f: Tensor5, p: AttentionParams) -> Tensor5:
    """Spatial attention map shaped (N, 1, 1, H, W)."""
    stacked = concat_channels(pool_global(f, "avg", keep_axes={"H", "W"}),
                              pool_global(f, "max", keep_axes={"H", "W"}))
    return sigmoid(conv3d(stacked, p.sam_conv))


def tcs3d_forward(f: Tensor5, p: AttentionParams) -> Tuple[Tensor5, AttentionTrace]:
    m_t = tam_forward(f, p)
    f1 = broadcast_mul(f, m_t)
    m_c = cam_forward(f1, p)
    f2 = broadcast_mul(f1, m_c)
    m_s = sam_forward(f2, p)
    f3 = broadcast_mul(f2, m_s)
    return f3, AttentionTrace(m_t=m_t, m_c=m_c, m_s=m_s, f1=f1, f2=f2, f3=f3)


def param_dict(p: AttentionParams) -> Dict[str, Tensor5]:
    return dict(p.named_tensors())
