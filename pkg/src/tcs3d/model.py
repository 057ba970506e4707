"""Full detector: backbone -> TCS3D attention -> region head, plus checkpoints.

Checkpoint layout (text)::

    # key=value          model configuration, one per line
    @name                manifest line naming the next tensor
    N C T H W            tensor header
    v v v ...            row-major values

Tensors appear in a fixed order: backbone, attention (``tam.w0``, ``tam.w1``,
``cam.w0``, ``cam.w1``, ``sam.conv`` with their biases), head.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attention
from .backbone import (
    BackboneConfig,
    BackboneParams,
    ClipBatch,
    classify_regions,
    extract_features,
    init_backbone,
    init_head,
)
from .metrics import Box, DetectionRecord
from .tensor import Conv3dKernel, Tensor5, read_tensor, sigmoid, write_tensor


@dataclass(frozen=True)
class ModelConfig:
    clip_frames: int = 16
    clip_height: int = 16
    clip_width: int = 24
    tau: int = 2
    alpha: int = 2
    beta: Fraction = Fraction(1, 8)
    base_channels: int = 16
    stages: Tuple[Tuple[int, int], ...] = ((1, 2), (1, 1))
    use_attention: bool = True
    r_t: int = 8
    r_c: int = 6
    num_classes: int = 8
    input_mean: float = 0.5
    input_scale: float = 4.0

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(tau=self.tau, alpha=self.alpha, beta=self.beta,
                              base_channels=self.base_channels, stages=self.stages)

    def feature_shape(self) -> Tuple[int, int, int, int]:
        return self.backbone().feature_shape(self.clip_frames, self.clip_height, self.clip_width)

    def to_items(self) -> List[Tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "stages":
                v = ";".join(f"{m}x{s}" for m, s in v)
            out.append((f.name, str(v)))
        return out

    @classmethod
    def from_items(cls, items: Dict[str, str]) -> "ModelConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for k, v in items.items():
            if k not in known:
                raise ValueError(f"unknown model config key {k!r}")
            if k == "stages":
                kwargs[k] = tuple(tuple(int(x) for x in s.split("x")) for s in v.split(";"))
            elif k == "beta":
                kwargs[k] = Fraction(v)
            elif k == "use_attention":
                kwargs[k] = v.strip().lower() in ("1", "true", "yes")
            elif k in ("input_mean", "input_scale"):
                kwargs[k] = float(v)
            else:
                kwargs[k] = int(v)
        return cls(**kwargs)


class BehaviorModel:
    """Backbone, optional TCS3D block and a linear multi-label head."""

    def __init__(self, config: ModelConfig, backbone: BackboneParams,
                 attn: Optional[attention.AttentionParams], head: Conv3dKernel):
        self.config = config
        self.backbone_cfg = config.backbone()
        self.backbone = backbone
        self.attn = attn
        self.head = head

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "BehaviorModel":
        ss = np.random.SeedSequence(seed)
        s_bb, s_att, s_head = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        c, t, _, _ = config.feature_shape()
        attn = (attention.init_params(s_att, c, t, config.r_t, config.r_c)
                if config.use_attention else None)
        return cls(config, init_backbone(s_bb, config.backbone()), attn,
                   init_head(s_head, c, config.num_classes))

    def named_tensors(self) -> List[Tuple[str, Tensor5]]:
        out = list(self.backbone.named_tensors())
        if self.attn is not None:
            out.extend(self.attn.named_tensors())
        out.append(("head", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def parameters(self) -> List[Tensor5]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def normalize(self, clip: ClipBatch) -> ClipBatch:
        """Centre and scale raw [0, 1] frames before the first convolution."""
        frames = Tensor5((clip.frames.values - self.config.input_mean) * self.config.input_scale)
        return ClipBatch(frames, clip.boxes)

    def features(self, clip: ClipBatch) -> Tensor5:
        f = extract_features(self.normalize(clip), self.backbone_cfg, self.backbone)
        if self.attn is not None:
            f, _ = attention.tcs3d_forward(f, self.attn)
        return f

    def logits(self, clip: ClipBatch) -> Tensor5:
        return classify_regions(self.features(clip), clip.boxes, self.head)

    def probabilities(self, clip: ClipBatch) -> Tensor5:
        return sigmoid(self.logits(clip))

    def predict(self, frames: np.ndarray, boxes: Sequence[Box], clip_id: str,
                frame_id: int) -> List[DetectionRecord]:
        """One scored record per (box, class) for a single clip (3, T, H, W)."""
        batch = ClipBatch(Tensor5(frames[None]), [list(boxes)])
        prob = self.probabilities(batch).values[:, :, 0, 0, 0]
        out = []
        for b, row in zip(boxes, prob):
            for c, s in enumerate(row):
                out.append(DetectionRecord(clip_id, frame_id, c, b, float(s)))
        return out

    # -- checkpoints -------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for k, v in self.config.to_items():
                fh.write(f"# {k}={v}\n")
            for name, t in self.named_tensors():
                fh.write(f"@{name}\n")
                write_tensor(fh, t)

    @classmethod
    def load(cls, path) -> "BehaviorModel":
        items: Dict[str, str] = {}
        tensors: Dict[str, Tensor5] = {}
        with open(path) as fh:
            while True:
                line = fh.readline()
                if not line:
                    break
                line = line.rstrip("\n")
                if line.startswith("# "):
                    k, v = line[2:].split("=", 1)
                    items[k] = v
                elif line.startswith("@"):
                    tensors[line[1:]] = read_tensor(fh)
                elif line.strip():
                    raise ValueError(f"{path}: unexpected checkpoint line {line[:40]!r}")
        model = cls.init(ModelConfig.from_items(items), seed=0)
        expected = [n for n, _ in model.named_tensors()]
        if sorted(expected) != sorted(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"{path}: checkpoint tensors mismatch; missing={missing} extra={extra}")
        for name, t in model.named_tensors():
            src = tensors[name]
            if src.shape != t.shape:
                raise ValueError(f"{path}: tensor {name} has shape {src.shape}, expected {t.shape}")
            t.values[...] = src.values
        return model


def with_attention(config: ModelConfig, enabled: bool) -> ModelConfig:
    return replace(config, use_attention=enabled)
