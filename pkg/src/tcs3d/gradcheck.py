"""Finite-difference gradient suites for the tensor ops, attention, backbone and loss.

Each case builds a fresh random graph from a seed and reduces it to a scalar
with a fixed random weighting, so no gradient is trivially uniform. Samples
whose relu/max inputs sit within ``KINK_MARGIN`` of a kink are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attention, backbone, loss, tensor
from .metrics import Box
from .tensor import Conv3dKernel, Tensor5

EPS = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
MAX_REDRAWS = 50

Case = Tuple[Callable[[], Tensor5], List[Tensor5]]


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def numeric_grad(fn: Callable[[], Tensor5], leaf: Tensor5, eps: float = EPS) -> np.ndarray:
    flat = leaf.values.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(leaf.shape)


def check_case(fn: Callable[[], Tensor5], leaves: Sequence[Tensor5], eps: float = EPS,
               corrupt: bool = False) -> float:
    for leaf in leaves:
        leaf.grad = None
    tensor.backward(fn())
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        if corrupt:
            analytic = analytic * 1.01 + 1e-3
        worst = max(worst, rel_error(analytic, numeric_grad(fn, leaf, eps)))
    return worst


def _weighted_sum(out: Tensor5, rng: np.random.Generator) -> Tensor5:
    w = Tensor5(rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape))
    return tensor.sum_all(tensor.broadcast_mul(out, w))


def _leaf(rng, shape, lo=-2.0, hi=2.0) -> Tensor5:
    return Tensor5(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _kernel(rng, out_ch, in_ch, size, padding, bias=True) -> Conv3dKernel:
    w = _leaf(rng, (out_ch, in_ch, *size), -1.0, 1.0)
    b = _leaf(rng, (1, out_ch, 1, 1, 1), -0.5, 0.5) if bias else None
    return Conv3dKernel(w, b, padding)


# ---------------------------------------------------------------------------
# case factories: rng -> (closure, leaves)


def _case_ewise_add(rng):
    a, b = _leaf(rng, (2, 2, 3, 2, 2)), _leaf(rng, (2, 2, 3, 2, 2))
    w = Tensor5(rng.normal(size=a.shape))
    return (lambda: tensor.sum_all(tensor.broadcast_mul(tensor.ewise_add(a, b), w))), [a, b]


def _case_broadcast_mul(rng):
    f = _leaf(rng, (1, 4, 8, 3, 3))
    shapes = [(1, 1, 8, 1, 1), (1, 4, 1, 1, 1), (1, 1, 1, 3, 3)]
    m = _leaf(rng, shapes[int(rng.integers(len(shapes)))])
    w = Tensor5(rng.normal(size=f.shape))
    return (lambda: tensor.sum_all(tensor.broadcast_mul(tensor.broadcast_mul(f, m), w))), [f, m]


def _unary(op, shape=(1, 2, 3, 3, 3)):
    def case(rng):
        x = _leaf(rng, shape)
        w = Tensor5(rng.normal(size=shape))
        return (lambda: tensor.sum_all(tensor.broadcast_mul(op(x), w))), [x]
    return case


def _case_pool(mode):
    def case(rng):
        x = _leaf(rng, (2, 3, 4, 3, 3))
        keep_sets = [{"T"}, {"C"}, {"H", "W"}, set(), {"C", "T"}]
        keep = keep_sets[int(rng.integers(len(keep_sets)))]
        def fn():
            out = tensor.pool_global(x, mode, keep)
            return tensor.sum_all(tensor.broadcast_mul(out, w))
        w = Tensor5(rng.normal(size=tensor.pool_global(x.detach(), mode, keep).shape))
        return fn, [x]
    return case


def _case_conv3d(rng):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    size = tuple(int(s) for s in rng.integers(1, 4, size=3))
    pad = tuple(int(rng.integers(0, s)) for s in size)
    x = _leaf(rng, (2, cin, 4, 4, 3))
    k = _kernel(rng, cout, cin, size, pad)
    out_shape = tensor.conv3d(x.detach(), Conv3dKernel(k.weight.detach(), None, pad)).shape
    w = Tensor5(rng.normal(size=out_shape))
    return (lambda: tensor.sum_all(tensor.broadcast_mul(tensor.conv3d(x, k), w))), [x, *k.tensors()]


def _case_concat(rng):
    a, b = _leaf(rng, (1, 2, 2, 3, 3)), _leaf(rng, (1, 3, 2, 3, 3))
    w = Tensor5(rng.normal(size=(1, 5, 2, 3, 3)))
    return (lambda: tensor.sum_all(tensor.broadcast_mul(tensor.concat_channels(a, b), w))), [a, b]


def _case_avg_pool(rng):
    x = _leaf(rng, (1, 2, 4, 4, 6))
    w = Tensor5(rng.normal(size=(1, 2, 2, 2, 3)))
    return (lambda: tensor.sum_all(tensor.broadcast_mul(tensor.avg_pool(x, (2, 2, 2)), w))), [x]


def _case_transpose(rng):
    x = _leaf(rng, (1, 3, 4, 2, 2))
    w = Tensor5(rng.normal(size=(1, 4, 3, 2, 2)))
    return (lambda: tensor.sum_all(tensor.broadcast_mul(tensor.transpose_ct(x), w))), [x]


def _attention_fixture(rng, c=4, t=4, h=3, w=3, r_t=2, r_c=2):
    p = attention.init_params(int(rng.integers(2**31)), c, t, r_t, r_c)
    for k in (p.tam_w0, p.tam_w1, p.cam_w0, p.cam_w1, p.sam_conv):
        k.weight.values[...] = rng.uniform(-1.0, 1.0, size=k.weight.shape)
        k.bias.values[...] = rng.uniform(-0.5, 0.5, size=k.bias.shape)
    f = _leaf(rng, (1, c, t, h, w))
    return f, p


def _attn_case(which):
    def case(rng):
        f, p = _attention_fixture(rng)
        if which == "tcs3d":
            op = lambda: attention.tcs3d_forward(f, p)[0]
        else:
            op = {"tam": lambda: attention.tam_forward(f, p),
                  "cam": lambda: attention.cam_forward(f, p),
                  "sam": lambda: attention.sam_forward(f, p)}[which]
        w = Tensor5(rng.normal(size=op().shape))
        leaves = [f] + [t for t in p.tensors()]
        return (lambda: tensor.sum_all(tensor.broadcast_mul(op(), w))), leaves
    return case


SMALL_BACKBONE = backbone.BackboneConfig(tau=4, alpha=2, beta=0.5, base_channels=2,
                                         stages=((1, 2), (1, 1)))


def _case_backbone(rng):
    cfg = SMALL_BACKBONE
    params = backbone.init_backbone(int(rng.integers(2**31)), cfg)
    frames = _leaf(rng, (1, 3, 8, 4, 4), 0.0, 1.0)
    clip = backbone.ClipBatch(frames)
    out_shape = backbone.extract_features(backbone.ClipBatch(frames.detach()), cfg, params).shape
    w = Tensor5(rng.normal(size=out_shape))
    leaves = [frames] + [t for _, t in params.named_tensors()]
    return (lambda: tensor.sum_all(tensor.broadcast_mul(
        backbone.extract_features(clip, cfg, params), w))), leaves


def _case_head(rng):
    f = _leaf(rng, (2, 3, 2, 4, 4))
    head = _kernel(rng, 8, 3, (1, 1, 1), (0, 0, 0))
    boxes = [[Box(0.0, 0.0, 0.5, 0.5), Box(0.25, 0.5, 1.0, 1.0)], [Box(0.0, 0.0, 1.0, 1.0)]]
    w = Tensor5(rng.normal(size=(3, 8, 1, 1, 1)))
    return (lambda: tensor.sum_all(tensor.broadcast_mul(
        backbone.classify_regions(f, boxes, head), w))), [f, *head.tensors()]


def _loss_case(kind):
    def case(rng):
        logits = _leaf(rng, (3, 8, 1, 1, 1), -3.0, 3.0)
        y = (rng.random((3, 8)) < 0.4).astype(float)
        p = loss.FocalParams(alpha=float(rng.uniform(0.1, 0.9)), gamma=float(rng.uniform(0, 5)))
        if kind == "bce":
            return (lambda: loss.bce_loss(tensor.sigmoid(logits), y)), [logits]
        return (lambda: loss.fbce_loss(tensor.sigmoid(logits), y, p)), [logits]
    return case


SUITES: Dict[str, Dict[str, Callable]] = {
    "tensor": {
        "ewise_add": _case_ewise_add,
        "broadcast_mul": _case_broadcast_mul,
        "sigmoid": _unary(tensor.sigmoid),
        "relu": _unary(tensor.relu),
        "pool_global.avg": _case_pool("avg"),
        "pool_global.max": _case_pool("max"),
        "conv3d": _case_conv3d,
        "concat_channels": _case_concat,
        "avg_pool": _case_avg_pool,
        "transpose_ct": _case_transpose,
    },
    "attention": {
        "tam": _attn_case("tam"),
        "cam": _attn_case("cam"),
        "sam": _attn_case("sam"),
        "tcs3d": _attn_case("tcs3d"),
    },
    "backbone": {
        "extract_features": _case_backbone,
        "classify_regions": _case_head,
    },
    "loss": {
        "bce": _loss_case("bce"),
        "fbce": _loss_case("fbce"),
    },
}


def _draw_case(factory, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(MAX_REDRAWS):
        fn, leaves = factory(rng)
        with tensor.track_kinks() as margin:
            fn()
        if margin[0] >= KINK_MARGIN:
            return fn, leaves
    raise RuntimeError(f"could not draw a kink-free sample in {MAX_REDRAWS} tries")


def run_suite(modules: Sequence[str] = ("tensor", "attention", "backbone", "loss"),
              seeds: Sequence[int] = (0,), corrupt: Optional[str] = None) -> List[CheckResult]:
    """Run every case of the selected suites for each seed.

    ``corrupt`` names a case whose analytic gradient is deliberately perturbed
    (negative control).
    """
    results = []
    for module in modules:
        if module not in SUITES:
            raise KeyError(f"unknown gradcheck module {module!r}")
        for name, factory in SUITES[module].items():
            for seed in seeds:
                ss = np.random.SeedSequence([seed, _stable_hash(f"{module}.{name}")])
                fn, leaves = _draw_case(factory, int(ss.generate_state(1)[0]))
                err = check_case(fn, leaves, corrupt=(corrupt == name))
                results.append(CheckResult(f"{module}.{name}", seed, err))
    return results


def _stable_hash(text: str) -> int:
    h = 2166136261
    for ch in text.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def summarize(results: Sequence[CheckResult]) -> Dict[str, float]:
    worst: Dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_err)
    return worst
