"""Dense rank-5 tensors with reverse-mode differentiation.

Every value in the package is a :class:`Tensor5` laid out as
``(N, C, T, H, W)`` in row-major order and stored in double precision.
Operations never mutate their inputs; each returns a fresh tensor that
remembers its parents and a closure computing the vector-Jacobian product.
:func:`backward` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import io
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

AXES = ("N", "C", "T", "H", "W")
MAX_ELEMENTS = 2**31


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor5:
    """A five-axis array with an optional gradient slot.

    Args:
        values: array-like with exactly five axes; copied to float64.
        requires_grad: mark the tensor as a leaf whose gradient is wanted.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 5:
            raise ShapeError(f"Tensor5 needs 5 axes, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor5, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, int, int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor5":
        return Tensor5(self.values)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def flat_index(self, idx: Tuple[int, int, int, int, int]) -> int:
        return int(np.ravel_multi_index(idx, self.shape))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor5(shape={self.shape}{flag})"

    # operator sugar for the two elementwise ops the attention stack needs
    def __add__(self, other: "Tensor5") -> "Tensor5":
        return ewise_add(self, other)

    def __mul__(self, other: "Tensor5") -> "Tensor5":
        return broadcast_mul(self, other)


def node(values: np.ndarray, parents: Sequence[Tensor5],
         backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor5:
    """Wrap ``values`` as the output of an op over ``parents``.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent. Other modules use this to define custom ops.
    """
    out = Tensor5.__new__(Tensor5)
    out.values = values
    out.grad = None
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_shape(shape: Sequence[int]) -> Tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"expected 5 extents, got {shape}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"extents must be non-negative, got {shape}")
    if math.prod(shape) > MAX_ELEMENTS:
        raise OverflowError(f"extent product {math.prod(shape)} exceeds {MAX_ELEMENTS}")
    return shape


def make(shape: Sequence[int], fill: float = 0.0, requires_grad: bool = False) -> Tensor5:
    """Tensor of the given extents with every element equal to ``fill``."""
    return Tensor5(np.full(_check_shape(shape), float(fill)), requires_grad=requires_grad)


def from_array(arr, requires_grad: bool = False, name: str = "") -> Tensor5:
    return Tensor5(arr, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# kink tracking
#
# relu and max pooling are not differentiable everywhere. While a tracker is
# active those ops report how close their inputs came to a kink so a
# finite-difference harness can reject samples that straddle one.

_KINK_TRACKERS: list = []


@contextlib.contextmanager
def track_kinks() -> Iterator[list]:
    """Collect the smallest kink margin seen by relu/max ops in the block.

    Yields a one-element list holding the running minimum margin.
    """
    margin = [math.inf]
    _KINK_TRACKERS.append(margin)
    try:
        yield margin
    finally:
        _KINK_TRACKERS.remove(margin)


def _report_margin(value: float) -> None:
    for margin in _KINK_TRACKERS:
        if value < margin[0]:
            margin[0] = value


# ---------------------------------------------------------------------------
# elementwise


def ewise_add(a: Tensor5, b: Tensor5) -> Tensor5:
    if a.shape != b.shape:
        raise ShapeError(f"ewise_add shape mismatch {a.shape} vs {b.shape}")
    return node(a.values + b.values, (a, b), lambda g: (g, g))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def broadcast_mul(feature: Tensor5, attn: Tensor5) -> Tensor5:
    """Multiply ``feature`` by ``attn``, replicating ``attn`` along size-1 axes."""
    for axis, (f, a) in enumerate(zip(feature.shape, attn.shape)):
        if a != f and a != 1:
            raise ShapeError(
                f"attention extent {a} on axis {AXES[axis]} does not broadcast to {f}")
    fv, av = feature.values, attn.values

    def back(g):
        return g * av, _unbroadcast(g * fv, attn.shape)

    return node(fv * av, (feature, attn), back)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor5) -> Tensor5:
    s = _stable_sigmoid(x.values)
    return node(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor5) -> Tensor5:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    v = x.values
    if _KINK_TRACKERS and v.size:
        _report_margin(float(np.min(np.abs(v))))
    mask = v > 0
    return node(np.where(mask, v, 0.0), (x,), lambda g: (g * mask,))


def scale(x: Tensor5, factor: float) -> Tensor5:
    return node(x.values * factor, (x,), lambda g: (g * factor,))


def sum_all(x: Tensor5) -> Tensor5:
    """Sum of every element as a (1,1,1,1,1) tensor."""
    shape = x.shape
    return node(np.full((1, 1, 1, 1, 1), x.values.sum()), (x,),
                lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean_all(x: Tensor5) -> Tensor5:
    if x.size == 0:
        raise ShapeError("mean over zero elements")
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# reductions and layout


def pool_global(x: Tensor5, mode: str = "avg", keep_axes: Iterable[str] = ()) -> Tensor5:
    """Reduce every axis outside ``keep_axes`` (batch is always kept) to extent 1.

    ``mode='max'`` routes the gradient to the first maximum in row-major order.
    """
    keep = {a.upper() for a in keep_axes}
    bad = keep - set(AXES[1:])
    if bad:
        raise ShapeError(f"keep_axes must be drawn from C,T,H,W; got {sorted(bad)}")
    reduce_axes = tuple(i for i in range(1, 5) if AXES[i] not in keep)
    v = x.values
    count = math.prod(v.shape[i] for i in reduce_axes)
    if count == 0 or v.size == 0:
        raise ShapeError(f"pool_global over zero elements, shape {x.shape}")
    if not reduce_axes:
        return node(v.copy(), (x,), lambda g: (g,))

    if mode == "avg":
        out = v.mean(axis=reduce_axes, keepdims=True)
        shape = x.shape
        return node(out, (x,), lambda g: (np.broadcast_to(g / count, shape).copy(),))
    if mode != "max":
        raise ValueError(f"unknown pooling mode {mode!r}")

    # bring kept axes to the front so each reduction group is one contiguous row
    kept_axes = tuple(i for i in range(5) if i not in reduce_axes)
    perm = kept_axes + reduce_axes
    moved = np.transpose(v, perm)
    rows = moved.reshape(-1, count)
    arg = np.argmax(rows, axis=1)
    out = rows[np.arange(rows.shape[0]), arg]
    if _KINK_TRACKERS and count > 1:
        top2 = np.partition(rows, count - 2, axis=1)[:, -2:]
        _report_margin(float(np.min(top2[:, 1] - top2[:, 0])))
    out_shape = tuple(v.shape[i] if i in kept_axes else 1 for i in range(5))
    out = out.reshape(out_shape)
    inv = np.argsort(perm)

    def back(g):
        grows = np.zeros_like(rows)
        grows[np.arange(rows.shape[0]), arg] = g.reshape(-1)
        return (np.transpose(grows.reshape(moved.shape), inv),)

    return node(out, (x,), back)


def avg_pool(x: Tensor5, window: Tuple[int, int, int]) -> Tensor5:
    """Non-overlapping average pooling over (T, H, W) with the given window."""
    kt, kh, kw = window
    n, c, t, h, w = x.shape
    if t % kt or h % kh or w % kw:
        raise ShapeError(f"window {window} does not tile extents {(t, h, w)}")
    blocks = x.values.reshape(n, c, t // kt, kt, h // kh, kh, w // kw, kw)
    out = blocks.mean(axis=(3, 5, 7))
    denom = kt * kh * kw

    def back(g):
        gb = np.broadcast_to((g / denom)[:, :, :, None, :, None, :, None], blocks.shape)
        return (gb.reshape(x.shape),)

    return node(out, (x,), back)


def transpose_ct(x: Tensor5) -> Tensor5:
    """Swap the channel and time axes."""
    return node(np.ascontiguousarray(np.swapaxes(x.values, 1, 2)), (x,),
                lambda g: (np.swapaxes(g, 1, 2),))


def concat_channels(a: Tensor5, b: Tensor5) -> Tensor5:
    """Stack ``b`` after ``a`` along the channel axis."""
    sa, sb = a.shape, b.shape
    if sa[:1] + sa[2:] != sb[:1] + sb[2:]:
        raise ShapeError(f"concat_channels needs equal non-channel extents, got {sa} and {sb}")
    ca = sa[1]
    return node(np.concatenate([a.values, b.values], axis=1), (a, b),
                lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------------------
# convolution


@dataclass
class Conv3dKernel:
    """Weights ``(out, in, kt, kh, kw)``, optional bias ``(1, out, 1, 1, 1)``."""

    weight: Tensor5
    bias: Optional[Tensor5] = None
    padding: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.bias is not None and self.bias.shape != (1, self.out_channels, 1, 1, 1):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.out_channels} outputs")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"negative padding {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> Tuple[int, int, int]:
        return self.weight.shape[2:]  # type: ignore[return-value]

    def tensors(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def conv3d(x: Tensor5, k: Conv3dKernel) -> Tensor5:
    """Zero-padded cross-correlation of ``x`` with ``k`` over (T, H, W), stride 1."""
    n, c, t, h, w = x.shape
    if c != k.in_channels:
        raise ShapeError(f"conv3d expects {k.in_channels} input channels, got {c}")
    pt, ph, pw = k.padding
    kt, kh, kw = k.size
    padded_ext = (t + 2 * pt, h + 2 * ph, w + 2 * pw)
    if any(p < s for p, s in zip(padded_ext, (kt, kh, kw))):
        raise ShapeError(f"kernel {(kt, kh, kw)} larger than padded input {padded_ext}")
    to, ho, wo = (p - s + 1 for p, s in zip(padded_ext, (kt, kh, kw)))
    o = k.out_channels
    wv = k.weight.values
    has_bias = k.bias is not None

    if (kt, kh, kw) == (1, 1, 1) and not any(k.padding):
        # channel mixing only: (O, C) @ (C, N*T*H*W)
        xm = np.moveaxis(x.values, 1, 0).reshape(c, -1)
        wm = wv.reshape(o, c)
        out = np.moveaxis((wm @ xm).reshape(o, n, t, h, w), 0, 1)
        if has_bias:
            out = out + k.bias.values

        def back1(g):
            gm = np.moveaxis(g, 1, 0).reshape(o, -1)
            gx = np.moveaxis((wm.T @ gm).reshape(c, n, t, h, w), 0, 1)
            grads = [gx, (gm @ xm.T).reshape(wv.shape)]
            if has_bias:
                grads.append(gm.sum(axis=1).reshape(1, o, 1, 1, 1))
            return grads

        return node(np.ascontiguousarray(out), (x, *k.tensors()), back1)

    xp = np.pad(x.values, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    xp_t = np.ascontiguousarray(np.moveaxis(xp, 1, 0))  # (C, N, Tp, Hp, Wp)
    offsets = [(a, b, d) for a in range(kt) for b in range(kh) for d in range(kw)]
    # im2col rows ordered (c, a, b, d) to match the weight layout
    cols = np.empty((c, len(offsets), n, to, ho, wo))
    for i, (a, b, d) in enumerate(offsets):
        cols[:, i] = xp_t[:, :, a:a + to, b:b + ho, d:d + wo]
    cols = cols.reshape(c * len(offsets), -1)
    wm = wv.reshape(o, -1)
    out = np.moveaxis((wm @ cols).reshape(o, n, to, ho, wo), 0, 1)
    if has_bias:
        out = out + k.bias.values

    def back(g):
        gm = np.moveaxis(g, 1, 0).reshape(o, -1)
        gw = (gm @ cols.T).reshape(wv.shape)
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(c, len(offsets), n, to, ho, wo)
            gxp = np.zeros(xp_t.shape)
            for i, (a, b, d) in enumerate(offsets):
                gxp[:, :, a:a + to, b:b + ho, d:d + wo] += gcols[:, i]
            gx = np.ascontiguousarray(
                np.moveaxis(gxp, 0, 1)[:, :, pt:pt + t, ph:ph + h, pw:pw + w])
        grads = [gx, gw]
        if has_bias:
            grads.append(gm.sum(axis=1).reshape(1, o, 1, 1, 1))
        return grads

    return node(np.ascontiguousarray(out), (x, *k.tensors()), back)


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor5) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every flagged leaf."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones(root.shape)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# text serialization: header "N C T H W", then whitespace-separated scalars


def dumps(t: Tensor5) -> str:
    buf = io.StringIO()
    write_tensor(buf, t)
    return buf.getvalue()


def write_tensor(fh, t: Tensor5) -> None:
    fh.write(" ".join(str(s) for s in t.shape) + "\n")
    flat = t.values.reshape(-1)
    if flat.size:
        fh.write(" ".join(repr(float(v)) for v in flat) + "\n")
    else:
        fh.write("\n")


def read_tensor(fh) -> Tensor5:
    header = fh.readline()
    if not header:
        raise ValueError("unexpected end of file while reading tensor header")
    try:
        shape = _check_shape([int(s) for s in header.split()])
    except ValueError as exc:
        raise ValueError(f"bad tensor header {header.strip()!r}: {exc}") from None
    body = fh.readline()
    flat = np.array(body.split(), dtype=np.float64)
    if flat.size != math.prod(shape):
        raise ValueError(f"tensor {shape} expects {math.prod(shape)} values, found {flat.size}")
    return Tensor5(flat.reshape(shape))


def loads(text: str) -> Tensor5:
    return read_tensor(io.StringIO(text))


def save(path, t: Tensor5) -> None:
    with open(path, "w") as fh:
        write_tensor(fh, t)


def load(path) -> Tensor5:
    with open(path) as fh:
        return read_tensor(fh)
