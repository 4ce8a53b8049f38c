"""Dense tensors with reverse-mode differentiation.

Only the handful of layers the segmentation network needs are provided:
3x3 "same" convolution, 2x2 max-pooling, dense, ReLU, softmax + categorical
cross-entropy, plus the structural helpers ``flatten`` and ``concat``.
Values keep the dtype they were created with: training runs in float32,
gradient checks in float64.

Activations use the (batch, channels, height, width) layout.  Convolutions
work internally on channels-last views and process the batch in small
chunks so the im2col buffers stay cache-sized and are reused between calls.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTarget, MissingGradient, OddSpatialExtent, ShapeMismatch

CONV_CHUNK = 2

_local = threading.local()


def _buffer(tag, shape, dtype):
    """Per-thread scratch array; borders of pad buffers are never written, so stay zero."""
    cache = _local.__dict__.setdefault("buffers", {})
    key = (tag, shape, np.dtype(dtype))
    buf = cache.get(key)
    if buf is None:
        buf = np.zeros(shape, dtype)
        cache[key] = buf
    return buf


class Tensor:
    """An n-dimensional array node in the computation graph."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, name=None, _parents=(), _backward=None):
        self.values = values if isinstance(values, np.ndarray) else np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if grad is None:
            if self.values.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.values)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            # intermediate gradients are not needed once propagated
            node.grad = None


def _node(values, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


# ---------------------------------------------------------------------------
# layers


def _im2col(x_nhwc, dtype):
    n, h, w, c = x_nhwc.shape
    pad = _buffer("pad", (n, h + 2, w + 2, c), dtype)
    pad[:, 1:-1, 1:-1, :] = x_nhwc
    cols = _buffer("cols", (n, h, w, 3, 3, c), dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = pad[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution with one voxel of zero padding (output size = input size)."""
    if x.values.ndim != 4 or weights.values.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4D input and weights, got {x.shape} and {weights.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = weights.shape
    if (kh, kw) != (3, 3):
        raise ShapeMismatch(f"kernel must be 3x3, got {kh}x{kw}")
    if Cw != C:
        raise ShapeMismatch(f"input has {C} channels, weights expect {Cw}")
    if bias.shape != (F,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({F},)")

    dtype = np.result_type(x.values, weights.values)
    xv = x.values.transpose(0, 2, 3, 1)
    wm = weights.values.transpose(2, 3, 1, 0).reshape(9 * C, F).astype(dtype, copy=False)
    out = np.empty((B, H, W, F), dtype)
    for s in range(0, B, CONV_CHUNK):
        n = min(CONV_CHUNK, B - s)
        cols = _im2col(xv[s:s + n], dtype)
        np.matmul(cols, wm, out=out[s:s + n].reshape(n * H * W, F))
    out += bias.values.astype(dtype, copy=False)

    def backward(g):
        gv = g.transpose(0, 2, 3, 1)
        gb = gv.sum(axis=(0, 1, 2)).astype(bias.dtype, copy=False)
        gw = np.zeros((9 * C, F), dtype)
        gx = None
        if x.requires_grad:
            # input gradient = correlation of the gradient with the flipped kernel
            wflip = weights.values[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * F, C).astype(dtype)
            gx = np.empty((B, H, W, C), dtype)
        for s in range(0, B, CONV_CHUNK):
            n = min(CONV_CHUNK, B - s)
            gc = gv[s:s + n]
            cols = _im2col(xv[s:s + n], dtype)
            gw += cols.T @ np.ascontiguousarray(gc, dtype=dtype).reshape(n * H * W, F)
            if gx is not None:
                gcols = _im2col(gc, dtype)
                np.matmul(gcols, wflip, out=gx[s:s + n].reshape(n * H * W, C))
        gw = gw.reshape(3, 3, C, F).transpose(3, 2, 0, 1).astype(weights.dtype, copy=False)
        return (None if gx is None else gx.transpose(0, 3, 1, 2)), gw, gb

    return _node(out.transpose(0, 3, 1, 2), (x, weights, bias), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max-pooling with stride 2.

    The backward pass routes each gradient to the window maximum; ties go to
    the first element in row-major order within the window.
    """
    if x.values.ndim != 4:
        raise ShapeMismatch(f"maxpool2 expects a 4D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise OddSpatialExtent(f"spatial extent {H}x{W} is not even")
    # work on the channels-last view: conv2d outputs are contiguous in that order
    v = x.values.transpose(0, 2, 3, 1)
    a, b = v[:, 0::2, 0::2], v[:, 0::2, 1::2]
    c, d = v[:, 1::2, 0::2], v[:, 1::2, 1::2]
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))

    def backward(g):
        # window positions in row-major order: a=0, b=1, c=2, d=3; strict
        # comparisons keep the earlier position on ties
        top = np.maximum(a, b)
        bottom = np.maximum(c, d)
        use_bottom = bottom > top
        idx = np.where(use_bottom, 2 + (d > c), (b > a).astype(np.uint8))
        gt = g.transpose(0, 2, 3, 1)
        gx = np.zeros((B, H, W, C), g.dtype)
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            gx[:, di::2, dj::2] = np.where(idx == k, gt, 0)
        return (gx.transpose(0, 3, 1, 2),)

    out = out.transpose(0, 3, 1, 2)
    return _node(out, (x,), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` for x of shape (B, N)."""
    if x.values.ndim != 2 or weights.values.ndim != 2:
        raise ShapeMismatch(f"dense expects 2D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeMismatch(f"input width {x.shape[1]} != weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    out = x.values @ weights.values + bias.values

    def backward(g):
        gx = g @ weights.values.T if x.requires_grad else None
        return gx, x.values.T @ g, g.sum(axis=0)

    return _node(out, (x, weights, bias), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0)

    def backward(g):
        return (g * (x.values > 0),)

    return _node(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.values.reshape(shape[0], -1)

    def backward(g):
        return (g.reshape(shape),)

    return _node(out, (x,), backward)


def split(x: Tensor, sizes, axis=1) -> list:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeMismatch(f"sizes {sizes} do not add up to extent {x.shape[axis]}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.values.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros(x.shape, g.dtype)
            full[index] = g
            return (full,)

        pieces.append(_node(x.values[index], (x,), backward))
        start += size
    return pieces


def concat(tensors, axis=1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64 with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> tuple:
    """Mean categorical cross-entropy of softmax(logits) against class indices.

    Returns ``(loss, probs)``: ``loss`` is a scalar Tensor to call
    ``backward()`` on, ``probs`` a float64 array of shape (B, classes).
    """
    if logits.values.ndim != 2:
        raise ShapeMismatch(f"logits must be 2D, got {logits.shape}")
    B, K = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (B,) or targets.dtype.kind not in "iu":
        raise InvalidTarget(f"targets must be {B} integer class indices")
    if B and (targets.min() < 0 or targets.max() >= K):
        raise InvalidTarget(f"target outside 0..{K - 1}")

    probs = softmax(logits.values)
    rows = np.arange(B)
    z = logits.values.astype(np.float64)
    zmax = z.max(axis=1)
    log_norm = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    loss = float(np.mean(log_norm - z[rows, targets]))

    def backward(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        d *= float(g) / B
        return (d.astype(logits.dtype, copy=False),)

    return _node(np.asarray(loss), (logits,), backward), probs


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(eq=False)
class LayerParams:
    """Weights and bias of one layer together with their Adam moments."""

    name: str
    weights: Tensor
    bias: Tensor
    adam_m: list = field(default_factory=list)
    adam_v: list = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        self.weights.requires_grad = True
        self.bias.requires_grad = True
        self.weights.name = self.name + ".weights"
        self.bias.name = self.name + ".bias"
        if not self.adam_m:
            self.adam_m = [np.zeros(self.weights.shape), np.zeros(self.bias.shape)]
        if not self.adam_v:
            self.adam_v = [np.zeros(self.weights.shape), np.zeros(self.bias.shape)]

    @property
    def tensors(self):
        return (self.weights, self.bias)

    def zero_grad(self):
        self.weights.grad = None
        self.bias.grad = None


def adam_step(params: LayerParams, config: AdamConfig) -> None:
    """One in-place Adam update of ``params``; gradients are cleared afterwards."""
    for t in params.tensors:
        if t.grad is None:
            raise MissingGradient(f"{t.name} has no gradient")
    step = params.step_count + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for t, m, v in zip(params.tensors, params.adam_m, params.adam_v):
        g = t.grad.astype(np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        t.values[...] = t.values - update
        t.grad = None
    params.step_count = step
