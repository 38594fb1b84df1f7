"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a ComputationRecord is
active (see ``recording``), every differentiable operation appends a node
carrying its backward closure; ``backward`` replays the tape in reverse to
produce gradients for the named parameters.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ParameterSet",
    "BatchNormState",
    "recording",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "logistic",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "narrow",
    "stack",
    "concat",
    "take_pairs",
    "conv2d",
    "global_pool",
    "batch_norm",
    "cross_entropy_sum",
    "elementwise",
]


class Tensor:
    """Immutable-by-contract dense array of 64-bit reals."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Node:
    """One executed operation on the tape."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class ComputationRecord:
    """Tape of executed operations plus the named trainable parameters.

    Nodes are appended in execution order, which is topological by
    construction; ``backward`` re-validates that before replaying.
    """

    def __init__(self, parameters: Mapping[str, Tensor] | None = None):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Tensor] = dict(parameters) if parameters else {}


class ParameterSet:
    """Named map of trainable tensors shared between records and steps."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if name.startswith(("bn/", "opt/")):
            raise ValueError(f"parameter name {name!r} uses a reserved prefix")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._params)


_ACTIVE_RECORD: ComputationRecord | None = None


@contextmanager
def recording(record: ComputationRecord):
    """Make ``record`` the active tape for operations executed inside."""
    global _ACTIVE_RECORD
    previous = _ACTIVE_RECORD
    _ACTIVE_RECORD = record
    try:
        yield record
    finally:
        _ACTIVE_RECORD = previous


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    rec = _ACTIVE_RECORD
    if rec is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(record: ComputationRecord, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every named parameter in the record.

    Non-parameter leaves are skipped; parameters the loss never touched get
    zero gradients. Rejects records whose node order is not topological.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    position = {id(n.output): i for i, n in enumerate(record.nodes)}
    for i, node in enumerate(record.nodes):
        for inp in node.inputs:
            j = position.get(id(inp))
            if j is not None and j >= i:
                raise ValueError(
                    f"record is not topologically ordered: node {i} ({node.op}) "
                    f"consumes the output of node {j} ({record.nodes[j].op})"
                )

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    out: dict[str, np.ndarray] = {}
    for name, p in record.parameters.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g)
    return out


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _apply("add", (a, b), out, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _apply("sub", (a, b), out, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _apply("mul", (a, b), out, bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _apply("div", (a, b), out, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (-g,)

    return _apply("neg", (a,), -a.data, bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # subgradient at 0 is 0

    def bw(g):
        return (g * mask,)

    return _apply("relu", (a,), np.where(mask, a.data, 0.0), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _apply("logistic", (a,), s, bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _apply("exp", (a,), out, bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _apply("log", (a,), np.log(ad), bw)


def sqrt(a) -> Tensor:
    """Square root clamping negatives to zero; subgradient 0 at 0."""
    a = as_tensor(a)
    out = np.sqrt(np.maximum(a.data, 0.0))
    safe = out > 1e-150

    def bw(g):
        return (np.where(safe, 0.5 * g / np.where(safe, out, 1.0), 0.0),)

    return _apply("sqrt", (a,), out, bw)


# ---------------------------------------------------------------------------
# shape / indexing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def bw(g):
        return (g.reshape(old),)

    return _apply("reshape", (a,), a.data.reshape(shape), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bw(g):
        return (g.T,)

    return _apply("transpose", (a,), a.data.T.copy(), bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    n = a.data.shape[axis]
    if start < 0 or length < 1 or start + length > n:
        raise ValueError(f"narrow [{start}:{start + length}] out of range for axis size {n}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _apply("narrow", (a,), a.data[index].copy(), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _apply("stack", tensors, out, bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", tensors, out, bw)


def take_pairs(a, rows, cols) -> Tensor:
    """Gather a[rows[i], cols[i]] into a vector; grads scatter-add back."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _apply("take_pairs", (a,), a.data[rows, cols].copy(), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _apply("sum", (a,), out, bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, shape).copy(),)

    return _apply("mean", (a,), out, bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D operands, with 1-D vector cases on either side."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ValueError(f"matmul supports 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad  # 1-D dot product, g scalar

    return _apply("matmul", (a, b), out, bw)


# ---------------------------------------------------------------------------
# network operations


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), zero padded, no bias.

    ``x`` is C_in x H x W or batched B x C_in x H x W; ``w`` is
    C_out x C_in x k x k with odd k and stride 1 or 2.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d needs 3/4-D input and 4-D kernel, got {x.data.shape} and {wd.shape}")
    B, C, H, W = xd.shape
    O, Cw, k, k2 = wd.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if Cw != C:
        raise ValueError(f"channel mismatch: input has {C} channels, kernel expects {Cw}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    # floor semantics: trailing rows/cols that don't fill a window are dropped,
    # so stride-2 halving works on even inputs (96 -> 48)
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if H + 2 * pad - k < 0 or W + 2 * pad - k < 0:
        raise ValueError(f"kernel {k}x{k} exceeds padded input {H + 2 * pad}x{W + 2 * pad}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    out = np.zeros((B, O, Ho, Wo))
    for u in range(k):
        for v in range(k):
            win = xp[:, :, u : u + stride * (Ho - 1) + 1 : stride, v : v + stride * (Wo - 1) + 1 : stride]
            out += np.einsum("bchw,oc->bohw", win, wd[:, :, u, v])

    def bw(g):
        if squeeze:
            g = g[None]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for u in range(k):
            for v in range(k):
                rs = slice(u, u + stride * (Ho - 1) + 1, stride)
                cs = slice(v, v + stride * (Wo - 1) + 1, stride)
                gw[:, :, u, v] = np.einsum("bohw,bchw->oc", g, xp[:, :, rs, cs])
                gxp[:, :, rs, cs] += np.einsum("bohw,oc->bchw", g, wd[:, :, u, v])
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    return _apply("conv2d", (x, w), out[0] if squeeze else out, bw)


def global_pool(x, mode: str = "avg") -> Tensor:
    """Per-channel spatial pooling: C x H x W -> C, or B x C x H x W -> B x C."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"global_pool expects 3/4-D input, got shape {x.data.shape}")
    B, C, H, W = xd.shape
    if mode == "avg":
        out = xd.mean(axis=(2, 3))

        def bw(g):
            if squeeze:
                g = g[None]
            gx = np.broadcast_to(g[:, :, None, None] / (H * W), xd.shape).copy()
            return (gx[0] if squeeze else gx,)

    elif mode == "max":
        flat = xd.reshape(B, C, H * W)
        idx = flat.argmax(axis=2)  # first index in row-major order on ties
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

        def bw(g):
            if squeeze:
                g = g[None]
            gflat = np.zeros((B, C, H * W))
            np.put_along_axis(gflat, idx[:, :, None], g[:, :, None], axis=2)
            gx = gflat.reshape(xd.shape)
            return (gx[0] if squeeze else gx,)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _apply(f"global_pool_{mode}", (x,), out[0] if squeeze else out, bw)


class BatchNormState:
    """Running statistics for one batch-norm layer (EMA momentum 0.1)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.running_mean is None:
            self.running_mean = mean.copy()
            self.running_var = var.copy()
        else:
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            self.running_var = (1.0 - m) * self.running_var + m * var


def batch_norm(x, scale, shift, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel batch normalization over B x C x H x W.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running EMA; eval mode requires populated running statistics.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batch_norm expects B x C x H x W, got shape {xd.shape}")
    B, C, H, W = xd.shape
    if scale.data.shape != (C,) or shift.data.shape != (C,):
        raise ValueError(f"scale/shift must have shape ({C},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    eps = state.eps
    sc = scale.data[None, :, None, None]

    if mode == "train":
        m = xd.mean(axis=(0, 2, 3))
        v = xd.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(v + eps)
        xhat = (xd - m[None, :, None, None]) * inv[None, :, None, None]
        out = sc * xhat + shift.data[None, :, None, None]
        state.update(m, v)
        n = B * H * W

        def bw(g):
            dxhat = g * sc
            # standard batch-statistics backward, per channel
            sum_dxhat = dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
            gx = (
                inv[None, :, None, None]
                / n
                * (n * dxhat - sum_dxhat[None, :, None, None] - xhat * sum_dxhat_xhat[None, :, None, None])
            )
            gscale = (g * xhat).sum(axis=(0, 2, 3))
            gshift = g.sum(axis=(0, 2, 3))
            return gx, gscale, gshift

    else:
        if not state.initialized:
            raise RuntimeError("batch_norm eval mode before any train step: running statistics empty")
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xd - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = sc * xhat + shift.data[None, :, None, None]

        def bw(g):
            gx = g * sc * inv[None, :, None, None]
            gscale = (g * xhat).sum(axis=(0, 2, 3))
            gshift = g.sum(axis=(0, 2, 3))
            return gx, gscale, gshift

    return _apply(f"batch_norm_{mode}", (x, scale, shift), out, bw)


def cross_entropy_sum(logits, labels) -> Tensor:
    """Softmax cross-entropy against integer labels, summed over the batch."""
    logits = as_tensor(logits)
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"logits must be B x N, got shape {ld.shape}")
    y = np.asarray(labels, dtype=np.intp)
    B, N = ld.shape
    if y.shape != (B,):
        raise ValueError(f"labels must have shape ({B},), got {y.shape}")
    if y.min(initial=0) < 0 or y.max(initial=-1) >= N:
        raise ValueError(f"label out of range [0, {N})")
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    out = np.asarray((lse - ld[np.arange(B), y]).sum())
    softmax = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def bw(g):
        gl = softmax.copy()
        gl[np.arange(B), y] -= 1.0
        return (g * gl,)

    return _apply("cross_entropy_sum", (logits,), out, bw)


def elementwise(x, op: str, y=None, s: float | None = None) -> Tensor:
    """Pointwise dispatcher: relu, logistic, mul(y), add(y), scale(s).

    mul/add accept equal shapes or a per-channel vector broadcast against
    C x H x W (or B x C x H x W) feature maps.
    """
    x = as_tensor(x)
    if op == "relu":
        return relu(x)
    if op == "logistic":
        return logistic(x)
    if op == "scale":
        if s is None:
            raise ValueError("scale requires s")
        return mul(x, float(s))
    if op in ("mul", "add"):
        if y is None:
            raise ValueError(f"{op} requires y")
        y = as_tensor(y)
        if y.data.shape != x.data.shape:
            # channel vector against a feature map
            if y.data.ndim == 1 and x.data.ndim in (3, 4) and x.data.shape[-3] == y.data.shape[0]:
                y = reshape(y, (y.data.shape[0], 1, 1))
            else:
                raise ValueError(f"incompatible shapes {x.data.shape} and {y.data.shape} for {op}")
        return mul(x, y) if op == "mul" else add(x, y)
    raise ValueError(f"unknown elementwise op {op!r}")
