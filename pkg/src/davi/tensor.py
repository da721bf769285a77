"""Dense N-d tensors with reverse-mode automatic differentiation.

Only the operations the grounding model needs are provided. Every op builds a
node that remembers its parents and a closure mapping the output gradient to
parent gradients; :func:`backward` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True

# Additive attention mask value. Finite so the no-NaN/Inf invariant holds, and
# large enough that exp() underflows to exactly 0.
MASK_VALUE = -1e9


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch between float64 (verification) and float32 (fast training)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Skip graph construction (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.name = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def back(g):
        return (-g * out * out,)

    return _make(out, (a,), back, "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return _make(out, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    def back(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), back, "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def back(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), back, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), back, "gelu")


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), back, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), back, "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), back, "take_rows")


def select(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``select(x, (slice(None), 0))``."""

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(np.array(a.data[index]), (a,), back, "select")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    The 2-d case is the plain m×k · k×n product.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")

    flat = b.ndim == 2 and a.ndim > 2  # activations × weight: one big GEMM

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (None if ga is None else _unbroadcast(ga, a.shape)), gb

    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return _make(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# normalisation and attention primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back, "log_softmax")


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------------------
# convolution and resampling


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv output size not integral: (n={n} + 2*{padding} - k={k}) / stride={stride}"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    pad_mode: str = "zeros",
) -> Tensor:
    """2-d cross-correlation.

    ``x`` is c_in×h×w (or batched n×c_in×h×w); ``kernels`` is c_out×c_in×k×k.
    ``pad_mode`` is ``"zeros"`` or ``"edge"`` (replicate border pixels).
    """
    if pad_mode not in ("zeros", "edge"):
        raise ConfigurationError(f"unknown pad_mode {pad_mode!r}")
    batched = x.ndim == 4
    if not batched:
        x = reshape(x, (1,) + x.shape)
    n, c_in, h, w = x.shape
    c_out, kc, k, k2 = kernels.shape
    if kc != c_in or k != k2:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernels {kernels.shape}")
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d kernel size must be odd, got {k}")
    oh = _conv_out_size(h, k, stride, padding)
    ow = _conv_out_size(w, k, stride, padding)

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    if not padding:
        xp = x.data
    elif pad_mode == "edge":
        xp = np.pad(x.data, pads, mode="edge")
    else:
        xp = np.pad(x.data, pads)
    # cols: n × oh × ow × (c_in·k·k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # n, c_in, oh, ow, k, k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c_in * k * k)
    wmat = kernels.data.reshape(c_out, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gcol = g.transpose(0, 2, 3, 1)  # n, oh, ow, c_out
        gw = np.tensordot(gcol, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(kernels.shape)
        dcols = (gcol @ wmat).reshape(n, oh, ow, c_in, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if padding and pad_mode == "edge":
            # fold replicated borders back onto the edge pixels they copy
            gxp[:, :, padding, :] += gxp[:, :, :padding, :].sum(axis=2)
            gxp[:, :, padding + h - 1, :] += gxp[:, :, padding + h :, :].sum(axis=2)
            gxp[:, :, :, padding] += gxp[:, :, :, :padding].sum(axis=3)
            gxp[:, :, :, padding + w - 1] += gxp[:, :, :, padding + w :].sum(axis=3)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    y = _make(out, parents, back, "conv2d")
    return y if batched else reshape(y, y.shape[1:])


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """n_out×n_in interpolation weights, align-corners=False."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the trailing h×w axes of a c×h×w (or n×c×h×w) tensor."""
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ConfigurationError(f"upsample target {out_h}×{out_w} smaller than input {h}×{w}")
    ry = Tensor(bilinear_matrix(h, out_h))
    rx = Tensor(bilinear_matrix(w, out_w).T)
    return matmul(matmul(ry, x), rx)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows with nonzero weight.

    ``logits`` is ...×V, ``targets`` an integer array of the leading shape.
    ``weights`` (0/1 per row) excludes padding positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy target shape {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target index out of range for vocabulary of size {v}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no positions carry weight")
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = tsum(mul(lsm, onehot * (w / total)[..., None]))
    return mul(picked, -1.0)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy computed from logits.

    Per element: ``max(z,0) - z*t + log(1 + exp(-|z|))``.
    """
    t = np.asarray(target, dtype=float)
    if t.shape != logits.shape:
        raise DimensionError(f"bce mask shape {t.shape} vs logits {logits.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def back(g):
        return (g * (_sigmoid(z) - t) / n,)

    return _make(np.asarray(per.mean(), dtype=z.dtype), (logits,), back, "bce")


DICE_SMOOTH = 1.0


def dice_loss(probs: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2·Σpq + s) / (Σp + Σq + s)``."""
    q = np.asarray(target, dtype=float)
    if q.shape != probs.shape:
        raise DimensionError(f"dice mask shape {q.shape} vs probs {probs.shape}")
    p = probs.data
    inter = (p * q).sum()
    denom = p.sum() + q.sum() + smooth
    num = 2.0 * inter + smooth
    out = 1.0 - num / denom

    def back(g):
        return (g * -(2.0 * q * denom - num) / (denom * denom),)

    return _make(np.asarray(out, dtype=p.dtype), (probs,), back, "dice")


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Nodes reachable from an output, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, matching the usual
    zero-then-backward training idiom.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any parameter requiring grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


def parameters_grad_zero(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
