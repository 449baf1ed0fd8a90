"""Dense float32 tensors with reverse-mode automatic differentiation.

Values are stored as row-major numpy float32 arrays. Every differentiable
operation records a backward closure so that `backward(loss)` can populate
`.grad` on tracked leaves. Broadcasting is deliberately restricted to the
leading batch dimension; everything else must match exactly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "matmul",
    "conv2d",
    "upsample_nearest2x",
    "group_norm",
    "silu",
    "sum_",
    "mean_",
    "abs_",
    "sign_",
    "concat",
    "reshape",
    "gather_rows",
    "add_channel_bias",
    "softmax_cross_entropy",
    "alloc_bytes",
    "reset_alloc_counter",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def is_grad_enabled() -> bool:
    return _grad_enabled()


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = _grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


# Allocation accounting: total bytes wrapped into Tensors since the last
# reset. Used for the pixel-vs-latent memory comparison.
_alloc = {"bytes": 0}


def alloc_bytes() -> int:
    return _alloc["bytes"]


def reset_alloc_counter() -> None:
    _alloc["bytes"] = 0


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    return arr


class Tensor:
    """A float32 n-d array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        _alloc["bytes"] += self.data.nbytes

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._parents != ()


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _check_leading_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    """Shapes must match exactly, differ only in extra leading dims, or in a
    leading dim of size one."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    k = min(len(sa), len(sb))
    if k > 0 and sa[len(sa) - k:] == sb[len(sb) - k:]:
        return
    if len(sa) == len(sb) and sa[1:] == sb[1:] and (sa[0] == 1 or sb[0] == 1):
        return
    if a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: shapes {sa} and {sb} only broadcast over the leading batch dim")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for i, (gd, td) in enumerate(zip(g.shape, shape)):
        if td == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape), dtype=np.float32)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_leading_broadcast("add", a.data, b.data)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_leading_broadcast("sub", a.data, b.data)
    out_data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return scalar_mul(_coerce(a), float(b))
    if isinstance(a, (int, float)):
        return scalar_mul(_coerce(b), float(a))
    a, b = _coerce(a), _coerce(b)
    _check_leading_broadcast("mul", a.data, b.data)
    out_data = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _node(out_data, (a, b), backward)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    a = _coerce(a)
    s = float(s)

    def backward(g):
        return (np.asarray(g * np.float32(s), dtype=np.float32),)

    return _node(a.data * np.float32(s), (a,), backward)


def neg(a: Tensor) -> Tensor:
    return scalar_mul(a, -1.0)


def silu(a: Tensor) -> Tensor:
    a = _coerce(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig
    x = a.data

    def backward(g):
        return (np.asarray(g * (sig * (1.0 + x * (1.0 - sig))), dtype=np.float32),)

    return _node(out_data, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    a = _coerce(a)
    s = np.sign(a.data)

    def backward(g):
        # subgradient convention: d|x|/dx at 0 is 0
        return (np.asarray(g * s, dtype=np.float32),)

    return _node(np.abs(a.data), (a,), backward)


def sign_(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0; gradient is zero everywhere."""
    a = _coerce(a)

    def backward(g):
        return (np.zeros(a.shape, dtype=np.float32),)

    return _node(np.sign(a.data), (a,), backward)


# -- reductions --------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out64 = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out_data = np.asarray(out64, dtype=np.float32)
    in_shape = a.shape

    def backward(g):
        g = np.asarray(g, dtype=np.float32)
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(np.float32).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).astype(np.float32).copy(),)

    return _node(out_data, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return scalar_mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if b.ndim != 2:
        raise ValueError(f"matmul: rhs must be 2-d, got {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        da = g @ b_data.T
        db = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return np.asarray(da, dtype=np.float32), np.asarray(db, dtype=np.float32)

    return _node(out_data, (a, b), backward)


# -- convolution ---------------------------------------------------------------


def _pad_hw(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + top + bottom, w + left + right), dtype=np.float32)
    out[:, :, top : top + h, left : left + w] = x
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Window matrix (B, C*KH*KW, OH*OW); this layout copies cache-friendly
    row blocks and lets conv output land directly in NCHW order."""
    b, c, h, w = x.shape
    if pad:
        x = _pad_hw(x, pad, pad, pad, pad)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * kh * kw, oh * ow
    )
    return cols, oh, ow


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b = x.shape[0]
    o, c, kh, kw = w.shape
    if kh == 1 and kw == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride]
        oh, ow = xs.shape[2], xs.shape[3]
        out = np.matmul(w.reshape(o, c), xs.reshape(b, c, oh * ow))
        return out.reshape(b, o, oh, ow)
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(o, c * kh * kw), cols)  # (B, O, OH*OW)
    return out.reshape(b, o, oh, ow)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input with OIHW weights."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: channel mismatch, input {x.shape} vs weight {w.shape}")
    o, c, kh, kw = w.shape
    if padding > kh - 1 or padding > kw - 1:
        raise ValueError(f"conv2d: padding {padding} exceeds kernel {kh}x{kw} minus one")
    out_data = _conv2d_raw(x.data, w.data, stride, padding)
    if b is not None:
        b = _coerce(b)
        if b.shape != (o,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
        out_data = out_data + b.data[None, :, None, None]

    x_data, w_data = x.data, w.data
    bsz, _, h, wd = x.shape
    oh, ow = out_data.shape[2], out_data.shape[3]

    def backward(g):
        g = np.ascontiguousarray(g, dtype=np.float32)
        dw = dx = None
        if _tracked(w):
            # dW: correlate input windows with the output gradient
            cols, _, _ = _im2col(x_data, kh, kw, stride, padding)
            gmat = g.reshape(bsz, o, oh * ow)
            dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            dw = np.asarray(dw.reshape(o, c, kh, kw), dtype=np.float32)
        if _tracked(x):
            # dX: full correlation of the (dilated) output gradient with
            # flipped weights
            if stride > 1:
                gd = np.zeros(
                    (bsz, o, (oh - 1) * stride + 1, (ow - 1) * stride + 1), np.float32
                )
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            ph = kh - 1 - padding
            pw = kw - 1 - padding
            eh = (h + 2 * padding - kh) % stride
            ew = (wd + 2 * padding - kw) % stride
            gp = _pad_hw(gd, ph, ph + eh, pw, pw + ew)
            wf = np.ascontiguousarray(w_data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx = _conv2d_raw(gp, wf, 1, 0)
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if _tracked(b) else None)
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def upsample_nearest2x(x) -> Tensor:
    x = _coerce(x)
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2x: need 4-d input, got {x.shape}")
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def backward(g):
        return (
            np.ascontiguousarray(
                g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)), dtype=np.float32
            ),
        )

    return _node(out_data, (x,), backward)


# -- normalization -------------------------------------------------------------


def group_norm(x, num_groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.ndim != 4:
        raise ValueError(f"group_norm: need 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if c % num_groups != 0:
        raise ValueError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    n = (c // num_groups) * h * w
    xg = x.data.reshape(b, num_groups, n)
    mu64 = xg.mean(axis=2, keepdims=True, dtype=np.float64)
    sq64 = np.square(xg).mean(axis=2, keepdims=True, dtype=np.float64)
    var64 = np.maximum(sq64 - mu64 * mu64, 0.0)
    inv = (1.0 / np.sqrt(var64 + eps)).astype(np.float32)
    xhat = (xg - mu64.astype(np.float32)) * inv
    out_data = xhat.reshape(b, c, h, w) * gamma.data[None, :, None, None] + beta.data[
        None, :, None, None
    ]
    gamma_data = gamma.data

    def backward(g):
        g = np.ascontiguousarray(g, dtype=np.float32)
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        dgamma = (g * xhat.reshape(b, c, h, w)).sum(axis=(0, 2, 3), dtype=np.float64)
        dgamma = dgamma.astype(np.float32)
        dx = None
        if _tracked(x):
            dxhat = (g * gamma_data[None, :, None, None]).reshape(b, num_groups, n)
            s1 = dxhat.sum(axis=2, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=2, keepdims=True)
            dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
            dx = np.ascontiguousarray(dx.reshape(b, c, h, w), dtype=np.float32)
        return (dx, dgamma, dbeta)

    return _node(out_data, (x, gamma, beta), backward)


# -- structure ------------------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(g):
        outs = []
        start = 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            outs.append(np.ascontiguousarray(g[tuple(sl)], dtype=np.float32))
            start += s
        return tuple(outs)

    return _node(out_data, tuple(ts), backward)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    in_shape = a.shape

    def backward(g):
        return (np.ascontiguousarray(g.reshape(in_shape), dtype=np.float32),)

    return _node(a.data.reshape(shape), (a,), backward)


def gather_rows(table, idx) -> Tensor:
    """Row lookup `table[idx]`; backward scatter-adds into the table."""
    table = _coerce(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"gather_rows: table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"gather_rows: index out of range for table of {table.shape[0]} rows")
    out_data = table.data[idx]

    def backward(g):
        dt = np.zeros(table.shape, dtype=np.float32)
        np.add.at(dt, idx, g)
        return (dt,)

    return _node(out_data, (table,), backward)


def add_channel_bias(x, v) -> Tensor:
    """Add a per-sample channel vector (B,C) onto a feature map (B,C,H,W)."""
    x, v = _coerce(x), _coerce(v)
    if x.ndim != 4 or v.ndim != 2 or x.shape[:2] != v.shape:
        raise ValueError(f"add_channel_bias: shapes {x.shape} and {v.shape} disagree")
    out_data = x.data + v.data[:, :, None, None]

    def backward(g):
        return (
            np.ascontiguousarray(g, dtype=np.float32),
            g.sum(axis=(2, 3), dtype=np.float64).astype(np.float32),
        )

    return _node(out_data, (x, v), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"softmax_cross_entropy: got logits {logits.shape}, labels {labels.shape}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -np.log(np.maximum(p[np.arange(n), labels], 1e-12))
    out_data = np.float32(nll.mean(dtype=np.float64))

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (np.asarray(d * (g / n), dtype=np.float32),)

    return _node(out_data, (logits,), backward)


# -- reverse pass ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tracked tensor reachable from `loss`.

    Repeated calls accumulate. The loss must be scalar-shaped.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones(loss.data.shape, dtype=np.float32)
    }
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not _tracked(p):
                continue
            if pg.shape != p.data.shape:
                raise AssertionError(
                    f"backward: gradient shape {pg.shape} != value shape {p.data.shape}"
                )
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
