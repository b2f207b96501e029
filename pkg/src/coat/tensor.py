"""Dense tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
active :class:`Tape`. :func:`backward` replays that tape in exact reverse
execution order. Values are plain row-major numpy arrays; the working
precision is 32-bit unless ``COAT_PRECISION=64`` (or :func:`precision`).
"""

from __future__ import annotations

import contextlib
import hashlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "backward",
    "no_grad",
    "precision",
    "get_dtype",
    "set_precision",
    "record",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_DTYPES = {32: np.float32, 64: np.float64}


def _env_bits() -> int:
    bits = int(os.environ.get("COAT_PRECISION", "32"))
    if bits not in _DTYPES:
        raise ValueError(f"COAT_PRECISION must be 32 or 64, got {bits}")
    return bits


class _State(threading.local):
    def __init__(self) -> None:
        self.bits = _env_bits()
        self.grad_enabled = True
        self.tape = Tape()
        self.kinks: list[bytes] | None = None


@dataclass
class _Node:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class Tape:
    """Ordered record of executed differentiable ops."""

    nodes: list[_Node] = field(default_factory=list)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_state = _State()


def get_dtype() -> type:
    return _DTYPES[_state.bits]


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state.bits = bits


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    old = _state.bits
    set_precision(bits)
    try:
        yield
    finally:
        _state.bits = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def watch_kinks() -> Iterator[list[bytes]]:
    """Collect a digest of every ReLU on/off pattern computed inside the block."""
    old = _state.kinks
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = old


def current_tape() -> Tape:
    return _state.tape


class Tensor:
    """A numpy array plus autograd bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {name}")


def record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str,
) -> Tensor:
    """Wrap ``out_data`` as the result of an op and put it on the tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in order.
    """
    out_data = np.asarray(out_data)
    _check_finite(out_data, name)
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        node = _Node(out, tuple(inputs), backward_fn, name)
        out._node = node
        _state.tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The tape is consumed afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if loss._node is None:
        raise RuntimeError("loss was not produced through the tape")
    try:
        end = next(i for i in range(len(tape.nodes) - 1, -1, -1) if tape.nodes[i] is loss._node)
    except StopIteration:
        raise RuntimeError("loss node is not on the active tape") from None

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: end + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise AssertionError(f"{node.name}: grad shape {gi.shape} != input shape {t.shape}")
            if t._node is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.clear()


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    return record(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _state.kinks is not None:
        _state.kinks.append(hashlib.blake2b(np.packbits(mask).tobytes(), digest_size=16).digest())
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return record(out, (x,), lambda g: (g / xd,), "log")


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        ]

    return record(out, xs, bw, "concat")


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return record(x.data[idx].copy(), (x,), bw, "slice")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; indices may repeat (gradients accumulate)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return record(np.take(x.data, indices, axis=axis), (x,), bw, "take")


def mix(mask, a: Tensor, b: Tensor) -> Tensor:
    """Where ``mask`` is true take ``b``, else ``a`` (mask broadcasts)."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.where(mask, b.data, a.data)
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, 0, g), a.shape), _unbroadcast(np.where(mask, g, 0), b.shape)),
        "mix",
    )


def pick(x: Tensor, indices) -> Tensor:
    """x[i, indices[i]] for a 2-D x."""
    indices = np.asarray(indices, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, indices), g)
        return (full,)

    return record(x.data[rows, indices], (x,), bw, "pick")


# ---------------------------------------------------------------------------
# reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.size // max(np.asarray(out).size, 1) if x.size else 1

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / x.dtype.type(n), x.shape).copy(),)

    return record(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return record(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with w of shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, bw, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = g * gamma.data if gamma is not None else g
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=lead))
        if beta is not None:
            res.append(g.sum(axis=lead))
        return res

    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    return record(out.astype(xd.dtype, copy=False), inputs, bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return record(out, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution (channels-last)

def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    if k < 1 or s < 1 or p < 0:
        raise ValueError(f"invalid conv params k={k} s={s} p={p}")
    if n + 2 * p < k:
        raise ValueError(f"kernel {k} larger than padded input {n + 2 * p}")
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on channels-last input.

    x: (..., H, W, Cin); w: (k, k, Cin, Cout); zero padding.
    """
    k, k2, cin, cout = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[-1]} vs kernel {cin}")
    lead = x.shape[:-3]
    H, W = x.shape[-3], x.shape[-2]
    ho = conv_output_size(H, k, stride, padding)
    wo = conv_output_size(W, k, stride, padding)
    xd = x.data.reshape((-1, H, W, cin))
    B = xd.shape[0]
    if padding:
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: (B, ho, wo, cin, k, k) -> cols (B*ho*wo, k*k*cin) ordered (ki, kj, cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * ho * wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (ho, wo, cout))

    def bw(g):
        g2 = g.reshape(B * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(B, ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding : padding + H, padding : padding + W, :] if padding else gxp
        res = [gx.reshape(x.shape), gw]
        if b is not None:
            res.append(g2.sum(axis=0))
        return res

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, bw, "conv2d")

