"""Double-precision tensors with an explicit reverse-mode gradient tape.

Operations only record onto a :class:`Tape` that has been entered with a
``with`` block; outside of one they are evaluated eagerly and nothing is kept
for differentiation.  Each training step owns its own tape.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A precondition of an operation (other than shape) was violated."""


_CHECKED = os.environ.get("DABDU_CHECKED", "") not in ("", "0")


def set_checked(enabled: bool) -> None:
    """Toggle the finiteness assertion run after every operation."""
    global _CHECKED
    _CHECKED = bool(enabled)


def checked_mode() -> bool:
    return _CHECKED


class Tensor:
    """Dense float64 array that can participate in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_node: _Node | None = None
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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; right-hand scalars are treated as constants
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _raise_item():
    raise ContractError("item() requires a single-element tensor")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in evaluation order, so operands always precede the
    operations that consume them and a reverse walk is a valid topological
    traversal.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, tape=self)


def _finish(out_data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    """Wrap an op result, recording a backward rule when a tape is live."""
    if _CHECKED and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by tensor operation")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.tape_node = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, grad_fn)
        out.tape_node = node
        tape.nodes.append(node)
    return out


def record(out_data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Register a fused operation.

    ``grad_fn(g)`` must return one gradient (or ``None``) per parent, each
    shaped like that parent.
    """
    return _finish(out_data, tuple(parents), grad_fn)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
            return
        raise ContractError("loss was not recorded on an active tape")
    if tape is None:
        tape = _active_tape()
        if tape is None:
            raise ContractError("backward requires the tape that recorded the loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes = tape.nodes
    try:
        start = _index_of(nodes, loss.tape_node)
    except ValueError:
        raise ContractError("loss does not belong to the given tape") from None
    for node in reversed(nodes[: start + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.tape_node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _index_of(nodes: list[_Node], node: _Node) -> int:
    for i in range(len(nodes) - 1, -1, -1):
        if nodes[i] is node:
            return i
    raise ValueError


# ---------------------------------------------------------------------------
# broadcasting (bias-style only)


def _broadcast_ok(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    if big == small:
        return True
    if len(small) == 0 or (len(small) > 0 and int(np.prod(small)) == 1 and len(small) <= len(big)):
        return True
    if len(small) == len(big):
        return all(s == b or s == 1 for s, b in zip(small, big))
    if len(small) < len(big):
        return tuple(big[len(big) - len(small):]) == tuple(small)
    return False


def _result_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if _broadcast_ok(a, b):
        return a
    if _broadcast_ok(b, a):
        return b
    raise ShapeError(f"shapes {a} and {b} are not bias-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _finish(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _finish(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch a binary elementwise op by name (``add``, ``sub``, ``mul``, ``div``, ``neg``)."""
    if op_kind == "neg":
        return mul(as_tensor(a), -1.0)
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if b is None:
        raise ContractError(f"{op_kind} needs two operands")
    return fn(a, b)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _finish(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _finish(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _finish(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _finish(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def identity(x: Tensor) -> Tensor:
    return _finish(x.data.copy(), (x,), lambda g: (g,))


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "identity": identity}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return _finish(out, (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def grad_fn(g):
        full = np.zeros(shape)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _finish(np.array(out, copy=True), (x,), grad_fn)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    ax = _axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat operands disagree off axis {ax}: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(int(lo), int(hi))
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _finish(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn)


def reduce(x: Tensor, kind: str = "sum", axis: int | tuple[int, ...] | None = None,
           keepdims: bool = False) -> Tensor:
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    shape = x.shape
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_axis(a, x.ndim) for a in axes)
    else:
        axes = tuple(range(x.ndim))
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        out = out / count
    scale = 1.0 / count if kind == "mean" else 1.0

    def grad_fn(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape).copy(),)

    return _finish(np.asarray(out, dtype=np.float64), (x,), grad_fn)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axis, keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce(x, "mean", axis, keepdims)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _finish(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops, layout [N, C, H, W]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with kernels ``w`` [F,C,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"kernel expects {cw} input channels, input has {c}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {padding})")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"bias shape {b.shape} does not match {f} filters")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xd, wdat = x.data, w.data

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        w2 = wdat[:, :, 0, 0]
        out = np.ascontiguousarray(np.tensordot(xd, w2, axes=([1], [1])).transpose(0, 3, 1, 2))
        if b is not None:
            out += b.data[None, :, None, None]

        def grad_1x1(g):
            gx = np.ascontiguousarray(np.tensordot(g, w2, axes=([1], [0])).transpose(0, 3, 1, 2))
            gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            return (gx, gw, g.sum(axis=(0, 2, 3))) if b is not None else (gx, gw)

        parents = (x, w, b) if b is not None else (x, w)
        return _finish(out, parents, grad_1x1)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col rows ordered (n, ho, wo), columns (c, i, j)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = wdat.reshape(f, c * kh * kw)
    out_rows = cols @ wmat.T
    if b is not None:
        out_rows += b.data
    out = np.ascontiguousarray(out_rows.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def grad_fn(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g_rows.T @ cols).reshape(f, c, kh, kw)
        if stride == 1 and padding < kh and padding < kw:
            # input gradient = full correlation with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gcols = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, f * kh * kw)
            wflip = np.ascontiguousarray(wdat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, f * kh * kw)
            gx = np.ascontiguousarray((gcols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))
        else:
            dcols = (g_rows @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is not None:
            return gx, gw, g_rows.sum(axis=0)
        return gx, gw

    parents = (x, w, b) if b is not None else (x, w)
    return _finish(out, parents, grad_fn)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    if window != stride:
        raise ShapeError("only non-overlapping pooling (window == stride) is supported")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by pooling window {window}")
    k = window
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // k, w // k, k * k
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        routed = np.zeros((n, c, h // k, w // k, k * k))
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        gx = routed.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _finish(out, (x,), grad_fn)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _finish(out, (x,), grad_fn)
