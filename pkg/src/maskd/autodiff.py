"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Every differentiable operation appends a :class:`Node` to the active
:class:`Tape`. Because nodes are appended as they are created, the tape order
is already a topological order of the computation graph, so :func:`backward`
is a single reverse sweep.

Broadcasting is deliberately narrow: operands must have equal shapes, except
that Python scalars may scale anything and :func:`hadamard` accepts a spatial
mask ``(..., P)`` against a feature ``(..., C, P)``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the element type of newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise TypeError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


# ---------------------------------------------------------------------------
# tape

class Node:
    __slots__ = ("kind", "parents", "backward_fn", "index", "tape", "generation")

    def __init__(self, kind, parents, backward_fn, index, tape):
        self.kind = kind
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index
        self.tape = tape
        self.generation = tape.generation

    def __repr__(self):
        return f"Node({self.kind}, #{self.index})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape for the current
    thread; otherwise a per-thread default tape is used.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def record(self, kind, parents, backward_fn) -> Node:
        node = Node(kind, tuple(parents), backward_fn, len(self.nodes), self)
        self.nodes.append(node)
        return node

    def owns(self, node: Node | None) -> bool:
        return node is not None and node.tape is self and node.generation == self.generation

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _local_stack().append(self)
        return self

    def __exit__(self, *exc):
        _local_stack().pop()
        return False


_local = threading.local()


def _local_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def active_tape() -> Tape:
    return _local_stack()[-1]


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording; results of operations inside are constants."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# ---------------------------------------------------------------------------
# tensor

class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce(self, "sum", axes)

    def mean(self, axes=None):
        return reduce(self, "mean", axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def _make(data: np.ndarray, kind: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and record it on the tape if any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.node = active_tape().record(kind, parents, backward_fn)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        return _make(a.data + b, "add_scalar", (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product; one side may be a Python scalar."""
    if _is_scalar(b):
        a = _as_tensor(a)
        s = float(b)
        return _make(a.data * s, "scale", (a,), lambda g: (g * s,))
    if _is_scalar(a):
        return mul(b, a)
    return hadamard(a, b)


def _mask_broadcast(feat: Tensor, mask: Tensor) -> bool:
    fs, ms = feat.shape, mask.shape
    return feat.ndim == mask.ndim + 1 and feat.ndim >= 2 and fs[:-2] == ms[:-1] and fs[-1] == ms[-1]


def hadamard(a, b) -> Tensor:
    """Elementwise product of equal shapes, or a mask ``(..., P)`` over a feature ``(..., C, P)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _make(ad * bd, "hadamard", (a, b), lambda g: (g * bd, g * ad))
    if _mask_broadcast(a, b):
        feat, mask, swap = a, b, False
    elif _mask_broadcast(b, a):
        feat, mask, swap = b, a, True
    else:
        raise ShapeError(f"hadamard: cannot combine shapes {a.shape} and {b.shape}")
    fd = feat.data
    md = np.expand_dims(mask.data, -2)

    def bw(g):
        gf = g * md
        gm = (g * fd).sum(axis=-2)
        return (gm, gf) if swap else (gf, gm)

    return _make(fd * md, "hadamard_mask", (a, b), bw)


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, "div", (a, b), lambda g: (g / bd, -g * out / bd))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype, copy=False), "relu", (x,), lambda g: (g * pos,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid_np(x.data)
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def stop_gradient(x) -> Tensor:
    """Same values, no connection to the tape."""
    x = _as_tensor(x)
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# shape

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return _make(y, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                 lambda g: (g.transpose(inv),))


def swap_last(x) -> Tensor:
    """Transpose the two trailing axes."""
    x = _as_tensor(x)
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"reduce: axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"reduce: repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(x, kind: str = "sum", axes=None) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None); reduced axes are dropped."""
    x = _as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ValueError(f"reduce: unknown kind {kind!r}")
    ax = _norm_axes(axes, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in ax])) if ax else 1
    y = x.data.sum(axis=ax) if ax else x.data.copy()
    if kind == "mean":
        y = y / count
    scale = 1.0 / count if kind == "mean" else 1.0
    kept = tuple(1 if i in ax else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kept) * scale, shape),)

    return _make(np.asarray(y), kind, (x,), bw)


def global_avg_pool(x) -> Tensor:
    """(C, H, W) -> (C) or (N, C, H, W) -> (N, C) spatial mean."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return reduce(x, "mean", (-2, -1))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product of (m, k) @ (k, n); either side may carry a leading batch axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul: expected rank-2 or rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch extents differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if a.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if b.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1, zero same-padded cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is (C_out, C_in, k, k)
    with odd k; ``bias`` is (C_out) or None.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    if x.shape[-3] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[-3]} channels, kernel expects {kernel.shape[1]}")
    C_out = kernel.shape[0]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (C_out,):
            raise ShapeError(f"conv2d: bias must be ({C_out},), got {bias.shape}")

    xd = x.data[None] if single else x.data
    N, C, H, W = xd.shape
    cols = kernels.im2col(xd, k)  # N, C*k*k, H*W
    w2 = kernel.data.reshape(C_out, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(N, C_out, H, W)
    if single:
        out = out[0]

    def bw(g):
        g3 = g.reshape(N, C_out, H * W)
        gx = gk = gb = None
        if x.requires_grad:
            gx = kernels.col2im(np.swapaxes(w2, 0, 1) @ g3, k, (N, C, H, W))
            if single:
                gx = gx[0]
        if kernel.requires_grad:
            gk = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, "conv2d", parents, bw)


# ---------------------------------------------------------------------------
# losses

def pixel_cross_entropy(logits, labels) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label].

    ``logits`` is (K, H, W) or (N, K, H, W); ``labels`` an integer map of the
    matching spatial (and batch) shape.
    """
    logits = _as_tensor(logits)
    lab = np.asarray(labels)
    if not np.issubdtype(lab.dtype, np.integer):
        raise TypeError("pixel_cross_entropy: labels must be integers")
    single = logits.ndim == 3
    ld = logits.data[None] if single else logits.data
    lab = lab[None] if single else lab
    if ld.ndim != 4 or lab.shape != (ld.shape[0],) + ld.shape[2:]:
        raise ShapeError(f"pixel_cross_entropy: logits {logits.shape} vs labels {np.shape(labels)}")
    K = ld.shape[1]
    if lab.size and (lab.min() < 0 or lab.max() >= K):
        raise ValueError(f"pixel_cross_entropy: labels must lie in [0, {K})")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, lab[:, None], axis=1)
    count = lab.size
    loss = -picked.sum() / count

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, lab[:, None], np.take_along_axis(grad, lab[:, None], axis=1) - 1.0, axis=1)
        grad *= g / count
        return (grad[0] if single else grad,)

    return _make(np.asarray(loss, dtype=ld.dtype), "pixel_cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# reverse sweep

def backward(loss: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; zero them between
    steps. The tape is cleared afterwards unless ``retain`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = tape or (loss.node.tape if loss.node is not None else active_tape())
    if not tape.owns(loss.node):
        raise RuntimeError("backward: loss is not on the active tape (was it computed under no_grad?)")
    acc: dict[int, np.ndarray] = {loss.node.index: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = acc.pop(node.index, None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if tape.owns(parent.node):
                i = parent.node.index
                acc[i] = pg if i not in acc else acc[i] + pg
            else:
                pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    if not retain:
        tape.clear()


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    Relative error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    Only inputs with ``requires_grad`` are checked.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
        if out.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
        if out.node is not None:
            backward(out, tape)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(*inputs).item()
                flat[i] = orig - h
                fm = f(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            denom = max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, abs(a_flat[i] - num) / denom)
    for t in inputs:
        t.grad = None
    return worst
