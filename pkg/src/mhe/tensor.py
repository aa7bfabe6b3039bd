"""Dense rank-<=4 tensors with a minimal reverse-mode differentiation tape.

Rasters use N,C,H,W layout. Two global precision modes exist: float64 for
gradient checking and oracle tests, float32 for training; the mode is a
process-wide setting and must not change inside one recorded graph.

Operations record onto the innermost active :class:`Graph` (entered as a
context manager) whenever any input is connected to a gradient-requiring
leaf. Outside a graph they evaluate eagerly with no bookkeeping, which is
the inference path.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_F32 = np.float32
_F64 = np.float64
_DTYPES = {"f32": _F32, "f64": _F64}
_default_dtype = _F32


def set_default_dtype(name: str) -> None:
    """Set the global precision mode, "f32" (training) or "f64" (gradcheck)."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype name {name!r}, expected 'f32' or 'f64'")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class precision:
    """Context manager that switches the global precision mode."""

    def __init__(self, name: str):
        self._name = name
        self._saved: np.dtype | None = None

    def __enter__(self):
        global _default_dtype
        self._saved = _default_dtype
        set_default_dtype(self._name)
        return self

    def __exit__(self, *exc):
        global _default_dtype
        _default_dtype = self._saved
        return False


class Tensor:
    """Contiguous row-major array plus gradient bookkeeping.

    External inputs are validated at construction: finite values only,
    rank at most 4, every extent >= 1. Values produced by tape ops skip
    the finite check (divergence is caught by the training guard instead).
    ``grad`` is populated by :meth:`Graph.backward`; each backward call
    assigns fresh gradients rather than accumulating across calls.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=_default_dtype))
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} > 4")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"extent < 1 in dims {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values rejected at tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for op outputs: trusted dtype, no finite scan.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() on non-scalar tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic (same-shape tensors, or tensor op python scalar)
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
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), 1.0 / self.size)

    def relu(self) -> "Tensor":
        return relu(self)

    def softplus(self) -> "Tensor":
        return softplus(self)

    def abs(self) -> "Tensor":
        return absolute(self)


class Node:
    """One tape record: parent tensors and the rule mapping the output
    gradient to parent gradients (None for parents without gradient flow)."""

    __slots__ = ("op", "parents", "backward_fn", "out", "index")

    def __init__(self, op: str, parents: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
                 out: Tensor, index: int):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.out = out
        self.index = index


class Graph:
    """Append-only operation tape.

    Topological order equals append order: every parent of node i either is
    a leaf or was recorded at an index < i. The backward pass walks the node
    list in reverse, accumulating gradients additively in that fixed order,
    so replays are bit-identical.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._dtype = default_dtype()

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _graph_stack.pop()
        assert popped is self
        return False

    def _record(self, op: str, out: Tensor, parents: Sequence[Tensor], backward_fn):
        if out.data.dtype != self._dtype:
            raise ValueError("precision mode changed inside a recorded graph")
        node = Node(op, parents, backward_fn, out, len(self.nodes))
        for p in parents:
            pn = p._node
            assert pn is None or pn.index < node.index, "tape order violated"
            if p.requires_grad and pn is None and id(p) not in self._leaf_ids:
                self._leaf_ids.add(id(p))
                self.leaves.append(p)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dLeaf into ``leaf.grad`` for every registered leaf.

        The loss must be scalar. Leaves recorded on the tape but not on any
        path to the loss receive zero gradients.
        """
        if loss.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        start = loss._node.index if loss._node is not None else -1
        for node in reversed(self.nodes[: start + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else g


_graph_stack: list[Graph] = []


def active_graph() -> Graph | None:
    return _graph_stack[-1] if _graph_stack else None


# Discrete-branch tracing for gradient checking: ops with kinks (relu, abs,
# bilinear cells) publish which branch each element took, so a checker can
# reject finite-difference probes that cross a non-smooth boundary.
_kink_trace: list[bytes] | None = None


def trace_kinks(pattern: np.ndarray) -> None:
    if _kink_trace is not None:
        _kink_trace.append(pattern.tobytes())


def eval_with_kink_signature(f):
    """Run f() and return (value, signature of every kinked-op branch
    pattern encountered). Equal signatures at two nearby points mean no
    relu/abs/bilinear boundary separates them."""
    global _kink_trace
    saved = _kink_trace
    _kink_trace = []
    try:
        value = f()
        sig = b"\x00".join(_kink_trace)
    finally:
        _kink_trace = saved
    return value, sig


def record(op: str, out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; record a tape node if a graph is active and any
    parent carries gradient information."""
    out = Tensor._wrap(out_data)
    g = active_graph()
    if g is not None and any(p.requires_grad or p._node is not None for p in parents):
        g._record(op, out, parents, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: dims {a.dims} vs {b.dims}")


# ------------------------------------------------------------------
# elementwise / reduction primitives


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        c = float(b)
        return record("add_s", a.data + np.asarray(c, a.data.dtype), [a], lambda g: (g,))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return record("add", a.data + b.data, [a, b], lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        a_ = float(a)
        b = _as_tensor(b)
        return record("rsub_s", np.asarray(a_, b.data.dtype) - b.data, [b], lambda g: (-g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return record("sub", a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        c = np.asarray(float(b), a.data.dtype)
        return record("mul_s", a.data * c, [a], lambda g: (g * c,))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, [a, b], lambda g: (g * bd, g * ad))


def sum_all(x: Tensor) -> Tensor:
    xd = x.data
    return record("sum", xd.sum(dtype=xd.dtype).reshape(()), [x],
                  lambda g: (np.full(xd.shape, g, dtype=xd.dtype),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    trace_kinks(mask)
    return record("relu", np.maximum(xd, 0), [x], lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable logistic
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(np.asarray(0, xd.dtype), xd)
    return record("softplus", out, [x], lambda g: (g * _sigmoid(xd),))


def softplus_inverse(y: float) -> float:
    """Scalar inverse of log(1+exp(x)); used for bias initialisation."""
    return float(np.log(np.expm1(y)))


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    trace_kinks(xd >= 0)
    return record("abs", np.abs(xd), [x], lambda g: (g * np.sign(xd),))


def take(x: Tensor, indices) -> Tensor:
    """Gather from the flattened (row-major) tensor; returns a 1-D tensor.

    Gradient scatter-adds into the source positions, so repeated indices
    accumulate.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size < 1:
        raise ShapeError("take: indices must be a non-empty 1-D sequence")
    flat = x.data.reshape(-1)
    if idx.min() < 0 or idx.max() >= flat.size:
        raise IndexError(f"take: index out of range for size {flat.size}")
    shape = x.data.shape

    def bw(g):
        gx = np.zeros(flat.size, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx.reshape(shape),)

    return record("take", flat[idx].copy(), [x], bw)


def diff(x: Tensor, axis: int) -> Tensor:
    """Forward difference along a spatial axis (-1 or -2); output is one
    shorter on that axis. The last row/column therefore never appears."""
    if axis not in (-1, -2):
        raise ShapeError("diff: axis must be -1 or -2")
    xd = x.data
    if xd.ndim < 2 or xd.shape[axis] < 2:
        raise ShapeError(f"diff: extent {xd.shape} too small along axis {axis}")
    sl_hi = [slice(None)] * xd.ndim
    sl_lo = [slice(None)] * xd.ndim
    sl_hi[axis] = slice(1, None)
    sl_lo[axis] = slice(None, -1)
    sl_hi, sl_lo = tuple(sl_hi), tuple(sl_lo)
    out = xd[sl_hi] - xd[sl_lo]

    def bw(g):
        gx = np.zeros_like(xd)
        gx[sl_hi] += g
        gx[sl_lo] -= g
        return (gx,)

    return record("diff", out, [x], bw)


# ------------------------------------------------------------------
# convolution


def _im2col(xd: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N,C,Ho,Wo,k,k
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def _col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    blocks = cols.reshape(n, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += blocks[:, :, ki, kj]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, im2col + matmul.

    x: (N,C,H,W), w: (Co,C,k,k) with odd k, optional bias: (Co,).
    Differentiable w.r.t. x, w, and bias.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {xd.shape}/{wd.shape}")
    n, c, h, ww_in = xd.shape
    co, ci, kh, kw = wd.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if ci != c:
        raise ShapeError(f"conv2d: channel mismatch, input {c} vs weight {ci}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (ww_in + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent < 1 ({ho}x{wo})")
    if bias is not None and bias.dims != (co,):
        raise ShapeError(f"conv2d: bias dims {bias.dims} != ({co},)")

    cols = _im2col(xd, k, stride, pad)          # N, C*k*k, L
    wm = wd.reshape(co, -1)
    out = np.matmul(wm, cols)                   # N, Co, L
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, co, ho, wo)

    parents = [x, w] + ([bias] if bias is not None else [])

    def bw(g):
        gm = g.reshape(n, co, ho * wo)
        grad_w = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        grad_cols = np.matmul(wm.T, gm)
        grad_x = _col2im(grad_cols, xd.shape, k, stride, pad, ho, wo)
        if bias is not None:
            return grad_x, grad_w, gm.sum(axis=(0, 2))
        return grad_x, grad_w

    return record("conv2d", out, parents, bw)


# ------------------------------------------------------------------
# resolution changes


def _block_factor(factor: float) -> int:
    s = 1.0 / float(factor)
    b = int(round(s))
    if b < 1 or abs(s - b) > 1e-9 or (b & (b - 1)) != 0:
        raise ShapeError(f"resize_avg: factor {factor} is not 1/2^s")
    return b


def resize_avg(x: Tensor, factor: float) -> Tensor:
    """Non-overlapping block-mean downsampling by factor 1/2^s on the last
    two axes; gradient spreads uniformly over each block."""
    b = _block_factor(factor)
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError("resize_avg: need at least 2-D input")
    h, w = xd.shape[-2], xd.shape[-1]
    if b == 1:
        return record("resize_avg", xd.copy(), [x], lambda g: (g,))
    if h % b or w % b:
        raise ShapeError(f"resize_avg: extents {h}x{w} not divisible by {b}")
    lead = xd.shape[:-2]
    blocks = np.moveaxis(xd.reshape(lead + (h // b, b, w // b, b)), -3, -2)
    # flatten each block before reducing so the accumulation order matches
    # a plain block.mean() exactly
    out = blocks.reshape(lead + (h // b, w // b, b * b)).mean(axis=-1, dtype=xd.dtype)

    def bw(g):
        gb = np.broadcast_to(g[..., :, None, :, None] / (b * b),
                             lead + (h // b, b, w // b, b))
        return (gb.reshape(xd.shape).astype(xd.dtype, copy=False),)

    return record("resize_avg", out, [x], bw)


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    """Nearest-neighbour upsampling on the last two axes; gradient sums each
    scale x scale block."""
    if scale < 1:
        raise ShapeError("upsample_nearest: scale must be >= 1")
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError("upsample_nearest: need at least 2-D input")
    out = np.repeat(np.repeat(xd, scale, axis=-2), scale, axis=-1)
    h, w = xd.shape[-2], xd.shape[-1]
    lead = xd.shape[:-2]

    def bw(g):
        return (g.reshape(lead + (h, scale, w, scale)).sum(axis=(-3, -1)),)

    return record("upsample_nearest", out, [x], bw)
