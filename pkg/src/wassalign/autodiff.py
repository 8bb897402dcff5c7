"""Dense tensors and a reverse-mode differentiation tape.

Every op returns a new immutable :class:`Tensor`. When a :class:`Tape` is
active and at least one input is tracked (a :class:`Parameter` or the output
of an op recorded on that tape), the op appends a :class:`TapeNode` holding
its inputs and a closure that maps the output gradient to input gradients.

Typical use::

    with Tape() as tape:
        loss = model_loss(params)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "TapeNode",
    "GradCheckReport",
    "backward",
    "finite_difference_check",
    "no_nonfinite",
]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-dimensional float array (float32 or float64)."""

    __slots__ = ("data", "node")

    def __init__(self, data: ArrayLike, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is None and (arr.dtype.kind in "iub" or arr.size == 0):
                arr = arr.astype(np.float64)
            else:
                raise TypeError(f"unsupported tensor dtype {arr.dtype}; use float32 or float64")
        arr.setflags(write=False)
        self.data = arr
        self.node: Optional[TapeNode] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t.data = arr
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = " tracked" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf tensor with an accumulated gradient of the same shape."""

    __slots__ = ("name", "grad")

    def __init__(self, data: ArrayLike, name: str = "", dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = np.zeros(self.data.shape, dtype=self.data.dtype)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"{self.name}: cannot assign shape {value.shape} to {self.data.shape}")
        arr = np.array(value, copy=True)
        arr.setflags(write=False)
        self.data = arr

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass(eq=False)
class TapeNode:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]
    tape: "Tape"
    index: int


class Tape:
    """Append-only record of one forward pass, confined to one thread."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._thread = threading.get_ident()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t) -> bool:
        if not isinstance(t, Tensor):
            return False
        if isinstance(t, Parameter):
            return True
        return t.node is not None and t.node.tape is self

    def record(self, kind: str, inputs: tuple, output: Tensor, bwd) -> None:
        if threading.get_ident() != self._thread:
            raise RuntimeError("a Tape may only be used by the thread that created it")
        node = TapeNode(kind, inputs, output, bwd, self, len(self.nodes))
        self.nodes.append(node)
        output.node = node

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(parameter) into every reachable Parameter.grad."""
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor")
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if isinstance(loss, Parameter):
            loss.grad += 1
            return
        if loss.node is None or loss.node.tape is not self:
            raise ValueError("backward called on a tensor that is not on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.nodes[: loss.node.index + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not self.tracks(inp):
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Backpropagate from ``loss`` on the tape that produced it."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None and not isinstance(loss, Parameter):
        raise ValueError("backward called on a tensor that is not on any tape")
    if isinstance(loss, Parameter):
        loss.grad += 1
        return
    loss.node.tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def _emit(kind: str, out: np.ndarray, inputs: tuple, bwd) -> Tensor:
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        tape.record(kind, inputs, t, bwd)
    return t


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _binary_operands(kind: str, a, b) -> tuple[Tensor, Tensor, tuple]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{kind}: at least one operand must be a Tensor")
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    if a.dtype != b.dtype:
        raise TypeError(f"{kind}: dtype mismatch {a.dtype} vs {b.dtype}")
    return a, b, _broadcast_shape(kind, a.shape, b.shape)


def _broadcast_shape(kind: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {sa} and {sb}") from None
    # one side must already have the result shape: scalars, missing leading
    # dims and keepdims-style singleton axes only
    if out != sa and out != sb:
        raise ValueError(f"{kind}: two-sided broadcasting of {sa} and {sb} is not supported")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b, _ = _binary_operands("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands("mul", a, b)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b, _ = _binary_operands("div", a, b)
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _emit("div", out, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    return _emit("square", x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g: (g / (2 * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if _broadcast_shape("broadcast", x.shape, shape) != shape:
        raise ValueError(f"broadcast: cannot broadcast {x.shape} to {shape}")
    out = np.broadcast_to(x.data, shape).copy()
    return _emit("broadcast", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ValueError(f"mean: empty reduction over axes {axes} of shape {x.shape}")
    out = x.data.mean(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    scale = x.dtype.type(1.0 / count)

    def bwd(g):
        return (np.broadcast_to(g.reshape(kept) * scale, x.shape).copy(),)

    return _emit("mean", np.asarray(out, dtype=x.dtype), (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: no tensors given")
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"concat: dtype mismatch {sorted(map(str, dtypes))}")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ValueError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tensors, bwd)


def index_select(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ValueError(f"index-select: index out of range for axis {axis} of shape {x.shape}")
    out = np.take(x.data, idx, axis=axis)

    def bwd(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit("index-select", out, (x,), bwd)


def sort_with_indices(x: Tensor, axis: int = 0) -> tuple[Tensor, np.ndarray]:
    """Stable ascending sort; backward routes gradients through the fixed permutation."""
    axis = axis % x.ndim
    order = np.argsort(x.data, axis=axis, kind="stable")
    out = np.take_along_axis(x.data, order, axis=axis)

    def bwd(g):
        gx = np.empty(x.shape, dtype=x.dtype)
        np.put_along_axis(gx, order, g, axis=axis)
        return (gx,)

    return _emit("sort-with-indices", out, (x,), bwd), order


def inner(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis."""
    a, b, _ = _binary_operands("inner-product", a, b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ValueError(f"inner-product: last axes differ, {a.shape} vs {b.shape}")
    out = (a.data * b.data).sum(axis=-1)

    def bwd(g):
        ge = g[..., None]
        return _unbroadcast(ge * b.data, a.shape), _unbroadcast(ge * a.data, b.shape)

    return _emit("inner-product", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), bwd)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with w[O,C,kh,kw] (no bias)."""
    if x.dtype != w.dtype:
        raise TypeError(f"conv2d: dtype mismatch {x.dtype} vs {w.dtype}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or padding {padding}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # cols: [N, Ho, Wo, C*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)

    def bwd(g):
        gt = g.transpose(0, 2, 3, 1)  # [N,Ho,Wo,O]
        gw = (gt.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(w.shape)
        gcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        return gxp, gw

    return _emit("conv2d", out, (x, w), bwd)


def max_pool2d(x: Tensor, size: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or size
    if x.ndim != 4:
        raise ValueError(f"max-pool: expected [N,C,H,W], got {x.shape}")
    n, c, h, wd = x.shape
    ho, wo = _conv_out(h, size, stride, 0), _conv_out(wd, size, stride, 0)
    if ho < 1 or wo < 1:
        raise ValueError(f"max-pool: window {size} too large for input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (size, size), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        di, dj = np.divmod(arg, size)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (nn_[..., None, None], cc[..., None, None], rows, cols), g)
        return (gx,)

    return _emit("max-pool", out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax of logits along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def bwd(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _emit("softmax-logits", out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> np.ndarray:
    """Untracked softmax probabilities (evaluation only)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def no_nonfinite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{what}: non-finite values produced")
    return t


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    max_error: float
    tolerance: float
    passed: bool = field(default=False)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}: max relative error {self.max_error:.3e} (tol {self.tolerance:g}, {self.rel_errors.size} coords)"


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    at: ArrayLike,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    coords: Optional[Sequence[int]] = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``at`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps coordinates whose true gradient is zero from dividing by rounding noise.
    ``coords`` restricts the check to a subset of flat indices.
    """
    x0 = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    if isinstance(at, Tensor) and at.dtype != np.float64:
        raise TypeError("finite_difference_check requires float64 inputs")
    leaf = Parameter(x0, name="gradcheck")
    with Tape() as tape:
        out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("finite_difference_check: f must return a scalar Tensor")
    tape.backward(out)
    analytic_full = leaf.grad.reshape(-1)

    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = np.empty(idx.size)
    for n, i in enumerate(idx):
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric[n] = (fp - fm) / (2 * step)
    analytic = analytic_full[idx]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    max_err = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(analytic, numeric, rel, max_err, tolerance, max_err < tolerance)
