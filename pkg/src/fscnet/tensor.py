"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major layout, between one and four
dimensions (vectors up to N,C,H,W batches). Every differentiable
operation records its inputs and a vector-Jacobian closure; calling
``backward`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into the ``grad`` field of
every leaf that requires them. Gradients add up across backward calls
until cleared, so gradient accumulation over micro-batches needs no
special casing.

Training code runs in float32. The same operations accept float64
tensors, which the gradient-check tests rely on for tight
finite-difference tolerances.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

Axis = int | tuple[int, ...] | None


class ShapeError(ValueError):
    """An operation rejected its inputs; the message names the offending dimension."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    """Backward-pass record: parent tensors plus the local vector-Jacobian product."""

    __slots__ = ("parents", "vjp")

    def __init__(self, parents: tuple["Tensor", ...], vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.parents = parents
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # floating ndarrays keep their precision (the 64-bit verification
        # path); everything else lands on the float32 training default
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ShapeError(f"tensors support 1..4 dimensions, got {arr.ndim}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    # ---- basic introspection -------------------------------------------------

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flags})"

    # ---- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Axis = None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    # ---- autodiff ----------------------------------------------------------------

    def backward(self, free_graph: bool = False) -> None:
        """Populate ``grad`` on every requires-grad leaf reachable from this scalar.

        Gradients accumulate additively across calls. ``free_graph`` drops the
        recorded closures as they are consumed, which caps memory during
        training but makes a second backward over the same graph impossible.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for p, pg in zip(t._node.parents, t._node.vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
            if free_graph:
                t._node = None


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape``, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_operand(x):
    """Return (value, tensor-or-None) for a Tensor / array / python scalar operand."""
    if isinstance(x, Tensor):
        return x.data, x
    return x, None


# ---- elementwise arithmetic -------------------------------------------------------


def add(a, b) -> Tensor:
    av, at = _as_operand(a)
    bv, bt = _as_operand(b)
    parents = tuple(t for t in (at, bt) if t is not None)

    def vjp(g):
        out = []
        if at is not None:
            out.append(_unbroadcast(g, at.shape))
        if bt is not None:
            out.append(_unbroadcast(g, bt.shape))
        return out

    return _result(np.add(av, bv), parents, vjp)


def sub(a, b) -> Tensor:
    av, at = _as_operand(a)
    bv, bt = _as_operand(b)
    parents = tuple(t for t in (at, bt) if t is not None)

    def vjp(g):
        out = []
        if at is not None:
            out.append(_unbroadcast(g, at.shape))
        if bt is not None:
            out.append(_unbroadcast(-g, bt.shape))
        return out

    return _result(np.subtract(av, bv), parents, vjp)


def mul(a, b) -> Tensor:
    av, at = _as_operand(a)
    bv, bt = _as_operand(b)
    parents = tuple(t for t in (at, bt) if t is not None)

    def vjp(g):
        out = []
        if at is not None:
            out.append(_unbroadcast(g * bv, at.shape))
        if bt is not None:
            out.append(_unbroadcast(g * av, bt.shape))
        return out

    return _result(np.multiply(av, bv), parents, vjp)


def div(a, b) -> Tensor:
    av, at = _as_operand(a)
    bv, bt = _as_operand(b)
    parents = tuple(t for t in (at, bt) if t is not None)

    def vjp(g):
        out = []
        if at is not None:
            out.append(_unbroadcast(g / bv, at.shape))
        if bt is not None:
            out.append(_unbroadcast(-g * av / (bv * bv), bt.shape))
        return out

    return _result(np.divide(av, bv), parents, vjp)


def neg(a: Tensor) -> Tensor:
    return _result(np.negative(a.data), (a,), lambda g: (-g,))


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda g: (g * out_data,))


def tlog(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # exp is only ever taken of a non-positive argument, so no overflow at any |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_stable(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at the kink, matching the usual convention
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


# ---- reductions and reshaping ----------------------------------------------------


def _norm_axis(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out_data, (a,), vjp)


def tmean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out_data, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ---- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape[1]} vs {b.shape[0]}")

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result(a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x [N,F_in], weight [F_out,F_in]."""
    if x.ndim != 2:
        raise ShapeError(f"linear expects a 2-D input, got {x.shape}")
    if weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear weight {weight.shape} does not match input features {x.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias {bias.shape} does not match output features {weight.shape[0]}")
    out_data = x.data @ weight.data.T + bias.data

    def vjp(g):
        return (g @ weight.data if x.requires_grad else None,
                g.T @ x.data if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _result(out_data, (x, weight, bias), vjp)


# ---- convolution and friends -------------------------------------------------------


def conv_output_size(extent: int, kernel_size: int, stride: int, dilation: int, padding: int) -> int:
    return (extent + 2 * padding - dilation * (kernel_size - 1) - 1) // stride + 1


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Dilated 2-D cross-correlation with zero padding.

    x [N,C_in,H,W], weight [C_out,C_in,k,k], bias [C_out]. The sliding
    window samples the padded input at spacing ``dilation``. Implemented as
    one GEMM per kernel tap so the hot path stays inside BLAS without
    materialising a full im2col matrix.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D N,C,H,W input, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d expects a square [out,in,k,k] kernel, got {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_k, k, _ = weight.shape
    if c_in != c_k:
        raise ShapeError(f"conv2d input has {c_in} channels but kernel expects {c_k}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match {c_out} output channels")
    h_out = conv_output_size(h, k, stride, dilation, padding)
    w_out = conv_output_size(w, k, stride, dilation, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d output would be {h_out}x{w_out} for input {h}x{w} "
            f"(k={k}, stride={stride}, dilation={dilation}, padding={padding})")

    xp = _pad_hw(x.data, padding)
    acc = np.zeros((n, h_out, w_out, c_out), dtype=xp.dtype)
    for r in range(k):
        for s in range(k):
            sl = xp[:, :, r * dilation: r * dilation + stride * h_out: stride,
                    s * dilation: s * dilation + stride * w_out: stride]
            acc += np.tensordot(sl, weight.data[:, :, r, s], axes=([1], [1]))
    acc += bias.data
    out_data = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

    def vjp(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # N,H',W',C_out
        dx = dw = db = None
        if bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if weight.requires_grad:
            xp_b = _pad_hw(x.data, padding)
            dw = np.empty_like(weight.data)
            for r in range(k):
                for s in range(k):
                    sl = xp_b[:, :, r * dilation: r * dilation + stride * h_out: stride,
                              s * dilation: s * dilation + stride * w_out: stride]
                    dw[:, :, r, s] = np.tensordot(gt, sl, axes=([0, 1, 2], [0, 2, 3]))
        if x.requires_grad:
            dxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for r in range(k):
                for s in range(k):
                    contrib = np.tensordot(gt, weight.data[:, :, r, s], axes=([3], [0]))
                    dxp[:, :, r * dilation: r * dilation + stride * h_out: stride,
                        s * dilation: s * dilation + stride * w_out: stride] += \
                        contrib.transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding: padding + h, padding: padding + w] if padding else dxp
        return dx, dw, db

    return _result(out_data, (x, weight, bias), vjp)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, eps: float = 1e-5, momentum: float = 0.1,
                training: bool = True) -> Tensor:
    """Per-channel batch normalization over N,H,W.

    Training mode normalizes with the biased batch statistics and folds them
    into the running buffers in place; eval mode normalizes with the running
    buffers. ``eps`` keeps the denominator away from zero at zero variance.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a 4-D N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine parameters sized {gamma.shape} for {c} channels")
    if training:
        if n * h * w < 2:
            raise ShapeError(f"batchnorm2d needs at least 2 values per channel in training mode, "
                             f"got N*H*W = {n * h * w}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased estimator, also for the running update
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def vjp(g):
        xh = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        dgamma = (g * xh).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            if training:
                gx = g * gamma.data[None, :, None, None]
                m1 = gx.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gx * xh).mean(axis=(0, 2, 3), keepdims=True)
                dx = inv[None, :, None, None] * (gx - m1 - xh * m2)
            else:
                dx = g * (gamma.data * inv)[None, :, None, None]
        return dx, dgamma, dbeta

    return _result(out_data, (x, gamma, beta), vjp)


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    """Stack feature maps along the channel dimension, preserving argument order."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat_channels needs at least one input")
    first = ts[0]
    for t in ts[1:]:
        if t.ndim != 4 or first.ndim != 4:
            raise ShapeError("concat_channels expects 4-D N,C,H,W inputs")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels spatial/batch mismatch: {first.shape} vs {t.shape}")
    if len(ts) == 1:
        t = ts[0]
        return _result(t.data.copy(), (t,), lambda g: (g,))
    out_data = np.concatenate([t.data for t in ts], axis=1)
    sizes = [t.shape[1] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offsets[i]: offsets[i + 1]] for i in range(len(ts)))

    return _result(out_data, tuple(ts), vjp)


def adaptive_avg_pool_1x1(x: Tensor) -> Tensor:
    """Global average over H,W, flattened to [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool_1x1 expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _result(out_data, (x,), vjp)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def apply_op(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Build a graph node for a custom primitive (used by layers and losses)."""
    return _result(data, parents, vjp)
