"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is a tape of closures: every operation wraps its numpy forward
result in a :class:`Tensor` that remembers its parents and a backward
closure. ``backward()`` on a scalar loss topologically sorts the tape and
accumulates ``grad`` buffers on every tensor with ``requires_grad``. The
tape is rebuilt on every forward pass; a graph can be differentiated once.

All data is float64. Forward kernels are vectorized numpy and deterministic
for fixed inputs, so identical seeds replay bit-identically.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegeneracyWarning, DimensionError

NORM_EPS = 1e-12


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A dense float64 array plus an optional gradient tape node.

    Leaves are created directly (``Tensor(data, requires_grad=True)`` for
    parameters, ``requires_grad=False`` for constants). Operation results
    carry parent references and a backward closure; constants propagate
    through operations without recording anything.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"],
            backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result; skip the tape when no parent needs gradients."""
        tracked = tuple(p for p in parents if p.requires_grad or p._parents)
        out = Tensor(data)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The loss must be scalar, and the graph below it can only be
        traversed once; rebuild it with a fresh forward pass to
        differentiate again.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("backward() called twice on the same graph; re-run the forward pass")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._consumed = True
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        p = float(exponent)
        out_data = self.data ** p

        def backward(g, x=self, p=p):
            x._accumulate(g * p * x.data ** (p - 1.0))

        return Tensor._op(out_data, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    @property
    def T(self):
        return transpose2d(self)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# -- elementwise & reductions ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def backward(g, a=a, b=b):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def backward(g, a=a, b=b):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._op(out_data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g, x=x, out_data=out_data):
        x._accumulate(g * out_data)

    return Tensor._op(out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ContractError("log() requires strictly positive input")
    out_data = np.log(x.data)

    def backward(g, x=x):
        x._accumulate(g / x.data)

    return Tensor._op(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward(g, x=x):
        x._accumulate(g * (x.data > 0.0))

    return Tensor._op(out_data, (x,), backward)


def sum_(x: Tensor, axis=None) -> Tensor:
    out_data = x.data.sum(axis=axis)

    def backward(g, x=x, axis=axis):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            gk = np.expand_dims(g, axes)
            x._accumulate(np.broadcast_to(gk, x.data.shape).copy())

    return Tensor._op(out_data, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g, x=x):
        x._accumulate(g.reshape(x.data.shape))

    return Tensor._op(out_data, (x,), backward)


def transpose2d(x: Tensor) -> Tensor:
    """Swap the last two axes (plain transpose for 2-D, batched for 3-D)."""
    if x.ndim < 2:
        raise DimensionError("transpose needs at least 2 dimensions")
    out_data = np.swapaxes(x.data, -1, -2)

    def backward(g, x=x):
        x._accumulate(np.swapaxes(g, -1, -2))

    return Tensor._op(out_data, (x,), backward)


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g, a=a, b=b):
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor._op(out_data, (a, b), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: ``out[i] = sum_j weight[i, j] * x[j] + bias[i]``.

    Accepts a single vector ``[d_in]`` or a batch ``[B, d_in]``.
    """
    if weight.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got {weight.shape}")
    d_out, d_in = weight.shape
    if bias.shape != (d_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match weight rows {d_out}")
    single = x.ndim == 1
    if x.shape[-1] != d_in:
        raise DimensionError(f"input dim {x.shape[-1]} does not match weight cols {d_in}")
    xm = reshape(x, (1, d_in)) if single else x
    out = add(matmul(xm, transpose2d(weight)), bias)
    return reshape(out, (d_out,)) if single else out


# -- shape-preserving nonlinearities ---------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[axis] == 0:
        raise DimensionError("softmax needs a non-empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g, x=x, out_data=out_data, axis=axis):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - inner))

    return Tensor._op(out_data, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[axis] == 0:
        raise DimensionError("log_softmax needs a non-empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g, x=x, out_data=out_data, axis=axis):
        soft = np.exp(out_data)
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._op(out_data, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``.

    All-zero inputs fall back to dividing by ``eps`` and emit a
    DegeneracyWarning instead of producing NaN.
    """
    if x.data.shape[axis] == 0:
        raise DimensionError("l2_normalize needs a non-empty axis")
    norms = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    degenerate = norms <= eps
    if np.any(degenerate):
        warnings.warn("l2_normalize received a (near-)zero vector; using epsilon norm",
                      DegeneracyWarning, stacklevel=2)
    safe = np.maximum(norms, eps)
    out_data = x.data / safe

    def backward(g, x=x, out_data=out_data, safe=safe, degenerate=degenerate, axis=axis):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        full = (g - out_data * inner) / safe
        # below the epsilon floor the norm is constant, so the map is linear
        grad = np.where(degenerate, g / safe, full)
        x._accumulate(grad)

    return Tensor._op(out_data, (x,), backward)


# -- spatial ops --------------------------------------------------------------------


def _conv_cols(x: np.ndarray, k: int, stride: int, padding: int):
    """im2col: [B, C, H, W] -> ([B, C*k*k, H_out*W_out], H_out, W_out)."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, h_out * w_out)
    return np.ascontiguousarray(cols), h_out, w_out


def _cols_to_input(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int,
                   h_out: int, w_out: int) -> np.ndarray:
    """col2im: scatter-add column gradients back to input layout."""
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    d6 = dcols.reshape(b, c, k, k, h_out, w_out)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += d6[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of [C,H,W] or [B,C,H,W] input.

    weight is [C_out, C_in, k, k]; output spatial size is
    floor((H + 2*padding - k) / stride) + 1.
    """
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d weight must be [C_out, C_in, k, k], got {weight.shape}")
    xd = x.data[None] if single else x.data
    c_out, c_in, k, _ = weight.shape
    if xd.shape[1] != c_in:
        raise DimensionError(f"input channels {xd.shape[1]} do not match weight C_in {c_in}")
    if k > xd.shape[2] + 2 * padding or k > xd.shape[3] + 2 * padding:
        raise DimensionError("kernel larger than padded input")

    cols, h_out, w_out = _conv_cols(xd, k, stride, padding)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out_data = np.matmul(w2, cols).reshape(xd.shape[0], c_out, h_out, w_out)
    if single:
        out_data = out_data[0]

    def backward(g, x=x, weight=weight, cols=cols, w2=w2, xd_shape=xd.shape,
                 k=k, stride=stride, padding=padding, h_out=h_out, w_out=w_out,
                 c_out=c_out, single=single):
        gb = (g[None] if single else g).reshape(xd_shape[0], c_out, h_out * w_out)
        if weight.requires_grad or weight._parents:
            gw = np.einsum("bol,bpl->op", gb, cols)
            weight._accumulate(gw.reshape(weight.data.shape))
        if x.requires_grad or x._parents:
            dcols = np.matmul(w2.T, gb)
            dx = _cols_to_input(dcols, xd_shape, k, stride, padding, h_out, w_out)
            x._accumulate(dx[0] if single else dx)

    return Tensor._op(out_data, (x, weight), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide evenly."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    b, c, h, w = xd.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d needs dims divisible by {size}, got {h}x{w}")
    ho, wo = h // size, w // size
    win = xd.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if single:
        out_data = out_data[0]

    def backward(g, x=x, idx=idx, b=b, c=c, ho=ho, wo=wo, size=size, single=single):
        gb = g[None] if single else g
        dwin = np.zeros((b, c, ho, wo, size * size))
        np.put_along_axis(dwin, idx[..., None], gb[..., None], axis=-1)
        dx = dwin.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * size, wo * size)
        x._accumulate(dx[0] if single else dx)

    return Tensor._op(out_data, (x,), backward)


def mean_pool(x: Tensor) -> Tensor:
    """Global spatial mean: [C,H,W] -> [C] or [B,C,H,W] -> [B,C]."""
    if x.ndim == 3:
        return mean(x, axis=(1, 2))
    if x.ndim == 4:
        return mean(x, axis=(2, 3))
    raise DimensionError(f"mean_pool expects 3-D or 4-D input, got {x.shape}")


# -- selection -------------------------------------------------------------------


def pick(x: Tensor, index: int) -> Tensor:
    """Scalar entry of a vector, differentiable."""
    if x.ndim != 1:
        raise DimensionError(f"pick expects a vector, got {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise IndexError(f"pick index {index} out of range for length {x.shape[0]}")
    out_data = np.asarray(x.data[index])

    def backward(g, x=x, index=index):
        buf = np.zeros_like(x.data)
        buf[index] = g
        x._accumulate(buf)

    return Tensor._op(out_data, (x,), backward)


def pick_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Per-row entries of a matrix: out[b] = x[b, indices[b]]."""
    if x.ndim != 2:
        raise DimensionError(f"pick_rows expects a matrix, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise DimensionError("one index per row required")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise IndexError("pick_rows index out of range")
    rows = np.arange(x.shape[0])
    out_data = x.data[rows, idx].copy()

    def backward(g, x=x, idx=idx, rows=rows):
        buf = np.zeros_like(x.data)
        buf[rows, idx] = g
        x._accumulate(buf)

    return Tensor._op(out_data, (x,), backward)


# -- parameter helpers --------------------------------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def assert_finite(x: np.ndarray, context: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        from .errors import NumericFailure
        raise NumericFailure(f"non-finite values in {context}")
