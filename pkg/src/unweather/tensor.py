"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays carry the data, and a
thread-local tape records one entry per differentiable operation.  Calling
:func:`backward` on a scalar replays the tape in reverse and accumulates
gradients into every ``requires_grad`` leaf.

Precision is configurable per tensor: float64 for verification (finite
difference checks are unreliable in float32) and float32 for training.
Broadcasting is restricted to scalar-vs-tensor; every other shape mismatch
raises :class:`~unweather.validation.DimensionError`.  Dedicated ops exist
for the two structured broadcasts the pipeline needs (bias over the last
axis, per-pixel scaling), so no silent numpy broadcasting is involved.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .validation import (
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericsError,
)

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array of reals with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are Python numbers, everything else must be a
    # same-shape Tensor.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class ComputationTape:
    """Ordered record of operations; replayed in reverse by :func:`backward`."""

    __slots__ = ("records",)

    def __init__(self):
        # each record: (output Tensor, tuple of input Tensors, backward rule)
        # the rule maps grad_out -> tuple of grads aligned with the inputs
        self.records = []

    def append(self, out, inputs, rule) -> None:
        self.records.append((out, inputs, rule))

    def reset(self) -> None:
        self.records.clear()

    def __len__(self):
        return len(self.records)


_local = threading.local()


def get_tape() -> ComputationTape:
    """Return the calling thread's active tape, creating it on first use."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = ComputationTape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    get_tape().reset()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording within the block (forward-only evaluation)."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def record(out: Tensor, inputs, rule) -> Tensor:
    """Attach a backward rule for ``out`` to the active tape.

    Composite operations in other modules use this to register a single
    fused backward pass.  ``rule(grad_out)`` must return one gradient array
    (or None) per input, in order.
    """
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        get_tape().append(out, tuple(inputs), rule)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls without clearing accumulate.  Only leaves keep their
    gradient; intermediate results are consumed during the replay.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    produced = {id(out) for out, _, _ in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, rule in reversed(tape.records):
        gout = grads.pop(id(out), None)
        if gout is None:
            continue
        for tensor, g in zip(inputs, rule(gout)):
            if g is None or not tensor.requires_grad:
                continue
            if id(tensor) in produced:
                key = id(tensor)
                grads[key] = grads[key] + g if key in grads else g
            else:
                tensor.grad = g if tensor.grad is None else tensor.grad + g
    # a loss that is itself a leaf parameter
    if loss.requires_grad and id(loss) not in produced:
        g = grads[id(loss)]
        loss.grad = g if loss.grad is None else loss.grad + g


def _as_tensor_operands(a, b, op):
    """Resolve the scalar-vs-tensor broadcast rule for a binary op."""
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} disagree")
        if a.dtype != b.dtype:
            raise DimensionError(f"{op}: dtypes {a.dtype} and {b.dtype} disagree")
        return a, b
    if a_t and np.isscalar(b):
        return a, None
    if b_t and np.isscalar(a):
        return b, None
    raise DimensionError(f"{op}: operands must be Tensors or scalars, got {type(a)}, {type(b)}")


def add(a, b) -> Tensor:
    x, y = _as_tensor_operands(a, b, "add")
    if y is None:
        scalar = b if isinstance(a, Tensor) else a
        out = Tensor(x.data + x.dtype.type(scalar))
        return record(out, (x,), lambda g: (g,))
    out = Tensor(x.data + y.data)
    return record(out, (x, y), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and np.isscalar(b):
        out = Tensor(a.data - a.dtype.type(b))
        return record(out, (a,), lambda g: (g,))
    if np.isscalar(a) and isinstance(b, Tensor):
        out = Tensor(b.dtype.type(a) - b.data)
        return record(out, (b,), lambda g: (-g,))
    x, y = _as_tensor_operands(a, b, "sub")
    out = Tensor(x.data - y.data)
    return record(out, (x, y), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    x, y = _as_tensor_operands(a, b, "mul")
    if y is None:
        scalar = b if isinstance(a, Tensor) else a
        c = x.dtype.type(scalar)
        out = Tensor(x.data * c)
        return record(out, (x,), lambda g: (g * c,))
    out = Tensor(x.data * y.data)
    return record(out, (x, y), lambda g: (g * y.data, g * x.data))


def scalar_mul(x: Tensor, c) -> Tensor:
    return mul(x, float(c))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient at 0 is 0
    return record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # stable two-sided evaluation
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    out = Tensor(out_data)
    return record(out, (x,), lambda g: (g * out_data * (1.0 - out_data),))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericsError("sqrt: negative input")
    out_data = np.sqrt(x.data)
    out = Tensor(out_data)
    return record(out, (x,), lambda g: (g * (0.5 / np.maximum(out_data, np.finfo(out_data.dtype).tiny)),))


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)
    return record(out, (x,), lambda g: (g * (2.0 * x.data),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.full_like(x.data, g / n),))


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.full_like(x.data, g),))


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(orig),))


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose2d: expected a matrix, got shape {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))
    return record(out, (x,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise DimensionError("matmul: both operands must be Tensors")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not compose")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtypes {a.dtype} and {b.dtype} disagree")
    out = Tensor(a.data @ b.data)
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_lastdim(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector over the last axis (the one structured broadcast we allow)."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_lastdim: bias shape {bias.shape} does not match last dim of {x.shape}")
    if x.dtype != bias.dtype:
        raise DimensionError(f"add_lastdim: dtypes {x.dtype} and {bias.dtype} disagree")
    out = Tensor(x.data + bias.data)
    axes = tuple(range(x.data.ndim - 1))
    return record(out, (x, bias), lambda g: (g, g.sum(axis=axes)))


def scale_lastdim(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x[..., c] by s[...] (per-position scaling shared over channels)."""
    if s.shape != x.shape[:-1]:
        raise DimensionError(f"scale_lastdim: scale shape {s.shape} must equal {x.shape[:-1]}")
    out = Tensor(x.data * s.data[..., None])
    return record(out, (x, s), lambda g: (g * s.data[..., None], (g * x.data).sum(axis=-1)))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax_lastdim: empty last dimension")
    if not np.all(np.isfinite(x.data)):
        raise NumericsError("softmax_lastdim: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)

    def rule(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - inner),)

    return record(out, (x,), rule)


def normalize_lastdim(x: Tensor) -> Tensor:
    """Divide by the sum over the last axis (for optional weight renormalization)."""
    s = x.data.sum(axis=-1, keepdims=True)
    out_data = x.data / s
    out = Tensor(out_data)

    def rule(g):
        return ((g - (g * out_data).sum(axis=-1, keepdims=True)) / s,)

    return record(out, (x,), rule)


def topk_lastdim(x: Tensor, k: int):
    """Top-k along the last axis: (indices, values), values descending.

    Ties break toward the lowest index; indices are a plain integer array
    (selection is not differentiable), values are a gathered Tensor whose
    gradient scatters back into x.
    """
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"topk_lastdim: K={k} out of range [1, {n}]")
    # stable sort of the negated values = descending with lowest-index ties
    order = np.argsort(-x.data, axis=-1, kind="stable")
    idx = np.ascontiguousarray(order[..., :k])
    return idx, take_lastdim(x, idx)


def take_lastdim(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis; indices must be distinct per slice."""
    if idx.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"take_lastdim: index shape {idx.shape} does not match {x.shape}")
    out = Tensor(np.take_along_axis(x.data, idx, axis=-1))

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=-1)
        return (gx,)

    return record(out, (x,), rule)


def _conv_geometry(x_shape, f_shape, stride):
    if len(f_shape) != 4 or f_shape[0] != f_shape[1]:
        raise DimensionError(f"conv2d: filter must be k x k x C_in x C_out, got {f_shape}")
    k = f_shape[0]
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size must be odd, got {k}")
    if len(x_shape) != 3 or x_shape[2] != f_shape[2]:
        raise DimensionError(
            f"conv2d: input shape {x_shape} incompatible with filter shape {f_shape}"
        )
    h, w, _ = x_shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    return k, ho, wo


def im2col(x: np.ndarray, k: int, stride: int = 1) -> np.ndarray:
    """Zero-padded 'same' patches as rows: (Ho*Wo, k*k*C)."""
    h, w, c = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    win = win[::stride, ::stride]  # (Ho, Wo, C, k, k)
    ho, wo = win.shape[0], win.shape[1]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, k * k * c)


def col2im(dcols: np.ndarray, x_shape, k: int, stride: int = 1) -> np.ndarray:
    """Scatter-add adjoint of :func:`im2col`."""
    h, w, c = x_shape
    pad = (k - 1) // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    d = dcols.reshape(ho, wo, k, k, c)
    dxp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += d[:, :, ki, kj]
    return dxp[pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, f: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D convolution, zero 'same' padding, optional bias, optional stride."""
    k, ho, wo = _conv_geometry(x.shape, f.shape, stride)
    if x.dtype != f.dtype:
        raise DimensionError(f"conv2d: dtypes {x.dtype} and {f.dtype} disagree")
    c_out = f.shape[3]
    cols = im2col(x.data, k, stride)
    fmat = f.data.reshape(-1, c_out)
    out_data = (cols @ fmat).reshape(ho, wo, c_out)
    inputs = (x, f)
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} must be ({c_out},)")
        out_data = out_data + bias.data
        inputs = (x, f, bias)
    out = Tensor(out_data)

    def rule(g):
        gmat = g.reshape(-1, c_out)
        gf = (cols.T @ gmat).reshape(f.shape)
        gcols = gmat @ fmat.T
        gx = col2im(gcols, x.shape, k, stride)
        if bias is not None:
            return gx, gf, g.sum(axis=(0, 1))
        return gx, gf

    return record(out, inputs, rule)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of an H x W x C tensor."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample2x: expected H x W x C, got shape {x.shape}")
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1))
    h, w, c = x.shape

    def rule(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return record(out, (x,), rule)


def parameter(data, dtype=np.float32) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
