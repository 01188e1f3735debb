"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array and a
:class:`Tape` records one entry per differentiable operation in execution
order.  Because entries are appended as they are created, the record list is
already a topological order of the computation, and ``backward`` simply
replays it in reverse, visiting every entry exactly once.  A tape is built
fresh for every forward pass; there is no graph reuse between passes.

Numeric conventions shared by the whole package live here as well: values
are kept in double precision, ``sign(0)`` is ``+1``, and every forward
result is checked to be finite (NaN or Inf anywhere is an error state, not
a value).  The only broadcast supported is the map-times-tensor rule of
:func:`hadamard`; everything else requires exact shape agreement.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NumericError

_GradFn = Callable[[np.ndarray], np.ndarray]

_local = threading.local()


def _stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> "Tape | None":
    """Innermost tape currently recording on this thread, if any."""
    stack = _stack()
    return stack[-1] if stack else None


def sign_pm1(values: np.ndarray | float) -> np.ndarray:
    """Sign with the package-wide convention sign(0) := +1."""
    return np.where(np.asarray(values, dtype=np.float64) >= 0.0, 1.0, -1.0)


def _require_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{op}: result contains NaN or Inf")


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    Attributes:
        data: the value, always a float64 ndarray.
        grad: gradient buffer of the same shape, populated by backward().
        requires_grad: whether gradients should flow into this tensor.
        node: index of the tape record that produced this tensor, or None
            for leaves and constants.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Wrap values as a constant (or leaf) tensor, checking finiteness."""
    out = Tensor(values, requires_grad=requires_grad)
    _require_finite(out.data, "tensor")
    return out


def parameter(values) -> Tensor:
    """Wrap values as a trainable leaf tensor."""
    return tensor(values, requires_grad=True)


class _Record:
    __slots__ = ("out", "inputs")

    def __init__(self, out: Tensor, inputs: list[tuple[Tensor, _GradFn]]):
        self.out = out
        self.inputs = inputs


class Tape:
    """Execution-ordered record of differentiable operations.

    Used as a context manager around a forward pass; operations executed
    while the tape is active are recorded when any input requires a
    gradient.  Operations executed with no active tape are plain numpy
    evaluations, which is the fast path for inference.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _stack().pop()
        return False

    def _add(self, out: Tensor, inputs: list[tuple[Tensor, _GradFn]]) -> None:
        out.requires_grad = True
        out.node = len(self._records)
        self._records.append(_Record(out, inputs))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad with d(loss)/d(tensor) for every recorded tensor.

        The seed must be a scalar.  Grad buffers of all tensors touched by
        this tape are reset first, so leaves recorded on the tape but not on
        any path to the loss end with an all-zero gradient.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward: seed must be scalar, got shape {loss.shape}")
        for rec in self._records:
            rec.out.grad = np.zeros_like(rec.out.data)
            for tens, _ in rec.inputs:
                tens.grad = np.zeros_like(tens.data)
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            out_grad = rec.out.grad
            for tens, grad_fn in rec.inputs:
                tens.grad += grad_fn(out_grad)


def _result(op: str, data: np.ndarray, inputs: Sequence[tuple[Tensor, _GradFn]]) -> Tensor:
    _require_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        tracked = [(tens, fn) for tens, fn in inputs if tens.requires_grad]
        if tracked:
            tape._add(out, tracked)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result("add", a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of two equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result("sub", a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply every entry by a python scalar."""
    factor = float(factor)
    return _result("scale", a.data * factor, [(a, lambda g: g * factor)])


def add_scalar(a: Tensor, shift: float) -> Tensor:
    """Add a python scalar to every entry."""
    shift = float(shift)
    return _result("add_scalar", a.data + shift, [(a, lambda g: g)])


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.

    Shapes must match exactly, with one exception: a rank-2 map [H, W] may
    multiply a rank-3 tensor [H, W, C], scaling every channel fiber by the
    map.  That is the only broadcast this engine supports.
    """
    if a.shape == b.shape:
        return _result(
            "hadamard",
            a.data * b.data,
            [(a, lambda g: g * b.data), (b, lambda g: g * a.data)],
        )
    if a.data.ndim == 2 and b.data.ndim == 3 and a.shape == b.shape[:2]:
        plane, full = a, b
    elif b.data.ndim == 2 and a.data.ndim == 3 and b.shape == a.shape[:2]:
        plane, full = b, a
    else:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} are incompatible")
    data = full.data * plane.data[:, :, None]
    return _result(
        "hadamard",
        data,
        [
            (full, lambda g: g * plane.data[:, :, None]),
            (plane, lambda g: np.sum(g * full.data, axis=2)),
        ],
    )


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = a.data > 0.0
    return _result("relu", np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def tanh(a: Tensor) -> Tensor:
    """Elementwise hyperbolic tangent."""
    out_data = np.tanh(a.data)
    return _result("tanh", out_data, [(a, lambda g: g * (1.0 - out_data**2))])


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function, computed via tanh for stability."""
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result("sigmoid", out_data, [(a, lambda g: g * out_data * (1.0 - out_data))])


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; any negative input is a domain error.

    The derivative is unbounded at exactly zero; differentiable callers
    should shift by a small constant first (see the diversity losses).
    """
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    out_data = np.sqrt(a.data)

    def back(g: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return g * (0.5 / out_data)

    return _result("sqrt", out_data, [(a, back)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul: rank-2 operands required, got ranks {a.data.ndim} and {b.data.ndim}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents {a.shape[1]} and {b.shape[0]} differ")
    return _result(
        "matmul",
        a.data @ b.data,
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
    )


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two rank-1 tensors, returning a scalar tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("dot: rank-1 operands required")
    if a.size != b.size:
        raise DimensionError(f"dot: lengths {a.size} and {b.size} differ")
    return _result(
        "dot",
        np.asarray(a.data @ b.data),
        [(a, lambda g: g * b.data), (b, lambda g: g * a.data)],
    )


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-1 tensors into one longer vector."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: at least one input required")
    for part in parts:
        if part.data.ndim != 1:
            raise DimensionError(f"concat: rank-1 inputs required, got shape {part.shape}")
    data = np.concatenate([part.data for part in parts])
    grads: list[tuple[Tensor, _GradFn]] = []
    start = 0
    for part in parts:
        stop = start + part.size
        grads.append((part, lambda g, s=start, e=stop: g[s:e]))
        start = stop
    return _result("concat", data, grads)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """View the tensor under a new shape with the same number of entries."""
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result("reshape", data, [(a, lambda g: g.reshape(a.shape))])


def sum_all(a: Tensor) -> Tensor:
    """Sum every entry into a scalar tensor."""
    return _result(
        "sum_all",
        np.asarray(a.data.sum()),
        [(a, lambda g: g * np.ones_like(a.data))],
    )


def channel_sum(a: Tensor) -> Tensor:
    """Sum a rank-3 tensor [H, W, C] over channels into a map [H, W]."""
    if a.data.ndim != 3:
        raise DimensionError(f"channel_sum: rank-3 input required, got shape {a.shape}")
    return _result(
        "channel_sum",
        a.data.sum(axis=2),
        [(a, lambda g: np.broadcast_to(g[:, :, None], a.shape))],
    )


def channel_slice(a: Tensor, index: int) -> Tensor:
    """Extract channel ``index`` of a rank-3 tensor [H, W, C] as a map."""
    if a.data.ndim != 3:
        raise DimensionError(f"channel_slice: rank-3 input required, got shape {a.shape}")
    index = int(index)
    if not 0 <= index < a.shape[2]:
        raise DimensionError(f"channel_slice: index {index} out of range for {a.shape[2]} channels")

    def back(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(a.data)
        full[:, :, index] = g
        return full

    return _result("channel_slice", a.data[:, :, index].copy(), [(a, back)])


def softmax(a: Tensor) -> Tensor:
    """Softmax over a nonempty rank-1 tensor, computed with the max shift."""
    if a.data.ndim != 1 or a.size == 0:
        raise DimensionError(f"softmax: nonempty rank-1 input required, got shape {a.shape}")
    shifted = a.data - a.data.max()
    exps = np.exp(shifted)
    probs = exps / exps.sum()

    def back(g: np.ndarray) -> np.ndarray:
        return probs * (g - np.dot(g, probs))

    return _result("softmax", probs, [(a, back)])


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the spatial extents of a rank-3 tensor [H, W, C] -> [C]."""
    if a.data.ndim != 3:
        raise DimensionError(f"global_avg_pool: rank-3 input required, got shape {a.shape}")
    height, width, _ = a.shape
    inv = 1.0 / (height * width)
    return _result(
        "global_avg_pool",
        a.data.mean(axis=(0, 1)),
        [(a, lambda g: np.broadcast_to(g[None, None, :] * inv, a.shape))],
    )


def avg_pool2(a: Tensor, factor: int = 2) -> Tensor:
    """Mean-pool spatial extents by an integer factor (channels preserved)."""
    if a.data.ndim != 3:
        raise DimensionError(f"avg_pool2: rank-3 input required, got shape {a.shape}")
    factor = int(factor)
    if factor < 1:
        raise DimensionError(f"avg_pool2: factor must be >= 1, got {factor}")
    height, width, channels = a.shape
    if height % factor or width % factor:
        raise DimensionError(f"avg_pool2: extents {height}x{width} not divisible by {factor}")
    out_h, out_w = height // factor, width // factor
    data = a.data.reshape(out_h, factor, out_w, factor, channels).mean(axis=(1, 3))
    inv = 1.0 / (factor * factor)

    def back(g: np.ndarray) -> np.ndarray:
        tiled = np.broadcast_to(
            g[:, None, :, None, :] * inv, (out_h, factor, out_w, factor, channels)
        )
        return tiled.reshape(height, width, channels)

    return _result("avg_pool2", data, [(a, back)])


def bias_add(a: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias vector [C] to a rank-3 tensor [H, W, C]."""
    if a.data.ndim != 3 or bias.data.ndim != 1:
        raise DimensionError(
            f"bias_add: expected rank-3 tensor and rank-1 bias, got {a.shape} and {bias.shape}"
        )
    if a.shape[2] != bias.size:
        raise DimensionError(f"bias_add: {a.shape[2]} channels vs bias length {bias.size}")
    return _result(
        "bias_add",
        a.data + bias.data[None, None, :],
        [(a, lambda g: g), (bias, lambda g: g.sum(axis=(0, 1)))],
    )


def conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Same-padding stride-1 2-D convolution (ML convention, no kernel flip).

    Args:
        x: input tensor [H, W, Cin].
        kernels: filter bank [kh, kw, Cin, Cout] with odd kh and kw.

    Returns:
        Tensor [H, W, Cout]; positions outside the frame contribute zero.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d: rank-3 input required, got shape {x.shape}")
    if kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: rank-4 kernels required, got shape {kernels.shape}")
    height, width, c_in = x.shape
    k_h, k_w, k_cin, c_out = kernels.shape
    if k_h % 2 == 0 or k_w % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents {k_h}x{k_w} must be odd")
    if k_cin != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernels expect {k_cin}")
    pad_h, pad_w = k_h // 2, k_w // 2
    padded = np.zeros((height + k_h - 1, width + k_w - 1, c_in))
    padded[pad_h : pad_h + height, pad_w : pad_w + width] = x.data
    k_data = kernels.data
    out = np.zeros((height, width, c_out))
    for off_i in range(k_h):
        for off_j in range(k_w):
            patch = padded[off_i : off_i + height, off_j : off_j + width].reshape(-1, c_in)
            out += (patch @ k_data[off_i, off_j]).reshape(height, width, c_out)

    def back_x(g: np.ndarray) -> np.ndarray:
        grad_pad = np.zeros_like(padded)
        g_mat = g.reshape(-1, c_out)
        for off_i in range(k_h):
            for off_j in range(k_w):
                grad_pad[off_i : off_i + height, off_j : off_j + width] += (
                    g_mat @ k_data[off_i, off_j].T
                ).reshape(height, width, c_in)
        return grad_pad[pad_h : pad_h + height, pad_w : pad_w + width]

    def back_k(g: np.ndarray) -> np.ndarray:
        grad_k = np.empty_like(k_data)
        g_mat = g.reshape(-1, c_out)
        for off_i in range(k_h):
            for off_j in range(k_w):
                patch = padded[off_i : off_i + height, off_j : off_j + width].reshape(-1, c_in)
                grad_k[off_i, off_j] = patch.T @ g_mat
        return grad_k

    return _result("conv2d", out, [(x, back_x), (kernels, back_k)])
