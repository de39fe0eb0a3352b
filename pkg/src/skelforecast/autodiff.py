"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every differentiable operation computes its result with numpy, checks it for
NaN/Inf, and (when any input requires a gradient) appends a record to the
current thread's tape. ``Tensor.backward`` walks the tape in reverse and
accumulates gradients into the leaves that asked for them.

Only the operations the forecasting network needs are provided.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


class TapeUsageError(RuntimeError):
    """``backward`` was called on something it cannot differentiate."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered list of recorded operations.

    Inputs of a record are always produced by earlier records (or are
    leaves), so a single reverse sweep visits each operation exactly once.
    """

    records: list[_Record] = field(default_factory=list)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward: BackwardFn) -> None:
        self.records.append(_Record(out, inputs, backward))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: "Tensor", retain: bool = False) -> None:
        if loss.data.size != 1:
            raise TapeUsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeUsageError("loss does not depend on any tensor with requires_grad")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss._leaf:
            loss._accumulate(grads.pop(id(loss)))
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.data.shape:
                    raise DimensionError(
                        f"gradient shape {gi.shape} does not match input shape {inp.data.shape}"
                    )
                _check_finite(gi, "backward")
                if inp._leaf:
                    inp._accumulate(gi)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        if not retain:
            self.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def new_tape() -> Iterator[Tape]:
    """Record onto a fresh tape for the duration of the block."""
    previous = getattr(_local, "tape", None)
    tape = _local.tape = Tape()
    try:
        yield tape
    finally:
        _local.tape = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; results never require gradients."""
    previous = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


def _check_finite(arr: np.ndarray, where: str) -> None:
    # a reduction propagates any NaN/Inf; cheaper than an elementwise mask
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        raise NumericalError(f"non-finite values produced in {where}")


class Tensor:
    """Dense float64 array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, retain_tape: bool = False) -> None:
        """Populate ``.grad`` on every contributing leaf.

        The tape is cleared afterwards unless ``retain_tape`` is set.
        """
        current_tape().backward(self, retain=retain_tape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        current_tape().record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} are incompatible") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ----------------------------------------------------------------- reductions


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.full(a.shape, float(g) / n),),
        "mean",
    )


def mean_abs_error(x: Tensor, y) -> Tensor:
    """Mean over all elements of ``|x - y|``."""
    y = as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError(f"mean_abs_error: shapes {x.shape} and {y.shape} differ")
    diff = x.data - y.data
    sign = np.sign(diff)
    n = diff.size
    return _result(
        np.asarray(np.abs(diff).mean()),
        (x, y),
        lambda g: (sign * (float(g) / n), -sign * (float(g) / n)),
        "mean_abs_error",
    )


# ------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` broadcast over the leading dims of ``a``."""
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def pointwise_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` over the trailing axis (a 1x1 convolution)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"pointwise_linear: x {x.shape}, w {w.shape}, b {b.shape} are incompatible"
        )
    d_in, d_out = w.shape
    out = x.data @ w.data + b.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        return g @ w.data.T, x.data.reshape(-1, d_in).T @ g2, g2.sum(axis=0)

    return _result(out, (x, w, b), backward, "pointwise_linear")


def graph_propagate(adjacency: np.ndarray, x: Tensor) -> Tensor:
    """Mix node features with a constant matrix: ``out[..., u, :] = sum_j P[u, j] x[..., j, :]``."""
    p = np.asarray(adjacency, dtype=np.float64)
    if x.ndim < 2 or p.shape != (x.shape[-2], x.shape[-2]):
        raise DimensionError(f"graph_propagate: matrix {p.shape} does not fit features {x.shape}")
    return _result(p @ x.data, (x,), lambda g: (p.T @ g,), "graph_propagate")


def conv2d_causal_dilated(x: Tensor, w: Tensor, dilation_t: int = 1, channels_last: bool = False) -> Tensor:
    """2-D convolution, causal and dilated along time, valid along space.

    Args:
        x: input of shape ``(B, C_in, S, T)``, or ``(B, S, T, C_in)`` when
            ``channels_last`` is set.
        w: kernel of shape ``(C_out, C_in, ks, kt)``; tap ``kt - 1`` sees the
            current frame, tap ``0`` sees ``dilation_t * (kt - 1)`` frames back.
        dilation_t: spacing between temporal taps.

    Returns:
        Tensor of shape ``(B, C_out, S - ks + 1, T)`` (or ``(B, S - ks + 1, T, C_out)``).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {w.shape} must be 4-D")
    if channels_last:
        B, S, T, c_in = x.shape
        x_last = x.data
    else:
        B, c_in, S, T = x.shape
        x_last = x.data.transpose(0, 2, 3, 1)
    if w.shape[1] != c_in:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {w.shape} are incompatible")
    if dilation_t < 1 or int(dilation_t) != dilation_t:
        raise DimensionError(f"conv2d: dilation must be a positive integer, got {dilation_t}")
    c_out, _, ks, kt = w.shape
    pad = dilation_t * (kt - 1)
    if ks > S or kt > T + pad:
        raise DimensionError(f"conv2d: kernel {(ks, kt)} larger than padded input {(S, T + pad)}")
    s_out = S - ks + 1
    # im2col: cols[b, s, t, (ks, kt, c_in)] over the left-zero-padded input
    cols = np.zeros((B, s_out, T, ks, kt, c_in))
    for i in range(ks):
        for k in range(kt):
            shift = pad - k * dilation_t
            cols[:, :, shift:, i, k, :] = x_last[:, i : i + s_out, : T - shift, :]
    cols = cols.reshape(B * s_out * T, ks * kt * c_in)
    w_mat = w.data.transpose(2, 3, 1, 0).reshape(ks * kt * c_in, c_out)
    out = (cols @ w_mat).reshape(B, s_out, T, c_out)
    if not channels_last:
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        g_last = g if channels_last else g.transpose(0, 2, 3, 1)
        g_mat = g_last.reshape(-1, c_out)
        gw = (cols.T @ g_mat).reshape(ks, kt, c_in, c_out).transpose(3, 2, 0, 1)
        gcols = (g_mat @ w_mat.T).reshape(B, s_out, T, ks, kt, c_in)
        gx = np.zeros((B, S, T, c_in))
        for i in range(ks):
            for k in range(kt):
                shift = pad - k * dilation_t
                gx[:, i : i + s_out, : T - shift, :] += gcols[:, :, shift:, i, k, :]
        if not channels_last:
            gx = gx.transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw)

    return _result(out, (x, w), backward, "conv2d_causal_dilated")


def hamilton_product(a: Tensor, b: Tensor) -> Tensor:
    """Quaternion product over the trailing axis (scalar-first layout)."""
    if a.shape != b.shape or a.shape[-1] != 4:
        raise DimensionError(f"hamilton_product: shapes {a.shape} and {b.shape} are invalid")
    aw, ax, ay, az = np.moveaxis(a.data, -1, 0)
    bw, bx, by, bz = np.moveaxis(b.data, -1, 0)
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )

    def backward(g):
        gw, gx, gy, gz = np.moveaxis(g, -1, 0)
        ga = np.stack(
            [
                gw * bw + gx * bx + gy * by + gz * bz,
                -gw * bx + gx * bw - gy * bz + gz * by,
                -gw * by + gx * bz + gy * bw - gz * bx,
                -gw * bz - gx * by + gy * bx + gz * bw,
            ],
            axis=-1,
        )
        gb = np.stack(
            [
                gw * aw + gx * ax + gy * ay + gz * az,
                -gw * ax + gx * aw + gy * az - gz * ay,
                -gw * ay - gx * az + gy * aw + gz * ax,
                -gw * az + gx * ay - gy * ax + gz * aw,
            ],
            axis=-1,
        )
        return ga, gb

    return _result(out, (a, b), backward, "hamilton_product")


# ------------------------------------------------------------------ structure


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _result(out.copy(), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
        "transpose",
    )


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices have their gradients summed."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    onehot = np.zeros((idx.size, a.shape[axis]))
    onehot[np.arange(idx.size), idx.reshape(-1)] = 1.0

    def backward(g):
        g_flat = np.moveaxis(g, axis, -1).reshape(g.shape[:axis] + g.shape[axis + 1 :] + (idx.size,))
        return (np.ascontiguousarray(np.moveaxis(g_flat @ onehot, -1, axis)),)

    return _result(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing. Returns a copy."""
    out = np.array(a.data[index], dtype=np.float64)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[index] += g
        return (ga,)

    return _result(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def split_half(a: Tensor) -> tuple[Tensor, Tensor]:
    """Split the trailing channel axis into two equal halves."""
    c = a.shape[-1]
    if c % 2:
        raise DimensionError(f"split_half: odd channel count {c}")
    return getitem(a, (..., slice(0, c // 2))), getitem(a, (..., slice(c // 2, c)))


def normalize_last(a: Tensor) -> Tensor:
    """Scale each trailing-axis vector to unit Euclidean norm."""
    return div(a, sqrt(sum_(mul(a, a), axis=-1, keepdims=True)))


# -------------------------------------------------------------- serialization

MAGIC = b"SFTN"
VERSION = 1


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor container version {version}")
    offset = 12 + 8 * rank
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != offset + 8 * count:
        raise ValueError(f"payload holds {(len(buf) - offset) / 8} values, header says {count}")
    data = np.frombuffer(buf, dtype="<f8", offset=offset, count=count).astype(np.float64)
    return Tensor(data.reshape(shape))


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
