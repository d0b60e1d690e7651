"""Minimal reverse-mode autodiff over double-precision numpy arrays.

A :class:`Tensor` wraps a contiguous float64 array.  Operations executed
while a :class:`Tape` is active are recorded in program order; since every
operand must exist before it is used, the tape is always topologically
sorted and :func:`backward` is a single reverse sweep that visits each
recorded operation exactly once.

Broadcasting is deliberately restricted: the only implicit shape coercion
is a bias add along the last dimension (``(n, d) + (1, d)`` or ``(d,)``).
Everything else must match exactly or raises :class:`ShapeError`.

Dropout takes an externally supplied 0/1 mask with inverted scaling so
tests can freeze masks; callers draw masks from their own seeded RNG.
"""
from __future__ import annotations

import struct
import threading
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "narrow",
    "reshape",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "cross_entropy_with_logits",
    "tsum",
    "tmean",
    "dropout",
    "embedding",
    "write_tensor",
    "read_tensor",
]


class Tensor:
    """A shape-tagged float64 array that can participate in backprop."""

    __slots__ = ("values", "requires_grad", "grad", "tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            # keep rank-0 tensors rank 0: ascontiguousarray would promote them
            arr = np.ascontiguousarray(arr)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations; confined to one thread."""

    __slots__ = ("_ops",)

    def __init__(self):
        # (output, parents, backward_fn); backward_fn maps the output
        # gradient to one gradient array (or None) per parent.
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._ops)


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape = tape
        tape._ops.append((out, parents, backward_fn))
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every recorded tensor."""
    if root.shape != ():
        raise GraphError(f"backward root must be a scalar, got shape {root.shape}")
    if root.tape is None:
        raise GraphError("backward root was not produced on an active tape")
    root.grad = np.ones((), dtype=np.float64)
    for out, parents, backward_fn in reversed(root.tape._ops):
        g = out.grad
        if g is None:
            continue
        for parent, pg in zip(parents, backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.values)
            parent.grad += pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a bias row broadcast along the last dim."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        out = Tensor(a.values + b.values)
        return _record(out, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.shape in ((1, a.shape[1]), (a.shape[1],)):
        out = Tensor(a.values + b.values.reshape(1, -1))

        def bwd(g):
            return g, g.sum(axis=0).reshape(b.shape)

        return _record(out, (a, b), bwd)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values * b.values)
    return _record(out, (a, b), lambda g: (g * b.values, g * a.values))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.values * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values @ b.values)
    return _record(out, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` (the slice op)."""
    a = _as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for axis {axis} of {a.shape}"
        )
    index = [slice(None)] * a.values.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.values[index])

    def bwd(g):
        full = np.zeros_like(a.values)
        full[index] = g
        return (full,)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = Tensor(a.values.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(_sigmoid_values(a.values))
    return _record(out, (a,), lambda g: (g * out.values * (1.0 - out.values),))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    z[~pos] = ex / (1.0 + ex)
    return z


def log_sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-np.logaddexp(0.0, -a.values))
    return _record(out, (a,), lambda g: (g * _sigmoid_values(-a.values),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.tanh(a.values))
    return _record(out, (a,), lambda g: (g * (1.0 - out.values * out.values),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.values))
    return _record(out, (a,), lambda g: (g * out.values,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.values))
    return _record(out, (a,), lambda g: (g / a.values,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stabilised)."""
    a = _as_tensor(a)
    out = Tensor(softmax_values(a.values))

    def bwd(g):
        p = out.values
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), bwd)


def softmax_values(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(log_softmax_values(a.values))

    def bwd(g):
        return (g - np.exp(out.values) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), bwd)


def log_softmax_values(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """``-sum(target * log_softmax(logits))`` for one distribution row.

    ``target`` must be a probability vector; the fused backward pass uses the
    exact softmax-CE derivative ``softmax(logits) - target``, which is
    bitwise zero when the model distribution equals the target.
    """
    logits = _as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(
            f"cross_entropy_with_logits: target {target.shape} vs logits {logits.shape}"
        )
    logp = log_softmax_values(logits.values)
    out = Tensor(-(target * logp).sum())

    def bwd(g):
        return (g * (np.exp(logp) - target),)

    return _record(out, (logits,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a rank-0 tensor."""
    a = _as_tensor(a)
    out = Tensor(a.values.sum())
    return _record(out, (a,), lambda g: (np.full_like(a.values, float(g)),))


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values.mean())
    n = a.values.size
    return _record(out, (a,), lambda g: (np.full_like(a.values, float(g) / n),))


def dropout(a: Tensor, mask: np.ndarray, keep_prob: float) -> Tensor:
    """Inverted-scaling dropout with an externally supplied 0/1 mask."""
    a = _as_tensor(a)
    if not (0.0 < keep_prob <= 1.0):
        raise ValueError(f"dropout: keep_prob must be in (0, 1], got {keep_prob}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout: mask {mask.shape} vs input {a.shape}")
    scaled = mask / keep_prob
    out = Tensor(a.values * scaled)
    return _record(out, (a,), lambda g: (g * scaled,))


def embedding(table: Tensor, ids: Iterable[int]) -> Tensor:
    """Row lookup: ids ``(n,)`` into table ``(V, d)`` gives ``(n, d)``."""
    table = _as_tensor(table)
    ids = np.asarray(list(ids), dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError(f"embedding: table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    out = Tensor(table.values[ids])

    def bwd(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids, g)
        return (full,)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# verification


def grad_check(fn, point, epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    ``fn`` is called with the point tensor(s) and must return a scalar
    Tensor computed from their *current* values; it must be deterministic
    (dropout masks and noise samples frozen).  ``point`` may be a single
    Tensor or a sequence of Tensors; every coordinate of every point is
    probed.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    saved_flags = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    try:
        with Tape():
            out = fn(*points)
            backward(out)
        analytic = [
            p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
            for p in points
        ]
        worst = 0.0
        for p, ana in zip(points, analytic):
            flat = p.values.reshape(-1)
            flat_ana = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = float(fn(*points).values)
                flat[i] = orig - epsilon
                f_minus = float(fn(*points).values)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                a = flat_ana[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
                worst = max(worst, err)
        return worst
    finally:
        for p, flag in zip(points, saved_flags):
            p.requires_grad = flag


# ---------------------------------------------------------------------------
# serialization: little-endian, magic "ADLT", u32 rank, u64 dims, f64 payload

_MAGIC = b"ADLT"


def write_tensor(dest: str | BinaryIO, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype=np.float64)
    header = _MAGIC + struct.pack("<I", values.ndim)
    header += b"".join(struct.pack("<Q", d) for d in values.shape)
    payload = values.astype("<f8").tobytes()
    if isinstance(dest, str):
        with open(dest, "wb") as fh:
            fh.write(header + payload)
    else:
        dest.write(header + payload)


def read_tensor(src: str | BinaryIO) -> np.ndarray:
    if isinstance(src, str):
        with open(src, "rb") as fh:
            return read_tensor(fh)
    magic = src.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", src.read(4))
    shape = tuple(struct.unpack("<Q", src.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(src.read(count * 8), dtype="<f8", count=count)
    return data.reshape(shape).astype(np.float64)
