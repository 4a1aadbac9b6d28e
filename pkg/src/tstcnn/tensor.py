"""Dense tensors with reverse-mode automatic differentiation on a recorded tape.

Layout convention for video volumes is channels-first: (C, T, H, W) with an
optional leading batch axis. Values are float32 by default; float64 is
selectable for gradient checking, where finite differences need the extra
precision.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "active_tape",
    "record_op",
    "elementwise",
    "add",
    "multiply",
    "add_scalar",
    "multiply_scalar",
    "reduce_sum",
    "reduce_mean",
    "write_tensor",
    "read_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Shapes or axes incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation's calling contract was violated."""


# ---------------------------------------------------------------------------
# Tensor


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Immutable by convention after creation except for ``grad``; layers mutate
    parameter ``data`` in place only through the optimizer.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be strictly positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad: bool = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Takes ownership of g on first accumulation; gradient arrays are
        # never mutated in place anywhere in the package.
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        self.grad = g if self.grad is None else self.grad + g

    # Arithmetic sugar over the four supported element-wise kinds.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return multiply_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return multiply_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, multiply_scalar(other, -1.0))
        return add_scalar(self, -float(other))

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flags})"


# ---------------------------------------------------------------------------
# Tape

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _TapeNode:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of operations for one run, in topological order.

    Used as a context manager; ops record themselves onto the innermost
    active tape of the current thread, so independent runs in separate
    threads never share state.
    """

    def __init__(self):
        self._nodes: list[_TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        """Append one operation.

        ``backward`` maps the output gradient array to a sequence of gradient
        arrays (or None) aligned with ``inputs``.
        """
        self._nodes.append(_TapeNode(tuple(inputs), output, backward))

    def backward(self, root: Tensor) -> dict:
        """Reverse-sweep from ``root``, a single-element tensor.

        Accumulates into ``grad`` of every requires_grad tensor reachable
        from the root (op outputs included) and returns a mapping
        {tensor: gradient array} covering the reachable leaves and the root.
        Gradients of unreachable tensors are untouched; two sweeps without
        zeroing add up exactly.
        """
        if root.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        flowing: dict[Tensor, np.ndarray] = {root: np.ones_like(root.data)}
        for node in reversed(self._nodes):
            g = flowing.get(node.output)
            if g is None:
                continue
            if node.output is not root:
                del flowing[node.output]
                if node.output.requires_grad:
                    node.output.accumulate_grad(g)
            grads = node.backward(g)
            for tensor, gt in zip(node.inputs, grads):
                if gt is None or not tensor.requires_grad:
                    continue
                held = flowing.get(tensor)
                flowing[tensor] = gt if held is None else held + gt
        result = {}
        for tensor, g in flowing.items():
            if tensor.requires_grad:
                tensor.accumulate_grad(g)
                result[tensor] = tensor.grad
        return result


def record_op(inputs: Sequence, out_data: np.ndarray, backward: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording onto the active tape if needed."""
    out = Tensor(out_data)
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        tape.record(tensors, out, backward)
    return out


# ---------------------------------------------------------------------------
# Element-wise operations (tensor-tensor shapes must match exactly; the only
# broadcasting forms are the scalar add/multiply)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record_op([a, b], a.data + b.data, lambda g: (g, g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "multiply")
    ad, bd = a.data, b.data
    return record_op([a, b], ad * bd, lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, scalar: float) -> Tensor:
    s = a.data.dtype.type(scalar)
    return record_op([a], a.data + s, lambda g: (g,))


def multiply_scalar(a: Tensor, scalar: float) -> Tensor:
    s = a.data.dtype.type(scalar)
    return record_op([a], a.data * s, lambda g: (g * s,))


_ELEMENTWISE = {
    "add": add,
    "multiply": multiply,
    "scalar-add": add_scalar,
    "scalar-multiply": multiply_scalar,
}


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Dispatch one of the supported kinds: add, multiply, scalar-add, scalar-multiply."""
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return op(a, b)


# ---------------------------------------------------------------------------
# Reductions


def _normalize_axes(axes, ndim: int) -> Optional[Tuple[int, ...]]:
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for rank-{ndim} tensor")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes in {tuple(axes)}")
    return tuple(sorted(norm))


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axes: Optional[Tuple[int, ...]]) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g, shape)
    kept = list(g.shape)
    for ax in axes:
        kept.insert(ax, 1)
    return np.broadcast_to(g.reshape(kept), shape)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.data.ndim)
    shape = x.data.shape
    out = x.data.sum(axis=axes)
    return record_op([x], out, lambda g: (_expand_reduced(g, shape, axes).copy(),))


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.data.ndim)
    shape = x.data.shape
    out = x.data.mean(axis=axes)
    n = x.data.size if axes is None else int(np.prod([shape[ax] for ax in axes]))
    inv = x.data.dtype.type(1.0 / n)
    return record_op([x], out, lambda g: ((_expand_reduced(g, shape, axes) * inv),))


# ---------------------------------------------------------------------------
# Serialization: rank (u32), extents (u32 each), dtype code (u8: 4=float32,
# 8=float64), then the flat values, all little-endian.

_CODE_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_tensor(fp, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _FLOAT_DTYPES:
        raise ContractError(f"only float32/float64 tensors serialize, got {arr.dtype}")
    code = arr.dtype.itemsize
    fp.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(struct.pack("<B", code))
    fp.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


def _read_exact(fp, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise ContractError("truncated tensor record")
    return buf


def read_tensor(fp) -> np.ndarray:
    rank = struct.unpack("<I", _read_exact(fp, 4))[0]
    shape = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank)) if rank else ()
    code = struct.unpack("<B", _read_exact(fp, 1))[0]
    if code not in _CODE_TO_DTYPE:
        raise ContractError(f"unknown dtype code {code} in tensor record")
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fp, count * code), dtype=dtype).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    import io

    return read_tensor(io.BytesIO(blob))
