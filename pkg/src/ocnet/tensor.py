"""Dense float tensors and a reverse-mode differentiation tape.

A :class:`Tensor` is a thin wrapper over a contiguous row-major numpy
array in float32 or float64.  Differentiable computations are recorded
on a :class:`Tape`: every operation appends one node holding the forward
value and a closure mapping the output gradient to input gradients.
:func:`backward` runs the reverse sweep from a scalar root and leaves an
accumulated gradient on every reachable node.

Training runs in float32; float64 exists for finite-difference gradient
checking (:func:`gradient_check`), which needs headroom below its 1e-5
tolerance.  Tensors are treated as immutable values after construction;
a tape belongs to a single logical execution stream.
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

F32 = "f32"
F64 = "f64"

_NP_DTYPE = {F32: np.float32, F64: np.float64}
_PRECISION_CODE = {F32: 4, F64: 8}
_CODE_PRECISION = {4: F32, 8: F64}

_TENSOR_MAGIC = b"OCT1"


def _precision_of(dtype: np.dtype) -> str:
    if dtype == np.float32:
        return F32
    if dtype == np.float64:
        return F64
    raise TypeError(f"unsupported dtype {dtype}; tensors are f32 or f64")


class Tensor:
    """Dense N-dimensional real array, row-major, f32 or f64.

    Treat instances as immutable values: operations never modify their
    inputs, and a tensor may be shared freely across execution contexts.
    """

    __slots__ = ("_data",)

    def __init__(self, data, precision: str | None = None):
        if isinstance(data, Tensor):
            data = data._data
        dtype = _NP_DTYPE[precision] if precision is not None else None
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self._data = np.ascontiguousarray(arr)

    @property
    def data(self) -> np.ndarray:
        """The underlying array.  Do not write through this view."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def precision(self) -> str:
        return _precision_of(self._data.dtype)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        """Reinterpret the row-major data under a new shape.

        Element count and order are preserved; anything else is an error.
        """
        shape = tuple(int(s) for s in shape)
        count = int(np.prod(shape)) if shape else 1
        if count != self.size:
            raise ValueError(
                f"reshape to {shape} needs {count} elements, tensor has {self.size}"
            )
        return Tensor(self._data.reshape(shape))

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self._data, precision=precision)

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() on tensor of {self.size} elements")
        return float(self._data.reshape(-1)[0])

    def tolist(self):
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, precision={self.precision})"


def create(
    shape: Sequence[int],
    fill: float | Sequence[float] = 0.0,
    precision: str = F32,
) -> Tensor:
    """Build a tensor of the given shape from a scalar fill or a flat value list."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must be non-empty")
    if any(s < 1 for s in shape):
        raise ValueError(f"all dimensions must be >= 1, got {list(shape)}")
    dtype = _NP_DTYPE[precision]
    count = int(np.prod(shape))
    if np.isscalar(fill):
        arr = np.full(shape, fill, dtype=dtype)
    else:
        values = np.asarray(fill, dtype=dtype).reshape(-1)
        if values.size != count:
            raise ValueError(
                f"shape {list(shape)} expects {count} values, got {values.size}"
            )
        arr = values.reshape(shape)
    return Tensor(arr)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape, dtype=t.data.dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

# A backward closure maps the output gradient to one gradient per input
# (None for inputs that do not receive one).
BackwardFn = Callable[[np.ndarray], tuple]


class TapeNode:
    __slots__ = ("op", "inputs", "value", "grad", "backward_fn")

    def __init__(
        self,
        op: str,
        inputs: tuple[int, ...],
        value: Tensor,
        backward_fn: BackwardFn | None,
    ):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.backward_fn = backward_fn
        self.grad: np.ndarray | None = None


class Node:
    """Lightweight handle to one tape position."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Tensor:
        return self.tape.nodes[self.index].value

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.index].value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape.nodes[self.index].grad

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"Node(#{self.index} {node.op} shape={list(node.value.shape)})"


class Tape:
    """Append-only record of a differentiable computation.

    Nodes only ever reference earlier nodes, so the graph is acyclic by
    construction.  A tape is confined to one logical execution stream.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def leaf(self, tensor: Tensor) -> Node:
        """Record an input value (parameter or constant)."""
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self.nodes.append(TapeNode("leaf", (), tensor, None))
        return Node(self, len(self.nodes) - 1)

    def emit(
        self,
        op: str,
        inputs: Sequence[Node],
        value: Tensor,
        backward_fn: BackwardFn,
    ) -> Node:
        """Record one operation; inputs must already live on this tape."""
        idx = []
        for node in inputs:
            if node.tape is not self:
                raise ValueError(f"{op}: input from a different tape")
            idx.append(node.index)
        self.nodes.append(TapeNode(op, tuple(idx), value, backward_fn))
        return Node(self, len(self.nodes) - 1)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(tape: Tape, root: Node | int) -> None:
    """Reverse sweep from a scalar root.

    Afterwards every node reachable from the root holds its accumulated
    gradient (fan-out sums additively); unreachable nodes hold zeros.
    """
    root_index = root.index if isinstance(root, Node) else int(root)
    if not 0 <= root_index < len(tape.nodes):
        raise IndexError(f"root index {root_index} outside tape of {len(tape.nodes)}")
    root_node = tape.nodes[root_index]
    if root_node.value.size != 1:
        raise ValueError(
            f"backward root must be scalar, got shape {list(root_node.value.shape)}"
        )

    for node in tape.nodes:
        node.grad = np.zeros(node.value.shape, dtype=node.value.data.dtype)

    reachable = set()
    stack = [root_index]
    while stack:
        i = stack.pop()
        if i in reachable:
            continue
        reachable.add(i)
        stack.extend(tape.nodes[i].inputs)

    root_node.grad = np.ones(root_node.value.shape, dtype=root_node.value.data.dtype)
    for i in sorted(reachable, reverse=True):
        node = tape.nodes[i]
        if node.backward_fn is None:
            continue
        input_grads = node.backward_fn(node.grad)
        for j, g in zip(node.inputs, input_grads):
            if g is not None:
                tape.nodes[j].grad += g


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def _binary_args(op: str, a: Node, b: Node) -> Tape:
    if a.tape is not b.tape:
        raise ValueError(f"{op}: operands on different tapes")
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: precision mismatch {a.value.precision} vs {b.value.precision}")
    return a.tape


def add(a: Node, b: Node) -> Node:
    tape = _binary_args("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return g, g

    return tape.emit("add", (a, b), Tensor(out), bwd)


def mul(a: Node, b: Node) -> Node:
    tape = _binary_args("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return g * bd, g * ad

    return tape.emit("mul", (a, b), Tensor(out), bwd)


def affine(a: Node, scale: float, shift: float = 0.0) -> Node:
    """Elementwise scale * x + shift with compile-time constants."""
    dtype = a.data.dtype
    s = dtype.type(scale)
    out = a.data * s + dtype.type(shift)

    def bwd(g):
        return (g * s,)

    return a.tape.emit("affine", (a,), Tensor(out), bwd)


def absolute(a: Node) -> Node:
    ad = a.data
    out = np.abs(ad)

    def bwd(g):
        return (g * np.sign(ad),)

    return a.tape.emit("abs", (a,), Tensor(out), bwd)


def log2(a: Node) -> Node:
    ad = a.data
    if np.any(ad <= 0):
        raise ValueError("log2: inputs must be positive")
    out = np.log2(ad)
    inv_ln2 = ad.dtype.type(1.0 / math.log(2.0))

    def bwd(g):
        return (g * inv_ln2 / ad,)

    return a.tape.emit("log2", (a,), Tensor(out), bwd)


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clip into [lo, hi]; gradient flows only through unclamped elements."""
    ad = a.data
    dtype = ad.dtype
    out = np.clip(ad, dtype.type(lo), dtype.type(hi))
    mask = ((ad > lo) & (ad < hi)).astype(dtype)

    def bwd(g):
        return (g * mask,)

    return a.tape.emit("clamp", (a,), Tensor(out), bwd)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old_shape = a.shape
    out = a.value.reshape(shape)

    def bwd(g):
        return (g.reshape(old_shape),)

    return a.tape.emit("reshape", (a,), out, bwd)


def concat_rows(a: Node, b: Node) -> Node:
    """Concatenate along the leading (batch) dimension."""
    if a.tape is not b.tape:
        raise ValueError("concat_rows: operands on different tapes")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(
            f"concat_rows: trailing shapes differ {list(a.shape)} vs {list(b.shape)}"
        )
    n_a = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def bwd(g):
        return g[:n_a], g[n_a:]

    return a.tape.emit("concat_rows", (a, b), Tensor(out), bwd)


def sum_all(a: Node) -> Node:
    shape = a.shape
    dtype = a.data.dtype
    out = np.array(a.data.sum(), dtype=dtype)

    def bwd(g):
        return (np.full(shape, g, dtype=dtype),)

    return a.tape.emit("sum_all", (a,), Tensor(out), bwd)


def matmul(a: Node, b: Node) -> Node:
    """2-D matrix product [m,k] x [k,n] -> [m,n]."""
    if a.tape is not b.tape:
        raise ValueError("matmul: operands on different tapes")
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {list(a.shape)} x {list(b.shape)}")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul inner dims differ: {list(a.shape)} x {list(b.shape)}")
    out = ad @ bd

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return a.tape.emit("matmul", (a, b), Tensor(out), bwd)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradient_check(
    build: Callable[[Tape, list[Node]], Node],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare tape gradients of a scalar function against central differences.

    ``build`` receives a fresh tape plus one leaf per parameter and must
    return the scalar root node.  Returns the maximum over all parameter
    coordinates of |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    Parameters must be f64; central differences have no headroom in f32.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        if p.precision != F64:
            raise ValueError("gradient_check requires f64 parameters")

    def evaluate(tensors: list[Tensor]) -> tuple[float, Tape, list[Node]]:
        tape = Tape()
        leaves = [tape.leaf(t) for t in tensors]
        root = build(tape, leaves)
        val = root.value.item()
        if not math.isfinite(val):
            raise ArithmeticError(f"gradient_check: non-finite function value {val}")
        return val, tape, [Node(tape, lf.index) for lf in leaves]

    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    root = build(tape, leaves)
    if not math.isfinite(root.value.item()):
        raise ArithmeticError("gradient_check: non-finite function value")
    backward(tape, root)
    analytic = [leaf.grad.copy() for leaf in leaves]

    work = [np.array(p.data, dtype=np.float64) for p in params]
    max_rel = 0.0
    for pi in range(len(params)):
        flat = work[pi].reshape(-1)
        grad_flat = analytic[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus, _, _ = evaluate([Tensor(w) for w in work])
            flat[i] = orig - step
            f_minus, _, _ = evaluate([Tensor(w) for w in work])
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad_flat[i])
            rel = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
    return max_rel


# ---------------------------------------------------------------------------
# Serialization: magic "OCT1", u8 precision code (4=f32, 8=f64), u32 ndim,
# ndim u64 dims, then raw little-endian row-major element bytes.
# ---------------------------------------------------------------------------


def save_tensor(t: Tensor, dest: str | BinaryIO) -> None:
    close = False
    if isinstance(dest, (str, bytes)):
        f = open(dest, "wb")
        close = True
    else:
        f = dest
    try:
        code = _PRECISION_CODE[t.precision]
        f.write(_TENSOR_MAGIC)
        f.write(struct.pack("<BI", code, t.ndim))
        f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        le = "<f4" if t.precision == F32 else "<f8"
        f.write(np.ascontiguousarray(t.data).astype(le, copy=False).tobytes())
    finally:
        if close:
            f.close()


def load_tensor(src: str | BinaryIO) -> Tensor:
    close = False
    if isinstance(src, (str, bytes)):
        f = open(src, "rb")
        close = True
    else:
        f = src
    try:
        magic = f.read(4)
        if magic != _TENSOR_MAGIC:
            raise ValueError(f"bad tensor magic {magic!r}, expected {_TENSOR_MAGIC!r}")
        code, ndim = struct.unpack("<BI", f.read(5))
        if code not in _CODE_PRECISION:
            raise ValueError(f"bad precision code {code}")
        dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        precision = _CODE_PRECISION[code]
        itemsize = 4 if precision == F32 else 8
        count = 1
        for d in dims:
            count *= d
        raw = f.read(itemsize * count)
        if len(raw) != itemsize * count:
            raise ValueError("truncated tensor payload")
        le = "<f4" if precision == F32 else "<f8"
        arr = np.frombuffer(raw, dtype=le).astype(_NP_DTYPE[precision]).reshape(dims)
        return Tensor(arr)
    finally:
        if close:
            f.close()
