"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` whose ``node``
remembers the inputs and a backward rule. :func:`backward` orders the graph
reachable from a scalar root into a :class:`Tape` and replays it in reverse,
summing gradients into leaves that have ``requires_grad`` set.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _anomaly_enabled() -> bool:
    return getattr(_state, "detect_anomaly", False)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise ``FloatingPointError`` as soon as an op produces NaN or Inf."""
    prev = _anomaly_enabled()
    _state.detect_anomaly = True
    try:
        yield
    finally:
        _state.detect_anomaly = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, a backward rule and the op name."""

    op: str
    inputs: tuple
    backward_fn: BackwardFn


class Tensor:
    """N-dimensional real array that can take part in differentiation.

    The data buffer is read-only; operations always allocate new outputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data), copy=True)
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal constructor: takes ownership of ``arr`` without copying
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

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

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def log(self) -> "Tensor":
        return log(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _infer_dtype(data):
    if isinstance(data, Tensor):
        return data.dtype
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``out`` and record the op if any input needs a gradient."""
    if _anomaly_enabled() and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        result.node = Node(op, tuple(inputs), backward_fn)
    return result


class Tape:
    """Operations reachable from a root, in topological (forward) order."""

    def __init__(self, nodes: list, outputs: list):
        self.nodes = nodes
        self.outputs = outputs

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls([t.node for t in order], order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor that requires grad")
    if tape is None:
        tape = Tape.from_root(root)
    grads: dict = {id(root): np.ones_like(root.data)}
    if root.node is None:
        _accumulate_leaf(root, grads[id(root)])
        return
    for out, node in zip(reversed(tape.outputs), reversed(tape.nodes)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate_leaf(inp, ig)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (isinstance(x, Tensor) and x.ndim == 0)


def _binary_operands(a, b, op: str):
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor) and b.ndim != 0 and a.ndim != 0 and a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if isinstance(b, Tensor) and b.ndim != 0 and a.ndim == 0:
        a, b = b, a
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return g if g.shape == t.shape else np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    if isinstance(b, Tensor):
        return make_result(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b)), "add")
    return make_result(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add")


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -b)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    if isinstance(b, Tensor):
        ad, bd = a.data, b.data
        return make_result(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b)), "mul")
    s = a.dtype.type(b)
    return make_result(a.data * s, (a,), lambda g: (g * s,), "mul")


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return mul(a, reciprocal(b))
    return mul(a, 1.0 / b)


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise ZeroDivisionError("reciprocal of zero")
    out = 1.0 / a.data
    return make_result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is blocked where the floor is active."""
    keep = a.data >= floor
    out = np.where(keep, a.data, a.dtype.type(floor))
    return make_result(out, (a,), lambda g: (g * keep,), "clamp_min")


ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "log": log, "exp": exp}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a) if kind in ("neg", "log", "exp") else fn(a, b)


# ---------------------------------------------------------------------------
# reductions and shape ops

def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make_result(np.asarray(a.data.sum(), dtype=dtype), (a,),
                       lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size
    shape, dtype = a.shape, a.dtype
    return make_result(np.asarray(a.data.mean(), dtype=dtype), (a,),
                       lambda g: (np.full(shape, g / n, dtype=dtype),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(a.data[index]), (a,), bwd, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def concat_shape(shapes: Sequence[tuple], axis: int) -> tuple:
    if not shapes:
        raise ValueError("concat of an empty list")
    ref = tuple(shapes[0])
    ndim = len(ref)
    if ndim == 0 or not -ndim <= axis < ndim:
        raise ValueError(f"concat: axis {axis} invalid for shape {ref}")
    ax = axis % ndim
    total = 0
    for s in shapes:
        if len(s) != ndim or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {tuple(s)} on axis {axis}")
        total += s[ax]
    return ref[:ax] + (total,) + ref[ax + 1:]


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    concat_shape([t.shape for t in tensors], axis)
    ndim = tensors[0].ndim
    ax = axis % ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        sl = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd, "concat")


# ---------------------------------------------------------------------------
# serialization: rank (u64), extents (u64 each), float32 payload, all little-endian

def write_tensor(f: BinaryIO, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    f.write(struct.pack("<Q", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> Tensor:
    head = f.read(8)
    if len(head) != 8:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<Q", head)
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    raw = f.read(8 * rank)
    if len(raw) != 8 * rank:
        raise EOFError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise EOFError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    return Tensor._wrap(arr)
