"""Minimal reverse-mode automatic differentiation over dense NumPy arrays.

Every differentiable primitive records a node on the calling thread's tape
when at least one operand requires a gradient. Nodes carry a monotonically
increasing sequence number, so sorting reachable nodes by that number in
descending order replays the forward record in exact reverse topological
order.

There is no implicit broadcasting. Shapes must conform exactly; use
:func:`reshape` and :func:`broadcast_to` to make intent explicit. The only
exception is multiplication by a Python scalar (:func:`scale`).
"""

from __future__ import annotations

import contextlib
import itertools
import math
import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tape and global state


class Tape:
    """Per-thread record of executed primitives.

    ``clear()`` invalidates every node recorded so far; a later backward pass
    reaching one of them raises :class:`GradientError`.
    """

    def __init__(self):
        self.generation = 0
        self._counter = itertools.count()

    def next_seq(self) -> int:
        return next(self._counter)

    def clear(self):
        self.generation += 1


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


def get_tape() -> Tape:
    return _state.tape


def clear_tape():
    _state.tape.clear()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    old, _state.dtype = _state.dtype, dtype
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old, _state.grad_enabled = _state.grad_enabled, False
    try:
        yield
    finally:
        _state.grad_enabled = old


# ---------------------------------------------------------------------------
# tensor


class _Node:
    __slots__ = ("seq", "generation", "tape", "parents", "backward", "released")

    def __init__(self, parents, backward):
        tape = _state.tape
        self.tape = tape
        self.seq = tape.next_seq()
        self.generation = tape.generation
        self.parents = parents
        self.backward = backward
        self.released = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _state.dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float, np.floating)):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *dims):
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_state.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor._wrap(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward)
    return out


def _check_same(op: str, a: Tensor, b: Tensor):
    if a.dims != b.dims:
        raise ShapeError(f"{op}: dimension mismatch between {a.dims} and {b.dims}")


# ---------------------------------------------------------------------------
# primitives
#
# Each backward closure takes the upstream gradient and a tuple of booleans
# saying which parents need a gradient, and returns one array (or None) per
# parent.


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g, need: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g, need: (g, -g if need[1] else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g, need):
        return (g * bd if need[0] else None, g * ad if need[1] else None)

    return _result(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g, need: (g * g.dtype.type(c),))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.dims} and {b.dims}")
    if a.dims[:-2] != b.dims[:-2] or a.dims[-1] != b.dims[-2]:
        raise ShapeError(f"matmul: dimension mismatch between {a.dims} and {b.dims}")
    ad, bd = a.data, b.data

    def backward(g, need):
        ga = g @ np.swapaxes(bd, -1, -2) if need[0] else None
        gb = np.swapaxes(ad, -1, -2) @ g if need[1] else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def reshape(a, dims) -> Tensor:
    a = as_tensor(a)
    dims = tuple(int(d) for d in dims)
    if -1 not in dims and math.prod(dims) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.dims} as {dims}")
    src = a.dims
    return _result(a.data.reshape(dims), (a,), lambda g, need: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g, need: (np.transpose(g, inv),))


def broadcast_to(a, dims) -> Tensor:
    """Explicitly tile ``a`` to ``dims`` (leading axes may be added)."""
    a = as_tensor(a)
    dims = tuple(dims)
    try:
        out = np.broadcast_to(a.data, dims)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {a.dims} to {dims}") from None
    src = a.dims
    lead = len(dims) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(src) if d == 1 and dims[lead + i] != 1
    )

    def backward(g, need):
        return (g.sum(axis=axes).reshape(src) if axes else g,)

    return _result(np.ascontiguousarray(out), (a,), backward)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.dims

    def backward(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axs = (axis,) if isinstance(axis, int) else tuple(axis)
        n = math.prod(a.dims[i] for i in axs)
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g, need: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    dt = x.dtype.type
    x2 = x * x
    u = dt(_GELU_C) * (x + dt(0.044715) * x2 * x)
    th = np.tanh(u)
    out = dt(0.5) * x * (1 + th)

    def backward(g, need):
        du = dt(_GELU_C) * (1 + dt(3 * 0.044715) * x2)
        d = dt(0.5) * (1 + th) + dt(0.5) * x * (1 - th * th) * du
        return (g * d,)

    return _result(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g, need):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), backward)


def log(a) -> Tensor:
    """Natural log with the input clamped below at ``LOG_FLOOR``."""
    a = as_tensor(a)
    x = a.data
    clamped = np.maximum(x, x.dtype.type(LOG_FLOOR))
    live = x > LOG_FLOOR

    def backward(g, need):
        return (np.where(live, g / clamped, 0).astype(g.dtype),)

    return _result(np.log(clamped), (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(x * x, (a,), lambda g, need: (g * (x + x),))


def layer_norm(a, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature weight and bias."""
    a, weight, bias = as_tensor(a), as_tensor(weight), as_tensor(bias)
    d = a.dims[-1]
    if weight.dims != (d,) or bias.dims != (d,):
        raise ShapeError(
            f"layer_norm: dimension mismatch between {a.dims} and {weight.dims}/{bias.dims}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    w = weight.data

    def backward(g, need):
        gx = gw = gb = None
        lead = tuple(range(x.ndim - 1))
        if need[1]:
            gw = (g * xhat).sum(axis=lead)
        if need[2]:
            gb = g.sum(axis=lead)
        if need[0]:
            gh = g * w
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gw, gb

    return _result(xhat * w + bias.data, (a, weight, bias), backward)


def embedding_lookup(table, indices) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be rank 2, got {table.dims}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.dims[0]):
        raise IndexError(f"embedding_lookup: index out of range for table {table.dims}")
    src = table.dims

    def backward(g, need):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or any(
            t.dims[i] != ts[0].dims[i] for i in range(t.data.ndim) if i != ax
        ):
            raise ShapeError(f"concat: dimension mismatch between {ts[0].dims} and {t.dims}")
    bounds = np.cumsum([0] + [t.dims[ax] for t in ts])

    def backward(g, need):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) if need[i] else None
            for i in range(len(ts))
        )

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def slice_(a, key) -> Tensor:
    """Basic (int / slice) indexing."""
    a = as_tensor(a)
    key = key if isinstance(key, tuple) else (key,)
    for k in key:
        if not isinstance(k, (int, slice, type(Ellipsis), np.integer)):
            raise TypeError("slice_ supports ints, slices and Ellipsis only")
    src, dt = a.dims, a.data.dtype

    def backward(g, need):
        out = np.zeros(src, dtype=dt)
        out[key] = g
        return (out,)

    return _result(a.data[key], (a,), backward)


# ---------------------------------------------------------------------------
# backward pass


def _collect(loss: Tensor) -> list[Tensor]:
    """All non-leaf tensors reachable from ``loss``."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        node = t._node
        if node.released:
            raise GradientError("graph already released by an earlier backward pass")
        if node.generation != node.tape.generation:
            raise GradientError("stale graph: the tape was cleared after this tensor was produced")
        seen[id(t)] = t
        stack.extend(node.parents)
    return sorted(seen.values(), key=lambda t: t._node.seq)


def _run(loss: Tensor, targets: set[int] | None, retain: bool) -> dict[int, np.ndarray]:
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    if loss._node is None:
        raise GradientError("loss is not attached to the tape (no operand required a gradient)")
    order = _collect(loss)

    def wanted(p: Tensor) -> bool:
        if p._node is None:
            return p.requires_grad and (targets is None or id(p) in targets)
        return id(p) in live

    live: set[int] = set()
    for t in order:
        if any(wanted(p) for p in t._node.parents):
            live.add(id(t))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None or id(t) not in live:
            continue
        parents = t._node.parents
        need = tuple(wanted(p) for p in parents)
        pgrads = t._node.backward(g, need)
        for p, n, pg in zip(parents, need, pgrads):
            if not n or pg is None:
                continue
            bucket = grads if p._node is not None else leaves
            prev = bucket.get(id(p))
            bucket[id(p)] = pg if prev is None else prev + pg
    if not retain:
        for t in order:
            t._node.released = True
            t._node.backward = None
    return leaves


def _leaves_of(loss: Tensor) -> dict[int, Tensor]:
    out: dict[int, Tensor] = {}
    stack, seen = [loss], set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is None:
            if t.requires_grad:
                out[id(t)] = t
        else:
            stack.extend(t._node.parents)
    return out


def backward(loss: Tensor, retain_graph: bool = False):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Accumulation is additive; callers reset gradients themselves.
    """
    if isinstance(loss, Tensor) and loss._node is not None:
        leaf_map = _leaves_of(loss)
    else:
        leaf_map = {}
    got = _run(loss, None, retain_graph)
    for key, g in got.items():
        leaf = leaf_map[key]
        g = g.astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor], retain_graph: bool = False) -> list[np.ndarray]:
    """Return d(loss)/d(w) for each tensor in ``wrt`` without touching ``.grad``.

    Only the part of the graph leading to ``wrt`` is differentiated.
    Unreachable targets get a zero array.
    """
    for w in wrt:
        if w._node is not None:
            raise GradientError("grad() targets must be leaf tensors")
    got = _run(loss, {id(w) for w in wrt}, retain_graph)
    return [got[id(w)].astype(w.data.dtype, copy=False) if id(w) in got else np.zeros_like(w.data) for w in wrt]


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3,
                   abs_floor: float = 1e-6) -> np.ndarray:
    """Coordinate-wise ``|a - b| / max(|a|, |b|, floor * max|a, b|, abs_floor)``.

    The floors keep coordinates whose true gradient is near zero (or an
    entire gradient at a stationary point) from failing on cancellation
    noise alone.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale_ = max(float(np.abs(b).max(initial=0.0)), float(np.abs(a).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), max(floor * scale_, abs_floor))
    return np.abs(a - b) / denom


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences at ``point``.

    The analytic gradient is taken at the current default precision; the
    finite-difference reference is always evaluated in float64.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=_state.dtype)
    with no_grad():
        v1 = f(Tensor(x0)).data.copy()
        v2 = f(Tensor(x0)).data.copy()
    if v1.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got dims {v1.shape}")
    if not np.array_equal(v1, v2, equal_nan=True):
        raise GradientError("function is not deterministic across evaluations")

    x = Tensor(x0, requires_grad=True)
    out = f(x)
    if out._node is None:
        analytic = np.zeros_like(x0)
    else:
        analytic = grad(out, [x])[0]

    x64 = x0.astype(np.float64)
    numeric = np.zeros(x0.shape, dtype=np.float64)
    flat = numeric.reshape(-1)
    with no_grad(), precision(np.float64):
        for i in range(x0.size):
            xp = x64.copy().reshape(-1)
            xm = x64.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = float(f(Tensor(xp.reshape(x0.shape))).data.reshape(-1)[0])
            fm = float(f(Tensor(xm.reshape(x0.shape))).data.reshape(-1)[0])
            flat[i] = (fp - fm) / (2 * h)
    err = relative_error(analytic, numeric)
    return GradCheckReport(float(err.max(initial=0.0)), tol, analytic, numeric)


# ---------------------------------------------------------------------------
# serialisation: [name_len u32][name][rank u32][dims u32 * rank][f32 * prod(dims)]


def write_tensor_record(fh: BinaryIO, name: str, array: np.ndarray):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError("truncated tensor record")
    return buf


def read_tensor_record(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = math.prod(dims)
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims)
    return name, data.astype(np.float32)


def write_tensors(fh: BinaryIO, named: Iterable[tuple[str, np.ndarray]]):
    items = list(named)
    fh.write(struct.pack("<I", len(items)))
    for name, arr in items:
        write_tensor_record(fh, name, arr)


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return dict(read_tensor_record(fh) for _ in range(n))
