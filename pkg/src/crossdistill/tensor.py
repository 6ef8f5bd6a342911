"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape every operation is a plain
numpy computation and nothing is retained, which is how inference runs.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
    >>> with Tape():
    ...     loss = sum_all(mul(x, x))
    >>> grads = backward(loss)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class DegenerateInputError(ValueError):
    """Input admits no meaningful result (e.g. pooling over an empty mask)."""


class Tensor:
    """An n-dimensional float array that can take part in a tape.

    Storage is a C-contiguous numpy array, i.e. a flat row-major buffer plus
    shape metadata.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class Node:
    """One recorded operation: its inputs, output and vector-Jacobian product."""

    __slots__ = ("inputs", "output", "vjp", "name", "tape")

    def __init__(self, inputs, output, vjp, name, tape):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.name = name
        self.tape = tape


class Tape:
    """Ordered record of operations; use as a context manager."""

    _stack: list = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


def _record(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    tape = active_tape()
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(tuple(inputs), out, vjp, name, tape)
        out.node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) to every requires_grad leaf reachable from ``loss``.

    Leaf gradients are (re)written on ``.grad``; a second call on the same tape
    yields identical values rather than doubling them. Returns ``{id(leaf): grad}``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss was not recorded on a tape")
    tape = loss.node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.node is None:
                leaves[key] = inp
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        result[key] = leaf.grad
    return result


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ----------------------------------------------------------------- helpers

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -------------------------------------------------------- elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return _record("scale", a.data * f, (a,), lambda g: (g * f,))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    c = xd.dtype.type(math.sqrt(2.0 / math.pi))
    k = xd.dtype.type(0.044715)
    x2 = xd * xd
    t = np.tanh(c * (xd + k * x2 * xd))
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = c * (1.0 + 3.0 * k * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (x,), vjp)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return _record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; no gradient flows there."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _record("masked_fill", out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


# ---------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match or ``b`` is 2-D."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _record("matmul", np.matmul(ad, bd), (a, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis`` (the sequence axis in practice)."""
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis))

    return _record("concat", out, tuple(tensors), vjp)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatter-adds back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding_gather: id out of range for table {table.shape}")

    def vjp(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding_gather", table.data[ids], (table,), vjp)


def gather_positions(x: Tensor, index) -> Tensor:
    """Per-batch reordering along axis 1: ``out[b, j] = x[b, index[b, j]]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_positions: shapes {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (np.broadcast_to(rows, index.shape), index), g)
        return (gx,)

    return _record("gather_positions", x.data[rows, index], (x,), vjp)


# ------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _record("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    return _record("sum_axis", x.data.sum(axis=axis), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


# ------------------------------------------------------ normalization etc.

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction)."""
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)
    return _record("log_softmax", out, (x,),
                   lambda g: (g - y * g.sum(axis=axis, keepdims=True),))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``gamma * . + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: x {x.shape} vs gamma {gamma.shape} beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layernorm", out, (x, gamma, beta), vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True)) + xd.dtype.type(eps)
    y = xd / norm
    return _record("l2_normalize", y, (x,),
                   lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


def masked_mean_pool(h: Tensor, mask) -> Tensor:
    """Average of the rows of ``h`` whose mask entry is 1.

    ``h`` is ``[L, d]`` with mask ``[L]``, or batched ``[B, L, d]`` with ``[B, L]``.
    """
    m = np.asarray(mask, dtype=h.dtype)
    if m.shape != h.shape[:-1]:
        raise DimensionError(f"masked_mean_pool: mask {m.shape} vs hidden {h.shape}")
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise DegenerateInputError("masked_mean_pool: mask has no active position")
    w = (m / count)[..., None]
    # Select rather than multiply so masked rows cannot leak inf/nan into the result.
    active = m[..., None] > 0
    out = np.where(active, h.data * w, 0.0).sum(axis=-2).astype(h.dtype, copy=False)
    return _record("masked_mean_pool", out, (h,),
                   lambda g: (np.expand_dims(g, -2) * w,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared element differences."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=a.dtype)

    def vjp(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _record("mse", out, (a, b), vjp)


def counter_rng(seed: int, *counters: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, *counters)``; the same key replays the same stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(c) for c in counters)])
    return np.random.Generator(np.random.Philox(ss))
