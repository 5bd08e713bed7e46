"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the forecasting network are provided. Binary
elementwise ops accept operands of identical shape, or a scalar (shape ``()``)
combined with a tensor; anything else must be reshaped explicitly by the
caller.

Recording happens only inside an active :class:`Tape`::

    with Tape() as tape:
        loss = (w @ x).sum()
    grads = tape.backward(loss)
    grads[w]

Outside a tape every op is a plain numpy evaluation, which is what inference
and finite-difference checks use.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "parameter",
    "constant",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "tanh",
    "softplus",
    "log",
    "square",
    "absolute",
    "concat",
    "take",
    "split",
    "reshape",
    "tile_rows",
    "gather_rows",
    "reduce",
    "sum",
    "mean",
    "backward",
    "numerical_gradient",
]

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "duq_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce("sum", self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce("mean", self, axis)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor whose gradient is reported by :meth:`Tape.backward`."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _Node(NamedTuple):
    outs: tuple[Tensor, ...]
    inputs: tuple[Tensor, ...]
    tracked: tuple[bool, ...]
    vjp: Callable
    multi: bool = False  # vjp takes a list of output adjoints


class Gradients:
    """Gradient store keyed by parameter identity.

    Parameters that the loss does not depend on report a zero gradient of the
    right shape rather than raising.
    """

    def __init__(self, store: dict[int, tuple[Tensor, np.ndarray]]):
        self._store = store

    def __getitem__(self, param: Tensor) -> np.ndarray:
        hit = self._store.get(id(param))
        if hit is None or hit[0] is not param:
            return np.zeros_like(param.data)
        return hit[1]

    def __contains__(self, param: Tensor) -> bool:
        hit = self._store.get(id(param))
        return hit is not None and hit[0] is param

    def __len__(self) -> int:
        return len(self._store)

    def params(self) -> list[Tensor]:
        return [p for p, _ in self._store.values()]


class Tape:
    """Ordered record of executed ops; replayed backwards by :meth:`backward`.

    A tape is rebuilt for every forward pass. Tapes share no mutable state, so
    independent tapes may run on different threads (the active tape lives in
    a context variable).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, outs: tuple[Tensor, ...], inputs: tuple[Tensor, ...], tracked, vjp, multi: bool = False) -> None:
        for out in outs:
            out._tape = self
        self.nodes.append(_Node(outs, inputs, tracked, vjp, multi))

    def backward(self, loss: Tensor) -> Gradients:
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        if not self.nodes:
            raise ValueError("tape is empty")

        adjoints: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        pop = adjoints.pop
        for node in reversed(self.nodes):
            if not node.multi:
                g = pop(id(node.outs[0]), None)
                if g is None:
                    continue
            else:
                gs = [pop(id(o), None) for o in node.outs]
                if all(x is None for x in gs):
                    continue
                g = [np.zeros(o.shape) if x is None else x for o, x in zip(node.outs, gs)]
            for inp, tracked, gi in zip(node.inputs, node.tracked, node.vjp(g)):
                if gi is None or not tracked:
                    continue
                key = id(inp)
                prev = adjoints.get(key)
                adjoints[key] = gi if prev is None else prev + gi
                if inp._tape is None:
                    leaves[key] = inp
        return Gradients({key: (t, adjoints[key]) for key, t in leaves.items()})


def backward(loss: Tensor) -> Gradients:
    """Backpropagate a scalar loss through the tape that produced it."""
    if loss._tape is None:
        raise ValueError("loss was not recorded on any tape")
    return loss._tape.backward(loss)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tracked = tuple(t.requires_grad or t._tape is not None for t in inputs)
        if any(tracked):
            tape.record((out,), inputs, tracked, vjp)
    return out


def _emit_many(datas: Sequence[np.ndarray], inputs: tuple[Tensor, ...], vjp) -> list[Tensor]:
    outs = [Tensor(d) for d in datas]
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tracked = tuple(t.requires_grad or t._tape is not None for t in inputs)
        if any(tracked):
            tape.record(tuple(outs), inputs, tracked, vjp, multi=True)
    return outs


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting exists, so the reduction is total
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    _check_binary(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _emit(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: one transcendental, no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _lift(a)
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),))


def _softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pos = x > 0
    out = np.empty_like(x)
    out[pos] = x[pos] + np.log1p(np.exp(-x[pos]))
    out[~pos] = np.log1p(np.exp(x[~pos]))
    return out


def softplus(a) -> Tensor:
    """``log(1 + exp(x))`` without overflow for large positive ``x``."""
    a = _lift(a)
    xd = a.data
    return _emit(_softplus(xd), (a,), lambda g: (g * _sigmoid(xd),))


def log(a) -> Tensor:
    a = _lift(a)
    xd = a.data
    if np.any(xd <= 0):
        bad = float(np.min(xd))
        raise ValueError(f"log of non-positive input (min {bad!r})")
    return _emit(np.log(xd), (a,), lambda g: (g / xd,))


def square(a) -> Tensor:
    a = _lift(a)
    xd = a.data
    return _emit(xd * xd, (a,), lambda g: (2.0 * g * xd,))


def absolute(a) -> Tensor:
    # subgradient 0 at the kink
    a = _lift(a)
    xd = a.data
    return _emit(np.abs(xd), (a,), lambda g: (g * np.sign(xd),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "log": log,
    "square": square,
    "abs": absolute,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (``"softplus"``, ``"mul"``, ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ndim = parts[0].ndim
    ax = axis % ndim if ndim else 0
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(
            p.shape[k] != ref[k] for k in range(ndim) if k != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: extents {[q.shape for q in parts]} disagree"
            )
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        out = []
        for k in range(len(parts)):
            idx = [slice(None)] * ndim
            idx[ax] = slice(bounds[k], bounds[k + 1])
            out.append(g[tuple(idx)])
        return out

    return _emit(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), vjp)


def take(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    a = _lift(a)
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"take [{start}:{stop}] out of range for axis extent {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit(a.data[idx], (a,), vjp)


def split(a, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    """Cut ``a`` into consecutive pieces along ``axis``; inverse of :func:`concat`."""
    a = _lift(a)
    ax = axis % a.ndim
    if any(n < 0 for n in sizes) or int(np.sum(sizes)) != a.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to extent {a.shape[ax]}")
    bounds = np.cumsum([0] + list(sizes))
    pieces = []
    for k in range(len(sizes)):
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(bounds[k], bounds[k + 1])
        pieces.append(np.ascontiguousarray(a.data[tuple(idx)]))
    return _emit_many(pieces, (a,), lambda gs: (np.concatenate(gs, axis=ax),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def tile_rows(v, n: int) -> Tensor:
    """Stack a vector ``n`` times into an ``(n, d)`` matrix (explicit bias broadcast)."""
    v = _lift(v)
    if v.ndim != 1:
        raise ShapeError(f"tile_rows expects a vector, got shape {v.shape}")
    return _emit(np.broadcast_to(v.data, (n, v.shape[0])).copy(), (v,), lambda g: (g.sum(axis=0),))


def gather_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; the adjoint scatter-adds into the table."""
    table = _lift(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.shape}")
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ShapeError("gather_rows ids must be a flat list")
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        as_int = ids.astype(np.int64)
        if not np.array_equal(as_int, ids):
            raise ValueError("gather_rows ids must be integers")
        ids = as_int
    ids = ids.astype(np.int64, copy=False)
    n_rows = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n_rows)]
    if bad.size:
        raise IndexError(f"gather_rows id {int(bad[0])} outside [0, {n_rows})")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _emit(table.data[ids], (table,), vjp)


def reduce(op: str, a, axis: int | None = None) -> Tensor:
    a = _lift(a)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    out = a.data.sum(axis=axis)
    if op == "mean":
        out = out / count
    scale = 1.0 / count if op == "mean" else 1.0

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    return reduce("sum", a, axis)


def mean(a, axis: int | None = None) -> Tensor:
    return reduce("mean", a, axis)


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(f: Callable[[], float], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f()`` with respect to ``param`` (perturbed in place).

    ``f`` must evaluate without a tape; it is called ``2 * param.size`` times.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f()
        flat[k] = orig - eps
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * eps)
    return grad


def gradients_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-6) -> bool:
    """True when every entry agrees within ``rtol`` relative or ``atol`` absolute."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all((diff <= rtol * scale) | (diff <= atol)))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(diff / scale)) if diff.size else 0.0


def collect(params: Iterable[Tensor], grads: Gradients) -> list[np.ndarray]:
    return [grads[p] for p in params]
