"""Dense float64 tensors with taped reverse mode and dual-number forward mode.

Every primitive carries three rules: the primal computation, a vector-Jacobian
product used by the reverse sweep, and a Jacobian-vector product evaluated
eagerly alongside the primal whenever an operand carries a tangent. A forward
pass over tangent-carrying inputs therefore yields the primal and the JVP in
one sweep, while the primal alone is what gets recorded for backpropagation.
Tangents are never taped, so anything derived from them is stop-gradient by
construction.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit as _expit

DTYPE = np.float64


class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met."""


class UnimplementedPrimitiveError(NotImplementedError):
    def __init__(self, name: str, mode: str):
        super().__init__(f"primitive '{name}' has no {mode} rule")
        self.primitive = name
        self.mode = mode


class Tensor:
    """Immutable array value, optionally paired with a forward-mode tangent."""

    __slots__ = ("data", "tangent", "requires_grad", "name", "flags", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, tangent=None, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr is data and arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        self.data = arr
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=DTYPE)
            if tangent.shape != arr.shape:
                raise ContractViolation(f"tangent shape {tangent.shape} != primal shape {arr.shape}")
            tangent = tangent.copy()
            tangent.setflags(write=False)
        self.tangent = tangent
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.flags: frozenset[str] = frozenset()
        self._tape: Tape | None = None

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        extra = ", tangent" if self.tangent is not None else ""
        return f"Tensor(shape={self.shape}{extra}, data={np.array2string(self.data, threshold=8)})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass(frozen=True)
class DualTensor:
    primal: Tensor
    tangent: Tensor

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ContractViolation(
                f"dual shapes differ: {self.primal.shape} vs {self.tangent.shape}"
            )


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape


@dataclass
class TapeRecord:
    primitive: "Primitive"
    inputs: tuple[Tensor, ...]
    output: Tensor
    params: dict[str, Any]


@dataclass
class Tape:
    """Ordered record of primitive applications for one loss evaluation.

    Single use: `gradient` consumes the tape.
    """

    records: list[TapeRecord] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise ContractViolation("tape already consumed; create a new Tape")
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().stack
        assert stack and stack[-1] is self
        stack.pop()

    def replay(self) -> bool:
        """Recompute every recorded primal and compare bit-for-bit."""
        for rec in self.records:
            out = rec.primitive.forward(*(t.data for t in rec.inputs), **rec.params)
            if not np.array_equal(np.asarray(out, dtype=DTYPE), rec.output.data, equal_nan=True):
                return False
        return True

    def reset(self) -> None:
        for rec in self.records:
            rec.output._tape = None
        self.records = []
        self.consumed = True


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape | None] = []


_STATE = _TapeState()


def _state() -> _TapeState:
    return _STATE


def active_tape() -> Tape | None:
    stack = _state().stack
    return stack[-1] if stack else None


@contextmanager
def stop_gradient():
    """Evaluate without recording anything on the enclosing tape."""
    stack = _state().stack
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


# --------------------------------------------------------------------------
# Primitive machinery


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple] | None = None
    jvp: Callable[..., np.ndarray] | None = None

    def __call__(self, *args, **params) -> Tensor:
        return apply(self, *args, **params)


def apply(prim: Primitive, *args, **params) -> Tensor:
    inputs = tuple(as_tensor(a) for a in args)
    datas = [t.data for t in inputs]
    out = _wrap(prim.forward(*datas, **params))

    tangents = [t.tangent for t in inputs]
    if any(tg is not None for tg in tangents):
        if prim.jvp is None:
            raise UnimplementedPrimitiveError(prim.name, "forward-mode")
        tg = prim.jvp(tangents, out.data, *datas, **params)
        tg = np.broadcast_to(np.asarray(tg, dtype=DTYPE), out.shape).copy()
        tg.setflags(write=False)
        out.tangent = tg

    tape = active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        if prim.vjp is None:
            raise UnimplementedPrimitiveError(prim.name, "reverse-mode")
        tape.records.append(TapeRecord(prim, inputs, out, dict(params)))
        out._tape = tape
    return out


def _wrap(arr) -> Tensor:
    # fresh forward results are not aliased elsewhere, so they are frozen in place
    arr = np.asarray(arr, dtype=DTYPE)
    if not arr.flags.owndata or not arr.flags.writeable:
        arr = arr.copy()
    arr.setflags(write=False)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.tangent = None
    out.requires_grad = False
    out.name = None
    out.flags = frozenset()
    out._tape = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _tsum(*terms):
    present = [t for t in terms if t is not None]
    if not present:
        return 0.0
    total = present[0]
    for t in present[1:]:
        total = total + t
    return total


def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def _fwd_add(a, b):
    _check_broadcast(a, b, "add")
    return a + b


def _fwd_sub(a, b):
    _check_broadcast(a, b, "sub")
    return a - b


def _fwd_mul(a, b):
    _check_broadcast(a, b, "mul")
    return a * b


def _fwd_div(a, b):
    _check_broadcast(a, b, "div")
    return a / b


add = Primitive(
    "add",
    _fwd_add,
    vjp=lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    jvp=lambda tg, out, a, b: _tsum(tg[0], tg[1]),
)

sub = Primitive(
    "sub",
    _fwd_sub,
    vjp=lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    jvp=lambda tg, out, a, b: _tsum(tg[0], None if tg[1] is None else -tg[1]),
)

mul = Primitive(
    "mul",
    _fwd_mul,
    vjp=lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    jvp=lambda tg, out, a, b: _tsum(
        None if tg[0] is None else tg[0] * b,
        None if tg[1] is None else a * tg[1],
    ),
)

div = Primitive(
    "div",
    _fwd_div,
    vjp=lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
    jvp=lambda tg, out, a, b: _tsum(
        None if tg[0] is None else tg[0] / b,
        None if tg[1] is None else -out * tg[1] / b,
    ),
)

neg = Primitive(
    "neg",
    lambda a: -a,
    vjp=lambda g, out, a: (-g,),
    jvp=lambda tg, out, a: -tg[0],
)


def _fwd_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _vjp_matmul(g, out, a, b):
    a2 = a if a.ndim == 2 else a[None, :]
    b2 = b if b.ndim == 2 else b[:, None]
    g2 = g.reshape(a2.shape[0], b2.shape[1])
    ga = (g2 @ b2.T).reshape(a.shape)
    gb = (a2.T @ g2).reshape(b.shape)
    return ga, gb


matmul = Primitive(
    "matmul",
    _fwd_matmul,
    vjp=_vjp_matmul,
    jvp=lambda tg, out, a, b: _tsum(
        None if tg[0] is None else tg[0] @ b,
        None if tg[1] is None else a @ tg[1],
    ),
)


def _sigmoid(x):
    return _expit(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


silu = Primitive(
    "silu",
    lambda a: a * _sigmoid(a),
    vjp=lambda g, out, a: (g * _silu_grad(a),),
    jvp=lambda tg, out, a: tg[0] * _silu_grad(a),
)

sin = Primitive(
    "sin",
    np.sin,
    vjp=lambda g, out, a: (g * np.cos(a),),
    jvp=lambda tg, out, a: tg[0] * np.cos(a),
)

cos = Primitive(
    "cos",
    np.cos,
    vjp=lambda g, out, a: (-g * np.sin(a),),
    jvp=lambda tg, out, a: -tg[0] * np.sin(a),
)

exp = Primitive(
    "exp",
    np.exp,
    vjp=lambda g, out, a: (g * out,),
    jvp=lambda tg, out, a: tg[0] * out,
)

def _half_over(out):
    # infinite slope at 0 is the honest answer; the caller sees it via Gradients.nonfinite
    with np.errstate(divide="ignore", invalid="ignore"):
        return 0.5 / out


sqrt = Primitive(
    "sqrt",
    np.sqrt,
    vjp=lambda g, out, a: (g * _half_over(out),),
    jvp=lambda tg, out, a: tg[0] * _half_over(out),
)

square = Primitive(
    "square",
    np.square,
    vjp=lambda g, out, a: (2.0 * g * a,),
    jvp=lambda tg, out, a: 2.0 * a * tg[0],
)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


sum_ = Primitive(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    vjp=lambda g, out, a, axis=None, keepdims=False: (_expand_reduced(g, a.shape, axis, keepdims).copy(),),
    jvp=lambda tg, out, a, axis=None, keepdims=False: np.sum(tg[0], axis=axis, keepdims=keepdims),
)


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[ax] for ax in axes]))


mean_ = Primitive(
    "mean",
    lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
    vjp=lambda g, out, a, axis=None, keepdims=False: (
        _expand_reduced(g, a.shape, axis, keepdims) / _count(a.shape, axis),
    ),
    jvp=lambda tg, out, a, axis=None, keepdims=False: np.mean(tg[0], axis=axis, keepdims=keepdims),
)


def _safe_div(num, den):
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, 0.0)


# Euclidean norm over the last axis; the derivative at the origin is taken as 0.
l2norm = Primitive(
    "l2norm",
    lambda a: np.sqrt(np.sum(a * a, axis=-1)),
    vjp=lambda g, out, a: (np.expand_dims(g, -1) * _safe_div(a, np.expand_dims(out, -1)),),
    jvp=lambda tg, out, a: _safe_div(np.sum(a * tg[0], axis=-1), out),
)


def _fwd_dot(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"dot: shapes differ {a.shape} vs {b.shape}")
    return np.sum(a * b, axis=-1)


# Inner product over the last axis (row-wise for batches).
dot = Primitive(
    "dot",
    _fwd_dot,
    vjp=lambda g, out, a, b: (np.expand_dims(g, -1) * b, np.expand_dims(g, -1) * a),
    jvp=lambda tg, out, a, b: _tsum(
        None if tg[0] is None else np.sum(tg[0] * b, axis=-1),
        None if tg[1] is None else np.sum(a * tg[1], axis=-1),
    ),
)


def _clamp_mask(a, lo, hi):
    return ((a >= lo) & (a <= hi)).astype(DTYPE)


_clamp = Primitive(
    "clamp",
    lambda a, lo, hi: np.minimum(np.maximum(a, lo), hi),
    vjp=lambda g, out, a, lo, hi: (g * _clamp_mask(a, lo, hi),),
    jvp=lambda tg, out, a, lo, hi: tg[0] * _clamp_mask(a, lo, hi),
)


def _fwd_take(table, idx):
    return table[idx.astype(np.int64)]


def _vjp_take(g, out, table, idx):
    gt = np.zeros_like(table)
    np.add.at(gt, idx.astype(np.int64), g)
    return gt, np.zeros_like(idx)


# Row gather for embedding tables; indices are integer-valued and carry no tangent.
take_rows = Primitive(
    "take_rows",
    _fwd_take,
    vjp=_vjp_take,
    jvp=lambda tg, out, table, idx: 0.0 if tg[0] is None else _fwd_take(tg[0], idx),
)

reshape = Primitive(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    vjp=lambda g, out, a, shape: (np.reshape(g, a.shape),),
    jvp=lambda tg, out, a, shape: np.reshape(tg[0], shape),
)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return sum_(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return mean_(x, axis=axis, keepdims=keepdims)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Elementwise min(max(x, lo), hi).

    Gradient and tangent pass through where lo <= x <= hi and are zero
    outside. NaN entries stay NaN and mark the result with the
    ``"nan_input"`` flag.
    """
    if lo > hi:
        raise ContractViolation(f"clamp: lo={lo} > hi={hi}")
    out = _clamp(x, lo=float(lo), hi=float(hi))
    if np.isnan(out.data).any():
        out.flags = out.flags | {"nan_input"}
    return out


# --------------------------------------------------------------------------
# Differentiation entry points


class Gradients(dict):
    """Mapping parameter key -> gradient Tensor, with a non-finite flag."""

    nonfinite: bool = False


def gradient(loss: Tensor, params) -> Gradients:
    """Reverse sweep over the tape that produced ``loss``.

    ``params`` is either a mapping of name -> Tensor or a sequence of Tensors;
    the result is keyed accordingly (names or positions). Parameters that did
    not take part in the computation receive zero gradients. The tape is
    consumed.
    """
    if loss.size != 1:
        raise ContractViolation(f"gradient requires a scalar loss, got shape {loss.shape}")
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = list(enumerate(params))

    tape = loss._tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if tape is not None:
        for rec in reversed(tape.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.primitive.vjp(g, rec.output.data, *(t.data for t in rec.inputs), **rec.params)
            for inp, gi in zip(rec.inputs, in_grads):
                if not (inp.requires_grad or inp._tape is tape):
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
        tape.reset()

    out = Gradients()
    for key, p in items:
        g = grads.get(id(p))
        out[key] = Tensor(np.zeros_like(p.data) if g is None else g)
    out.nonfinite = any(not np.all(np.isfinite(g.data)) for g in out.values())
    return out


def value_and_grad(f: Callable[..., Tensor], params, *args, **kwargs) -> tuple[Tensor, Gradients]:
    with Tape():
        loss = f(*args, **kwargs)
        grads = gradient(loss, params)
    return loss, grads


def jvp(f: Callable[..., Tensor], inputs: Sequence, tangents: Sequence) -> DualTensor:
    """Evaluate ``f(*inputs)`` and ``J_f(inputs) @ tangents`` in one forward sweep."""
    if len(inputs) != len(tangents):
        raise ContractViolation(f"jvp: {len(inputs)} inputs but {len(tangents)} tangents")
    seeded = []
    for i, (x, u) in enumerate(zip(inputs, tangents)):
        x = as_tensor(x)
        u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=DTYPE)
        if u.shape != x.shape:
            raise ContractViolation(f"jvp: input {i} has shape {x.shape}, tangent {u.shape}")
        seeded.append(Tensor(x.data, tangent=u))
    out = as_tensor(f(*seeded))
    tangent = out.tangent if out.tangent is not None else np.zeros_like(out.data)
    return DualTensor(out, Tensor(tangent))


def parameters_tensors(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def all_finite(xs: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(x.data)) for x in xs)
