"""N-dimensional float tensors with define-by-run reverse-mode autodiff.

Operations executed while a :class:`Tape` is active append a record holding the
backward rule (a closure over whatever forward values it needs). Tensors created
with ``requires_grad=True`` are leaves: they join the tape the first time an
operation consumes them and receive ``.grad`` when :func:`backward` runs.
Without an active tape nothing is recorded, which is how inference runs.

Data is stored as row-major numpy arrays. A scalar is a tensor of shape ``(1,)``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidAxisError, InvalidInputError, InvalidShapeError, NoTapeError

_state = threading.local()
_default_dtype = np.dtype(np.float32)


def _as_dtype(precision) -> np.dtype:
    if precision in (32, "32", "float32"):
        return np.dtype(np.float32)
    if precision in (64, "64", "float64"):
        return np.dtype(np.float64)
    dtype = np.dtype(precision)
    if dtype not in (np.float32, np.float64):
        raise InvalidInputError(f"unsupported precision {precision!r}")
    return dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(precision) -> None:
    """Set the dtype used for new tensors: 32 / 64 or a numpy float dtype."""
    global _default_dtype
    _default_dtype = _as_dtype(precision)


@contextlib.contextmanager
def precision(bits):
    global _default_dtype
    previous = _default_dtype
    _default_dtype = _as_dtype(bits)
    try:
        yield _default_dtype
    finally:
        _default_dtype = previous


class Record:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind: str, inputs: tuple, output: int, backward: Callable):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self):
        return f"Record({self.kind}, inputs={self.inputs}, output={self.output})"


class Tape:
    """Ordered list of operation records; usable as a context manager.

    Tapes nest: the innermost active tape receives new records. A tape is
    confined to the thread that entered it.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        tid = self._next_id
        self._next_id += 1
        return tid

    def _track_leaf(self, tensor: "Tensor") -> int:
        tid = self._new_id()
        tensor._tape = self
        tensor._tid = tid
        self._leaves[tid] = tensor
        return tid

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, even inside an enclosing tape."""
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "_tid")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=_as_dtype(dtype) if dtype is not None else _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_extents(arr.shape)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self._tid = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._tape = None
        t._tid = None
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self._tape is not None and self._tape is active_tape()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(negate(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def max(self, axes=None):
        return reduce_max(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = perm[0]
        return transpose(self, perm)

    def relu(self):
        return relu(self)


def _check_extents(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShapeError(f"all extents must be >= 1, got {list(shape)}")
    return shape


def record_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
              backward_fn: Callable[[np.ndarray], Iterable]) -> Tensor:
    """Wrap ``out`` and append a tape record if any input is tracked.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is None:
        return result
    ids = []
    tracked = False
    for t in inputs:
        if t._tape is tape:
            ids.append(t._tid)
            tracked = True
        elif t.requires_grad:
            ids.append(tape._track_leaf(t))
            tracked = True
        else:
            ids.append(None)
    if not tracked:
        return result
    result._tape = tape
    result._tid = tape._new_id()
    tape.records.append(Record(kind, tuple(ids), result._tid, backward_fn))
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reachable from ``loss``.

    Calling it twice without resetting grads accumulates twice.
    """
    if loss.shape != (1,):
        raise InvalidShapeError(f"backward needs a scalar of shape (1,), got {loss.shape}")
    tape = loss._tape
    if tape is None or loss._tid is None:
        raise NoTapeError("loss is not attached to a tape")
    grads = {loss._tid: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        if rec.output > loss._tid:
            continue
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for tid, ig in zip(rec.inputs, rec.backward(g)):
            if tid is None or ig is None:
                continue
            prev = grads.get(tid)
            grads[tid] = ig if prev is None else prev + ig
    for tid, leaf in tape._leaves.items():
        g = grads.get(tid)
        if g is None:
            continue
        g = np.array(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# -- creation -----------------------------------------------------------------

def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return full(shape, 0.0, dtype=dtype, requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad=False) -> Tensor:
    return full(shape, 1.0, dtype=dtype, requires_grad=requires_grad)


def full(shape, value: float, dtype=None, requires_grad=False) -> Tensor:
    shape = _check_extents(shape)
    return Tensor(np.full(shape, value), requires_grad=requires_grad, dtype=dtype)


def uniform(shape, lo: float, hi: float, seed: int, dtype=None, requires_grad=False) -> Tensor:
    shape = _check_extents(shape)
    data = np.random.default_rng(seed).uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def gaussian(shape, mean: float, std: float, seed: int, dtype=None, requires_grad=False) -> Tensor:
    shape = _check_extents(shape)
    data = np.random.default_rng(seed).normal(mean, std, size=shape)
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def create(shape, init: str = "zeros", *args, **kwargs) -> Tensor:
    """Dispatch on ``init``: zeros, ones, constant(v), uniform(lo, hi, seed), gaussian(mean, std, seed)."""
    makers = {"zeros": zeros, "ones": ones, "constant": full, "uniform": uniform, "gaussian": gaussian}
    if init not in makers:
        raise InvalidInputError(f"unknown init {init!r}")
    return makers[init](shape, *args, **kwargs)


# -- elementwise ----------------------------------------------------------------

def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record_op("div", (a, b), out, lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("scale", (a,), a.data * c, lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("shift", (a,), a.data + c, lambda g: (g,))


def negate(a: Tensor) -> Tensor:
    return record_op("negate", (a,), -a.data, lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def sqrt_eps(a: Tensor, eps: float = 1e-8) -> Tensor:
    out = np.sqrt(a.data + eps)
    return record_op("sqrt_eps", (a,), out, lambda g: (0.5 * g / out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record_op("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record_op("log", (a,), np.log(ad), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return record_op("softplus", (a,), np.logaddexp(0, ad).astype(a.dtype), lambda g: (g * sig,))


_UNARY = {"relu": relu, "negate": negate, "square": square, "exp": exp, "log": log, "softplus": softplus}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, c: float | None = None) -> Tensor:
    """Single entry point over the elementwise family.

    ``c`` is the constant of ``scale``/``shift`` and the epsilon of ``sqrt-eps``.
    """
    if kind in _BINARY:
        if b is None:
            raise InvalidInputError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, c)
    if kind == "shift":
        return shift(a, c)
    if kind in ("sqrt-eps", "sqrt_eps"):
        return sqrt_eps(a, 1e-8 if c is None else c)
    raise InvalidInputError(f"unknown elementwise kind {kind!r}")


# -- reductions -----------------------------------------------------------------

def _norm_axes(a: Tensor, axes) -> tuple:
    nd = a.ndim
    if axes is None:
        return tuple(range(nd))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    out = []
    for ax in axes:
        if not isinstance(ax, (int, np.integer)) or not -nd <= ax < nd:
            raise InvalidAxisError(f"axis {ax!r} invalid for {nd}-d tensor")
        out.append(int(ax) % nd)
    if len(set(out)) != len(out):
        raise InvalidAxisError(f"duplicate axes in {tuple(axes)}")
    return tuple(sorted(out))


def _kept_shape(shape, axes) -> list:
    return [1 if i in axes else s for i, s in enumerate(shape)]


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(a, axes)
    keep = _kept_shape(a.shape, axes)
    shape = a.shape
    out = np.sum(a.data, axis=axes)
    return record_op("sum", (a,), out, lambda g: (np.broadcast_to(g.reshape(keep), shape),))


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(a, axes)
    keep = _kept_shape(a.shape, axes)
    shape = a.shape
    n = int(np.prod([a.shape[i] for i in axes]))
    out = np.mean(a.data, axis=axes)
    return record_op("mean", (a,), out, lambda g: (np.broadcast_to(g.reshape(keep) / n, shape),))


def reduce_max(a: Tensor, axes=None) -> Tensor:
    """Max over ``axes``; gradient goes to the first maximal element in row-major order."""
    axes = _norm_axes(a, axes)
    nd = a.ndim
    rest = [i for i in range(nd) if i not in axes]
    moved = np.transpose(a.data, rest + list(axes))
    kept = moved.shape[: len(rest)]
    flat = moved.reshape(kept + (-1,))
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]
    inv = np.argsort(rest + list(axes))

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx, g.reshape(kept + (1,)), axis=-1)
        return (gflat.reshape(moved.shape).transpose(inv),)

    return record_op("max", (a,), out, bwd)


def reduce(kind: str, a: Tensor, axes=None) -> Tensor:
    ops = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if kind not in ops:
        raise InvalidInputError(f"unknown reduction {kind!r}")
    return ops[kind](a, axes)


# -- reordering -----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if shape.count(-1) > 1 or known == 0 or a.size % known:
            raise InvalidShapeError(f"cannot reshape {a.shape} to {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    _check_extents(shape)
    if int(np.prod(shape)) != a.size:
        raise InvalidShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    src = a.shape
    return record_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, perm) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(a.ndim)):
        raise InvalidAxisError(f"{perm} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(perm))
    return record_op("transpose", (a,), a.data.transpose(perm), lambda g: (g.transpose(inv),))


def reverse(a: Tensor, axis: int) -> Tensor:
    (axis,) = _norm_axes(a, axis)
    return record_op("reverse", (a,), np.flip(a.data, axis), lambda g: (np.flip(g, axis),))


def reorder(kind: str, a: Tensor, arg) -> Tensor:
    ops = {"reshape": reshape, "transpose": transpose, "reverse": reverse}
    if kind not in ops:
        raise InvalidInputError(f"unknown reorder kind {kind!r}")
    return ops[kind](a, arg)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    first = tensors[0]
    (axis,) = _norm_axes(first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, first.shape)) if i != axis
        ):
            raise InvalidShapeError(f"concat: {t.shape} incompatible with {first.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record_op("concat", tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Expand size-1 extents of ``a`` to ``shape`` (same rank only)."""
    shape = _check_extents(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise InvalidShapeError(f"cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return record_op("broadcast", (a,), np.broadcast_to(a.data, shape),
                     lambda g: (g.sum(axis=axes, keepdims=True),))


def cast(a: Tensor, dtype) -> Tensor:
    dtype = _as_dtype(dtype)
    src = a.dtype
    return record_op("cast", (a,), a.data.astype(dtype), lambda g: (g.astype(src),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record_op("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


# -- verification ---------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Largest relative disagreement between backward and central differences.

    Error per element is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``x`` is perturbed in place and restored; its grad and flags are preserved.
    """
    if h <= 0:
        raise InvalidInputError("step h must be positive")
    saved = (x.grad, x.requires_grad, x._tape, x._tid)
    x.data = np.ascontiguousarray(x.data)
    try:
        x.grad = None
        x.requires_grad = True
        with Tape():
            out = f(x)
            if out.shape != (1,):
                raise InvalidShapeError(f"f must return shape (1,), got {out.shape}")
            if out._tape is not None:
                backward(out)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.astype(np.float64).ravel()
        flat = x.data.reshape(-1)
        numeric = np.empty(x.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(x).data[0])
                flat[i] = orig - h
                fm = float(f(x).data[0])
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)
    finally:
        x.grad, x.requires_grad, x._tape, x._tid = saved
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
