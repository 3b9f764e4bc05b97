"""Reverse-mode autodiff over dense numpy arrays.

Every ``Function`` expresses its backward pass in terms of other
``Function`` applications, so gradients can themselves be differentiated
(``create_graph=True``).  Functions may additionally provide a pure-numpy
``backward_np`` that the engine uses when no higher-order graph is needed.
"""
from __future__ import annotations

import contextlib
import warnings
from typing import Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """An operator received operands with incompatible shapes."""


class SecondOrderError(RuntimeError):
    """A graph needed for double backprop contains a first-order-only operator."""


class DetachedLeafWarning(UserWarning):
    """Gradient requested for a tensor the output does not depend on."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad(flag: bool = True):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the graph node that produced it."""

    __slots__ = ("data", "requires_grad", "_ctx", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._ctx: Function | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={type(self._ctx).__name__}" if self._ctx is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}{op})"

    # -- arithmetic ----------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._wrap(other))

    def __rsub__(self, other):
        return Sub.apply(self._wrap(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other):
        return Div.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, self._wrap(other))

    def __getitem__(self, key):
        return GetItem.apply(self, key=key)

    # -- shape / reduction helpers --------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        axes = _norm_axis(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def flatten(self, start: int = 1):
        return self.reshape(self.shape[:start] + (-1,))

    def relu(self):
        return Relu.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def backward(self, grad_output=None):
        raise NotImplementedError("use dsacondense.autodiff.grad(output, inputs)")


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Function:
    """One node of the computation graph.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` on
    Tensors.  ``second_order`` is False for operators whose backward is not
    itself differentiable.
    """

    second_order = True
    backward_np = None  # optional fast path: (ndarray) -> tuple[ndarray | None, ...]

    def __init__(self):
        self.parents: tuple[Tensor, ...] = ()
        self.needs: tuple[bool, ...] = ()
        self.output = None

    @classmethod
    def apply(cls, *inputs: Tensor, **params) -> Tensor:
        fn = cls()
        fn.parents = inputs
        arrays = [t.data for t in inputs]
        try:
            out = fn.forward(*arrays, **params)
        except ShapeError:
            raise
        except (ValueError, IndexError) as exc:
            shapes = ", ".join(str(a.shape) for a in arrays)
            raise ShapeError(f"{cls.__name__}: cannot apply to shapes [{shapes}]: {exc}") from exc
        result = Tensor.__new__(Tensor)
        result.data = out
        result.name = None
        needs = tuple(t.requires_grad for t in inputs)
        if _GRAD_ENABLED and any(needs):
            result.requires_grad = True
            result._ctx = fn
            fn.needs = needs
            fn.output = result.data
        else:
            result.requires_grad = False
            result._ctx = None
            fn.parents = ()
        return result

    def forward(self, *arrays, **params) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent, need in zip(node._ctx.parents, node._ctx.needs):
                if need and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor] | Tensor,
    grad_output: Tensor | np.ndarray | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors carry their own graph and
    can be differentiated again.  Inputs the output does not depend on get a
    zero gradient and trigger a ``DetachedLeafWarning``.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"gradient root must be scalar, got shape {output.shape}")
        seed = np.ones_like(output.data)
    else:
        seed = grad_output.data if isinstance(grad_output, Tensor) else np.asarray(grad_output, output.dtype)
    wanted = {id(t) for t in inputs}
    grads: dict[int, Tensor | np.ndarray] = {}
    if output.requires_grad:
        order = _topo_order(output)
        use_np = not create_graph
        if create_graph:
            for node in order:
                if node._ctx is not None and not node._ctx.second_order:
                    raise SecondOrderError(
                        f"operator {type(node._ctx).__name__} does not support second-order differentiation"
                    )
        grads[id(output)] = seed if use_np else (
            grad_output if isinstance(grad_output, Tensor) else Tensor(seed)
        )
        # only nodes with a path to a requested input need a gradient
        relevant = set(wanted)
        for node in order:
            if node._ctx is not None and any(id(p) in relevant for p in node._ctx.parents):
                relevant.add(id(node))
        with enable_grad(create_graph):
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None or node._ctx is None:
                    continue
                if id(node) not in wanted:
                    del grads[id(node)]
                fn = node._ctx
                full_needs = fn.needs
                fn.needs = tuple(n and id(p) in relevant for p, n in zip(fn.parents, full_needs))
                try:
                    if use_np and fn.backward_np is not None:
                        parent_grads = fn.backward_np(g)
                    else:
                        gt = Tensor(g) if use_np else g
                        parent_grads = fn.backward(gt)
                        if use_np:
                            parent_grads = tuple(None if pg is None else pg.data for pg in parent_grads)
                    needs = fn.needs
                finally:
                    fn.needs = full_needs
                for parent, need, pg in zip(fn.parents, needs, parent_grads):
                    if not need or pg is None:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
    result = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            warnings.warn(
                f"output does not depend on {t!r}; returning zero gradient",
                DetachedLeafWarning,
                stacklevel=2,
            )
            g = np.zeros_like(t.data)
        if not isinstance(g, Tensor):
            g = Tensor(g, dtype=t.dtype)
        elif not create_graph:
            g = g.detach()
        result.append(g)
    return result[0] if single else result


# ----------------------------------------------------------------------
# elementwise and shape primitives
# ----------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    return SumTo.apply(g, shape=shape)


def _unbroadcast_np(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return _sum_to(g, shape)


def _sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.parents
        return (_unbroadcast(g, a.shape) if self.needs[0] else None,
                _unbroadcast(g, b.shape) if self.needs[1] else None)

    def backward_np(self, g):
        a, b = self.parents
        return (_unbroadcast_np(g, a.shape) if self.needs[0] else None,
                _unbroadcast_np(g, b.shape) if self.needs[1] else None)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.parents
        return (_unbroadcast(g, a.shape) if self.needs[0] else None,
                _unbroadcast(-g, b.shape) if self.needs[1] else None)

    def backward_np(self, g):
        a, b = self.parents
        return (_unbroadcast_np(g, a.shape) if self.needs[0] else None,
                _unbroadcast_np(-g, b.shape) if self.needs[1] else None)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.parents
        ga = _unbroadcast(g * b, a.shape) if self.needs[0] else None
        gb = _unbroadcast(g * a, b.shape) if self.needs[1] else None
        return ga, gb

    def backward_np(self, g):
        a, b = self.parents
        ga = _unbroadcast_np(g * b.data, a.shape) if self.needs[0] else None
        gb = _unbroadcast_np(g * a.data, b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.parents
        ga = _unbroadcast(g / b, a.shape) if self.needs[0] else None
        gb = _unbroadcast(-g * a / (b * b), b.shape) if self.needs[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)

    def backward_np(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a, exponent):
        self.exponent = exponent
        return a ** exponent

    def backward(self, g):
        (a,) = self.parents
        p = self.exponent
        if p == 0.0:
            return (g * 0.0,)
        if p == 1.0:
            return (g,)
        return (g * (a ** (p - 1.0)) * p,)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        (a,) = self.parents
        return (g * Exp.apply(a),)

    def backward_np(self, g):
        return (g * self.output,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        (a,) = self.parents
        return (g / a,)


class Sqrt(Function):
    """Square root with a zero subgradient at 0 (keeps norms NaN-free)."""

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g):
        (a,) = self.parents
        positive = (self.output > 0).astype(a.dtype)
        out = Sqrt.apply(a)
        return (g * Tensor(0.5 * positive) / (out + Tensor(1.0 - positive)),)

    def backward_np(self, g):
        out = self.output
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0).astype(out.dtype),)


class Maximum(Function):
    """max(a, c) against a constant threshold; ties route the gradient to ``a``."""

    def forward(self, a, threshold):
        self.threshold = threshold
        return np.maximum(a, np.asarray(threshold, dtype=a.dtype))

    def backward(self, g):
        (a,) = self.parents
        return (g * Tensor((a.data >= self.threshold).astype(a.dtype)),)


class Relu(Function):
    def forward(self, a):
        return np.maximum(a, 0)

    def backward(self, g):
        (a,) = self.parents
        return (g * Tensor((a.data > 0).astype(a.dtype)),)

    def backward_np(self, g):
        (a,) = self.parents
        return (g * (a.data > 0),)


class LeakyRelu(Function):
    def forward(self, a, slope=0.01):
        self.slope = slope
        return np.where(a > 0, a, a * slope)

    def backward(self, g):
        (a,) = self.parents
        return (g * Tensor(np.where(a.data > 0, 1.0, self.slope).astype(a.dtype)),)

    def backward_np(self, g):
        (a,) = self.parents
        return (g * np.where(a.data > 0, 1.0, self.slope).astype(a.dtype),)


class Sigmoid(Function):
    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out

    def backward(self, g):
        (a,) = self.parents
        s = Sigmoid.apply(a)
        return (g * s * (1.0 - s),)

    def backward_np(self, g):
        s = self.output
        return (g * s * (1.0 - s),)


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def _expand_shape(self):
        (a,) = self.parents
        return tuple(1 if i in self.axis else s for i, s in enumerate(a.shape))

    def backward(self, g):
        (a,) = self.parents
        if not self.keepdims:
            g = g.reshape(self._expand_shape())
        return (BroadcastTo.apply(g, shape=a.shape),)

    def backward_np(self, g):
        (a,) = self.parents
        if not self.keepdims:
            g = g.reshape(self._expand_shape())
        return (np.broadcast_to(g, a.shape),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return np.broadcast_to(a, shape)

    def backward(self, g):
        return (_unbroadcast(g, self.in_shape),)

    def backward_np(self, g):
        return (_unbroadcast_np(g, self.in_shape),)


class SumTo(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return _sum_to(a, shape)

    def backward(self, g):
        return (BroadcastTo.apply(g.reshape(_padded_shape(g.shape, len(self.in_shape))), shape=self.in_shape),)

    def backward_np(self, g):
        return (np.broadcast_to(g.reshape(_padded_shape(g.shape, len(self.in_shape))), self.in_shape),)


def _padded_shape(shape, ndim):
    return (1,) * (ndim - len(shape)) + tuple(shape)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)

    def backward_np(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return a.transpose(axes)

    def backward(self, g):
        return (g.transpose(tuple(np.argsort(self.axes))),)

    def backward_np(self, g):
        return (g.transpose(tuple(np.argsort(self.axes))),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"MatMul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.parents
        ga = g @ b.T if self.needs[0] else None
        gb = a.T @ g if self.needs[1] else None
        return ga, gb

    def backward_np(self, g):
        a, b = self.parents
        ga = g @ b.data.T if self.needs[0] else None
        gb = a.data.T @ g if self.needs[1] else None
        return ga, gb


class GetItem(Function):
    def forward(self, a, key):
        self.key = key
        self.in_shape = a.shape
        return np.array(a[key])

    def backward(self, g):
        return (ScatterInto.apply(g, key=self.key, shape=self.in_shape),)

    def backward_np(self, g):
        return (_scatter(g, self.key, self.in_shape),)


def _is_basic_key(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (slice, int, np.integer)) for k in key)


def _scatter(values: np.ndarray, key, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=values.dtype)
    if _is_basic_key(key):
        out[key] = values
    else:
        np.add.at(out, key, values)
    return out


class ScatterInto(Function):
    """Adjoint of ``GetItem``: add ``a`` into zeros of ``shape`` at ``key``."""

    def forward(self, a, key, shape):
        self.key = key
        return _scatter(a, key, shape)

    def backward(self, g):
        return (GetItem.apply(g, key=self.key),)


class Pad(Function):
    """Zero padding; ``widths`` as in ``np.pad``."""

    def forward(self, a, widths):
        self.widths = widths
        return np.pad(a, widths)

    def _key(self, shape):
        return tuple(slice(lo, s - hi) for (lo, hi), s in zip(self.widths, shape))

    def backward(self, g):
        return (g[self._key(g.shape)],)

    def backward_np(self, g):
        return (g[self._key(g.shape)],)


class Flip(Function):
    def forward(self, a, axis):
        self.axis = axis
        return np.flip(a, axis=axis).copy()

    def backward(self, g):
        return (Flip.apply(g, axis=self.axis),)

    def backward_np(self, g):
        return (np.flip(g, axis=self.axis),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def _slices(self, g):
        for lo, hi in zip(self.bounds[:-1], self.bounds[1:]):
            key = [slice(None)] * g.ndim
            key[self.axis] = slice(int(lo), int(hi))
            yield tuple(key)

    def backward(self, g):
        return tuple(g[k] for k in self._slices(g))

    def backward_np(self, g):
        return tuple(g[k] for k in self._slices(g))


class LogSumExp(Function):
    """log(sum(exp(a), axis)) with keepdims, numerically stabilized."""

    def forward(self, a, axis):
        self.axis = axis
        m = a.max(axis=axis, keepdims=True)
        return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))

    def backward(self, g):
        (a,) = self.parents
        softmax = Exp.apply(a - LogSumExp.apply(a, axis=self.axis))
        return (g * softmax,)

    def backward_np(self, g):
        (a,) = self.parents
        return (g * np.exp(a.data - self.output),)


# ----------------------------------------------------------------------
# functional helpers
# ----------------------------------------------------------------------

def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def maximum(a: Tensor, threshold: float) -> Tensor:
    return Maximum.apply(a, threshold=threshold)


def pad(a: Tensor, widths) -> Tensor:
    return Pad.apply(a, widths=tuple(tuple(w) for w in widths))


def flip(a: Tensor, axis: int) -> Tensor:
    return Flip.apply(a, axis=axis)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    return LeakyRelu.apply(a, slope=slope)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    return LogSumExp.apply(a, axis=axis % a.ndim)


def broadcast_to(a: Tensor, shape) -> Tensor:
    return BroadcastTo.apply(a, shape=tuple(shape))
