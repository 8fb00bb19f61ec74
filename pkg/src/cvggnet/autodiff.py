"""Define-by-run reverse-mode differentiation over split complex tensors.

A complex value is differentiated as its pair of real planes: the gradient
of a real loss with respect to ``z = x + yj`` is stored as the complex
tensor ``dL/dx + j dL/dy``.  No Wirtinger calculus is involved.

Recording only happens inside an active :class:`Tape`::

    with Tape():
        loss = model(x)
        backward(loss)

Outside a tape, operations run forward only.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ComplexTensor, RealTensor, ShapeError

# A gradient is an (re, im) pair of arrays for complex values, a bare array for real values.

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Variable:
    """A tensor value plus its accumulated gradient and tape link."""

    __slots__ = ("value", "requires_grad", "node", "_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        if not isinstance(value, (ComplexTensor, RealTensor)):
            raise TypeError(f"Variable holds a ComplexTensor or RealTensor, got {type(value).__name__}")
        self.value = value
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self._grad = None
        self.name = name

    @property
    def is_complex(self) -> bool:
        return isinstance(self.value, ComplexTensor)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    @property
    def re(self) -> np.ndarray:
        return self.value.re

    @property
    def im(self) -> np.ndarray:
        return self.value.im

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self):
        """Accumulated gradient, materialized as zeros on first access."""
        if self._grad is None:
            self._grad = _zeros_like(self.value)
        if self.is_complex:
            return ComplexTensor(self._grad[0], self._grad[1])
        return RealTensor(self._grad)

    def grad_planes(self):
        """Raw mutable gradient planes (zeros if never accumulated)."""
        if self._grad is None:
            self._grad = _zeros_like(self.value)
        return self._grad

    def accumulate(self, g) -> None:
        if self._grad is None:
            self._grad = _copy_grad(g)
        else:
            self._grad = _add_grad(self._grad, g)

    def zero_grad(self) -> None:
        if self._grad is not None:
            if self.is_complex:
                self._grad[0].fill(0)
                self._grad[1].fill(0)
            else:
                self._grad.fill(0)

    def __repr__(self) -> str:
        kind = "complex" if self.is_complex else "real"
        return f"Variable({self.name or '?'}, {kind}, shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Variable):
    """Trainable leaf variable.

    ``kind="real"`` parameters carry a zero imaginary plane that is never
    updated.  ``frozen_imag`` pins the imaginary plane of a complex parameter
    at zero (used by the amplitude-only ablation).
    """

    __slots__ = ("kind", "frozen_imag", "trainable")

    def __init__(self, value: ComplexTensor, name: str = "", kind: str = "complex", trainable: bool = True):
        if not isinstance(value, ComplexTensor):
            raise TypeError("Parameter values are ComplexTensors")
        if kind not in ("complex", "real"):
            raise ValueError(f"unknown parameter kind {kind!r}")
        super().__init__(value, requires_grad=True, name=name)
        self.kind = kind
        self.trainable = trainable
        self.frozen_imag = kind == "real"
        if self.frozen_imag and np.any(value.im != 0):
            raise ValueError(f"real parameter {name!r} has a non-zero imaginary plane")

    def set_planes(self, re: np.ndarray, im: np.ndarray) -> None:
        if re.shape != self.shape or im.shape != self.shape:
            raise ShapeError(f"parameter {self.name}: new planes {re.shape}/{im.shape} vs {self.shape}")
        if self.frozen_imag:
            im = np.zeros_like(re)
        self.value = ComplexTensor(re, im, dtype=self.dtype)

    def freeze_imag(self) -> None:
        self.frozen_imag = True
        self.set_planes(np.array(self.re), np.zeros_like(self.re))

    @property
    def trainable_reals(self) -> int:
        if not self.trainable:
            return 0
        return self.value.size * (1 if self.frozen_imag else 2)


@dataclass(eq=False)
class Node:
    index: int
    output: Variable
    inputs: tuple
    backward: Callable
    op: str
    tape: "Tape" = field(repr=False)


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, output: Variable, inputs: Sequence[Variable], backward: Callable, op: str) -> None:
        node = Node(len(self.nodes), output, tuple(inputs), backward, op, self)
        self.nodes.append(node)
        output.node = node
        output.requires_grad = True

    def backward(self, loss: Variable) -> None:
        _check_scalar(loss)
        if loss.node is None or loss.node.tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, object] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.nodes[: loss.node.index + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.accumulate(gi)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = _copy_grad(gi) if prev is None else _add_grad(prev, gi)


def _check_scalar(loss: Variable) -> None:
    if loss.is_complex:
        raise ShapeError("loss must be real-valued")
    if loss.shape not in ((), (1,)):
        raise ShapeError(f"loss must be scalar-shaped, got {loss.shape}")


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(value) into every reachable leaf that requires grad."""
    _check_scalar(loss)
    if loss.node is None:
        raise ValueError("loss has no recorded graph; run the forward pass inside a Tape")
    loss.node.tape.backward(loss)


def zero_grads(params: Sequence[Variable]) -> None:
    for p in params:
        p.zero_grad()


def _zeros_like(value):
    if isinstance(value, ComplexTensor):
        return [np.zeros(value.shape, value.dtype), np.zeros(value.shape, value.dtype)]
    return np.zeros(value.shape, value.dtype)


def _copy_grad(g):
    if isinstance(g, (tuple, list)):
        return [np.array(g[0]), np.array(g[1])]
    return np.array(g)


def _add_grad(a, b):
    if isinstance(a, list):
        a[0] += b[0]
        a[1] += b[1]
        return a
    a += b
    return a


def as_variable(x) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(x)


def record(output_value, inputs: Sequence[Variable], backward_fn: Callable, op: str) -> Variable:
    """Wrap ``output_value`` and, if a tape is active and any input needs grad, link it."""
    out = Variable(output_value)
    tape = current_tape()
    if tape is not None and any(v.requires_grad for v in inputs):
        tape.record(out, inputs, backward_fn, op)
    return out


def _check_precision(*vs: Variable) -> None:
    dtypes = {v.dtype for v in vs}
    if len(dtypes) > 1:
        raise TypeError(f"mixed precisions in one graph: {sorted(str(d) for d in dtypes)}")


# ---------------------------------------------------------------------------
# Generic differentiable operations


def add(a: Variable, b: Variable) -> Variable:
    _check_precision(a, b)
    if a.is_complex != b.is_complex or a.shape != b.shape:
        raise ShapeError(f"add: incompatible operands {a.shape} and {b.shape}")
    if a.is_complex:
        value = ComplexTensor.wrap(a.re + b.re, a.im + b.im)
    else:
        value = RealTensor.wrap(a.data + b.data)
    return record(value, (a, b), lambda g: (g, g), "add")


def mul(a: Variable, b: Variable) -> Variable:
    """Element-wise complex product."""
    _check_precision(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ar, ai, br, bi = a.re, a.im, b.re, b.im
    value = ComplexTensor.wrap(ar * br - ai * bi, ar * bi + ai * br)

    def back(g):
        gr, gi = g
        # d/d(ar): gr*br + gi*bi ; d/d(ai): -gr*bi + gi*br
        return (gr * br + gi * bi, gi * br - gr * bi), (gr * ar + gi * ai, gi * ar - gr * ai)

    return record(value, (a, b), back, "mul")


def real_part(a: Variable) -> Variable:
    value = RealTensor.wrap(np.array(a.re))
    return record(value, (a,), lambda g: ((g, np.zeros_like(g)),), "real_part")


def imag_part(a: Variable) -> Variable:
    value = RealTensor.wrap(np.array(a.im))
    return record(value, (a,), lambda g: ((np.zeros_like(g), g),), "imag_part")


def abs2(a: Variable) -> Variable:
    """Squared modulus re^2 + im^2."""
    re, im = a.re, a.im
    value = RealTensor.wrap(re * re + im * im)
    return record(value, (a,), lambda g: ((2 * g * re, 2 * g * im),), "abs2")


def reduce_sum(a: Variable) -> Variable:
    """Sum of all elements of a real variable, returned with shape ()."""
    if a.is_complex:
        raise TypeError("reduce_sum takes a real variable; take real_part or abs2 first")
    shape = a.shape
    value = RealTensor.wrap(np.asarray(a.data.sum(), dtype=a.dtype))
    return record(value, (a,), lambda g: (np.full(shape, g, dtype=a.dtype),), "sum")


def weighted_sum(a: Variable, weights: ComplexTensor | np.ndarray) -> Variable:
    """Real scalar sum(w_re * re + w_im * im), or sum(w * x) for a real variable.

    A random ``weights`` probe turns any tensor output into a scalar loss
    whose gradient is dense, which is what gradient checks need.
    """
    if a.is_complex:
        wr, wi = weights.re, weights.im
        value = RealTensor.wrap(np.asarray((a.re * wr).sum() + (a.im * wi).sum(), dtype=a.dtype))
        return record(value, (a,), lambda g: ((g * wr, g * wi),), "weighted_sum")
    w = np.asarray(weights)
    value = RealTensor.wrap(np.asarray((a.data * w).sum(), dtype=a.dtype))
    return record(value, (a,), lambda g: (g * w,), "weighted_sum")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


class NondeterminismError(RuntimeError):
    """The function under check gave different values on repeated evaluation."""


@dataclass
class CoordinateFailure:
    param: str
    plane: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    failures: list[CoordinateFailure]
    tolerance: float
    coordinates: int

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Variable],
    params: Sequence[Variable],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central finite differences.

    ``f`` rebuilds the graph from the current parameter values on every
    call.  Every real coordinate of every parameter is perturbed (frozen
    imaginary planes are skipped).  Existing gradients on ``params`` are
    overwritten.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs 64-bit parameters; {p.name or p!r} is {p.dtype}")

    def evaluate() -> float:
        out = f()
        _check_scalar(out)
        return float(np.asarray(out.data).reshape(()))

    first, second = evaluate(), evaluate()
    if first != second:
        raise NondeterminismError(f"two forward passes disagree: {first!r} vs {second!r}")

    zero_grads(params)
    with Tape():
        backward(f())

    max_err: dict[str, float] = {}
    failures: list[CoordinateFailure] = []
    count = 0
    for k, p in enumerate(params):
        name = p.name or f"param{k}"
        planes = ["re", "im"] if p.is_complex else ["data"]
        analytic_planes = p.grad_planes() if p.is_complex else (p.grad_planes(),)
        worst = 0.0
        for plane_idx, plane in enumerate(planes):
            if plane == "im" and getattr(p, "frozen_imag", False):
                continue
            analytic = analytic_planes[plane_idx].copy()
            base = _planes_of(p)
            numeric = np.zeros_like(analytic)
            for idx in np.ndindex(*analytic.shape):
                orig = base[plane_idx][idx]
                base[plane_idx][idx] = orig + step
                _assign(p, base)
                fp = evaluate()
                base[plane_idx][idx] = orig - step
                _assign(p, base)
                fm = evaluate()
                base[plane_idx][idx] = orig
                _assign(p, base)
                numeric[idx] = (fp - fm) / (2 * step)
            count += analytic.size
            err = rel_error(analytic, numeric)
            if err.size:
                worst = max(worst, float(err.max()))
            for idx in zip(*np.nonzero(err > tolerance)):
                failures.append(
                    CoordinateFailure(name, plane, tuple(int(i) for i in idx),
                                      float(analytic[idx]), float(numeric[idx]), float(err[idx]))
                )
        max_err[name] = worst
    return GradCheckReport(max_err, failures, tolerance, count)


def _planes_of(v: Variable) -> list[np.ndarray]:
    if v.is_complex:
        return [np.array(v.re), np.array(v.im)]
    return [np.array(v.data)]


def _assign(v: Variable, planes: list[np.ndarray]) -> None:
    if isinstance(v, Parameter):
        v.set_planes(planes[0].copy(), planes[1].copy())
    elif v.is_complex:
        v.value = ComplexTensor(planes[0], planes[1])
    else:
        v.value = RealTensor(planes[0])
