"""Reverse-mode automatic differentiation on scalar tapes.

Every arithmetic operation on a :class:`Var` appends a :class:`TapeNode` to
the tape that owns it.  A node stores its forward value together with the
local derivatives with respect to its parents, so a single reverse sweep
yields the gradient of the output with respect to every input.

The primitive functions in this module (:func:`exp`, :func:`log`, ...) are
polymorphic: called on a :class:`Var` they record a node, called on floats or
numpy arrays they simply evaluate.  Code written against them can therefore
be run either symbolically (to obtain exact gradients) or vectorized over
Monte-Carlo samples.

Example::

    >>> expr = Expression(lambda x: x * x)
    >>> evaluate(expr, {"x": 3.0})
    9.0
    >>> gradient(expr, {"x": 3.0})
    {'x': 6.0}
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "UsageError",
    "TapeNode",
    "Tape",
    "Var",
    "Expression",
    "evaluate",
    "gradient",
    "value_and_grad",
    "check_gradient",
    "is_symbolic",
    "exp",
    "log",
    "sqrt",
    "power",
    "sigmoid",
    "log_sigmoid",
    "sum_",
    "dot",
]


class DomainError(ValueError):
    """An operation was applied outside its mathematical domain.

    Attributes
    ----------
    primitive:
        Name of the primitive that failed (``"log"``, ``"div"``, ...).
    index:
        Tape position the node would have occupied, or ``None`` when the
        failure happened during plain numeric evaluation.
    """

    def __init__(self, primitive: str, index: int | None, detail: str = ""):
        self.primitive = primitive
        self.index = index
        where = f" at node {index}" if index is not None else ""
        msg = f"domain error in primitive '{primitive}'{where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UsageError(RuntimeError):
    """The API was called out of order (e.g. gradient before evaluate)."""


@dataclass(frozen=True, slots=True)
class TapeNode:
    value: float
    partials: tuple[tuple[int, float], ...]
    index: int


class Tape:
    """Topologically ordered list of nodes; parents always precede children."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def push(self, value: float, partials: Sequence[tuple[int, float]] = ()) -> "Var":
        index = len(self.nodes)
        self.nodes.append(TapeNode(float(value), tuple(partials), index))
        return Var(self, index)

    def variable(self, value: float) -> "Var":
        return self.push(value)

    def backward(self, output: int) -> np.ndarray:
        """Adjoints of ``output`` with respect to every node on the tape."""
        adjoint = np.zeros(len(self.nodes))
        adjoint[output] = 1.0
        for node in reversed(self.nodes[: output + 1]):
            a = adjoint[node.index]
            if a == 0.0:
                continue
            for parent, local in node.partials:
                adjoint[parent] += a * local
        return adjoint


class Var:
    """Handle to one node of a tape; supports the usual arithmetic operators."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ``ndarray * Var`` defer to Var's reflected operators

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> float:
        return self.tape.nodes[self.index].value

    def __repr__(self) -> str:
        return f"Var(value={self.value!r}, index={self.index})"

    def __float__(self) -> float:
        return self.value

    # -- arithmetic -------------------------------------------------------
    def _other(self, other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise UsageError("cannot combine variables from different tapes")
            return other
        return float(other)

    def __add__(self, other):
        other = self._other(other)
        if isinstance(other, Var):
            return self.tape.push(self.value + other.value, ((self.index, 1.0), (other.index, 1.0)))
        return self.tape.push(self.value + other, ((self.index, 1.0),))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._other(other)
        if isinstance(other, Var):
            return self.tape.push(self.value - other.value, ((self.index, 1.0), (other.index, -1.0)))
        return self.tape.push(self.value - other, ((self.index, 1.0),))

    def __rsub__(self, other):
        other = self._other(other)
        return self.tape.push(other - self.value, ((self.index, -1.0),))

    def __mul__(self, other):
        other = self._other(other)
        if isinstance(other, Var):
            a, b = self.value, other.value
            return self.tape.push(a * b, ((self.index, b), (other.index, a)))
        return self.tape.push(self.value * other, ((self.index, other),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._other(other)
        index = len(self.tape)
        if isinstance(other, Var):
            a, b = self.value, other.value
            if b == 0.0:
                raise DomainError("div", index, "division by zero")
            return self.tape.push(a / b, ((self.index, 1.0 / b), (other.index, -a / (b * b))))
        if other == 0.0:
            raise DomainError("div", index, "division by zero")
        return self.tape.push(self.value / other, ((self.index, 1.0 / other),))

    def __rtruediv__(self, other):
        other = self._other(other)
        b = self.value
        if b == 0.0:
            raise DomainError("div", len(self.tape), "division by zero")
        return self.tape.push(other / b, ((self.index, -other / (b * b)),))

    def __neg__(self):
        return self.tape.push(-self.value, ((self.index, -1.0),))

    def __pos__(self):
        return self

    def __pow__(self, n):
        return power(self, n)


def is_symbolic(x) -> bool:
    """True if ``x`` is a :class:`Var` or a sequence containing one."""
    if isinstance(x, Var):
        return True
    if isinstance(x, (list, tuple)):
        return any(isinstance(e, Var) for e in x)
    if isinstance(x, np.ndarray) and x.dtype == object:
        return any(isinstance(e, Var) for e in x.flat)
    return False


# -- unary primitives ------------------------------------------------------


def exp(x):
    if isinstance(x, Var):
        try:
            v = math.exp(x.value)
        except OverflowError:
            raise DomainError("exp", len(x.tape), f"exp({x.value!r}) overflows") from None
        return x.tape.push(v, ((x.index, v),))
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        if x.value <= 0.0:
            raise DomainError("log", len(x.tape), f"argument {x.value!r} is not positive")
        return x.tape.push(math.log(x.value), ((x.index, 1.0 / x.value),))
    if np.any(np.asarray(x) <= 0.0):
        raise DomainError("log", None, "argument is not positive")
    return np.log(x)


def sqrt(x):
    if isinstance(x, Var):
        if x.value <= 0.0:
            # the local derivative 1/(2 sqrt x) is not finite at 0
            raise DomainError("sqrt", len(x.tape), f"argument {x.value!r} is not positive")
        v = math.sqrt(x.value)
        return x.tape.push(v, ((x.index, 0.5 / v),))
    if np.any(np.asarray(x) < 0.0):
        raise DomainError("sqrt", None, "argument is negative")
    return np.sqrt(x)


def power(x, n: int):
    """``x**n`` for an integer exponent ``n``."""
    if int(n) != n:
        raise TypeError("power() takes an integer exponent")
    n = int(n)
    if isinstance(x, Var):
        if n < 0 and x.value == 0.0:
            raise DomainError("pow", len(x.tape), "zero raised to a negative power")
        if n == 0:
            return x.tape.push(1.0, ((x.index, 0.0),))
        return x.tape.push(x.value**n, ((x.index, n * x.value ** (n - 1)),))
    return np.power(np.asarray(x, dtype=float), n) if isinstance(x, np.ndarray) else float(x) ** n


def _sigmoid(x):
    # numerically stable for both signs
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(x):
    """Logistic function 1/(1+e^{-x})."""
    if isinstance(x, Var):
        s = float(_sigmoid(x.value))
        return x.tape.push(s, ((x.index, s * (1.0 - s)),))
    s = _sigmoid(np.asarray(x, dtype=float))
    return float(s) if np.ndim(s) == 0 else s


def log_sigmoid(x):
    """log σ(x), computed without overflow for large |x|."""
    if isinstance(x, Var):
        v = -float(np.logaddexp(0.0, -x.value))
        return x.tape.push(v, ((x.index, float(_sigmoid(-x.value))),))
    v = -np.logaddexp(0.0, -np.asarray(x, dtype=float))
    return float(v) if np.ndim(v) == 0 else v


# -- reductions ------------------------------------------------------------


def _tape_of(items):
    for e in items:
        if isinstance(e, Var):
            return e.tape
    return None


def sum_(xs):
    """Sum of a sequence in a single node."""
    if isinstance(xs, np.ndarray) and xs.dtype != object:
        return xs.sum()
    xs = list(xs)
    tape = _tape_of(xs)
    if tape is None:
        return float(math.fsum(float(e) for e in xs))
    total = 0.0
    partials = []
    for e in xs:
        if isinstance(e, Var):
            total += e.value
            partials.append((e.index, 1.0))
        else:
            total += float(e)
    return tape.push(total, partials)


def dot(a, b):
    """Inner product of two equal-length sequences in a single node."""
    a = list(a) if not isinstance(a, np.ndarray) or a.dtype == object else a
    b = list(b) if not isinstance(b, np.ndarray) or b.dtype == object else b
    if len(a) != len(b):
        raise ValueError(f"dot: length mismatch {len(a)} vs {len(b)}")
    tape = None
    if isinstance(a, list) or isinstance(b, list):
        tape = _tape_of(a) or _tape_of(b)
    if tape is None:
        return float(np.dot(np.asarray(a, dtype=float), np.asarray(b, dtype=float)))
    total = 0.0
    partials = []
    for x, y in zip(a, b):
        xv = x.value if isinstance(x, Var) else float(x)
        yv = y.value if isinstance(y, Var) else float(y)
        total += xv * yv
        if isinstance(x, Var):
            partials.append((x.index, yv))
        if isinstance(y, Var):
            partials.append((y.index, xv))
    return tape.push(total, partials)


# -- expressions -----------------------------------------------------------


class Expression:
    """A scalar function of named inputs, re-taped on every evaluation.

    ``fn`` receives one keyword argument per input: a :class:`Var` for a
    scalar input and a list of :class:`Var` for a vector input.
    """

    def __init__(self, fn: Callable[..., object]):
        self.fn = fn
        self.tape: Tape | None = None
        self.output: int | None = None
        self.input_map: dict[str, int | list[int]] = {}
        self._inputs: dict[str, np.ndarray] | None = None

    def __repr__(self) -> str:
        name = getattr(self.fn, "__name__", "fn")
        size = len(self.tape) if self.tape is not None else 0
        return f"Expression({name}, nodes={size})"


def _normalize_inputs(inputs: Mapping[str, object]) -> dict[str, np.ndarray]:
    out = {}
    for name, value in inputs.items():
        arr = np.array(value, dtype=float)
        if arr.ndim > 1:
            raise ValueError(f"input '{name}' must be a scalar or a vector")
        out[name] = arr
    return out


def evaluate(expr: Expression, inputs: Mapping[str, object]) -> float:
    """Forward pass: build a fresh tape and return the output value."""
    values = _normalize_inputs(inputs)
    tape = Tape()
    args: dict[str, object] = {}
    input_map: dict[str, int | list[int]] = {}
    for name, arr in values.items():
        if arr.ndim == 0:
            v = tape.variable(float(arr))
            args[name] = v
            input_map[name] = v.index
        else:
            vs = [tape.variable(float(e)) for e in arr]
            args[name] = vs
            input_map[name] = [v.index for v in vs]
    try:
        out = expr.fn(**args)
    except TypeError as exc:
        raise UsageError(f"inputs do not match the expression: {exc}") from exc
    if not isinstance(out, Var):
        # constant expression: record it so the backward pass is well defined
        out = tape.push(float(out))
    elif out.tape is not tape:
        raise UsageError("expression returned a variable from a foreign tape")
    expr.tape, expr.output, expr.input_map, expr._inputs = tape, out.index, input_map, values
    return out.value


def gradient(expr: Expression, inputs: Mapping[str, object]) -> dict[str, float | np.ndarray]:
    """Reverse sweep: d(output)/d(input) for every named input.

    Must follow :func:`evaluate` on the same inputs.
    """
    if expr.tape is None or expr._inputs is None:
        raise UsageError("gradient() called before evaluate()")
    values = _normalize_inputs(inputs)
    if values.keys() != expr._inputs.keys() or any(
        not np.array_equal(values[k], expr._inputs[k]) for k in values
    ):
        raise UsageError("gradient() inputs differ from the last evaluate() call")
    adjoint = expr.tape.backward(expr.output)
    grads: dict[str, float | np.ndarray] = {}
    for name, where in expr.input_map.items():
        if isinstance(where, list):
            grads[name] = adjoint[where].copy()
        else:
            grads[name] = float(adjoint[where])
    return grads


def value_and_grad(fn: Callable[..., object], **inputs) -> tuple[float, dict[str, float | np.ndarray]]:
    """Convenience wrapper: evaluate ``fn`` and differentiate it in one call."""
    expr = Expression(fn)
    value = evaluate(expr, inputs)
    return value, gradient(expr, inputs)


def check_gradient(fn: Callable[[Sequence], object], point, step: float = 1e-5) -> float:
    """Compare AD against central differences.

    ``fn`` maps a vector (list of :class:`Var` or numpy array) to a scalar.
    Returns ``max_i |AD_i - FD_i| / max(1, |AD_i|)``.
    """
    x = np.atleast_1d(np.asarray(point, dtype=float))
    _, grads = value_and_grad(lambda x: fn(x), x=x)
    ad_grad = np.atleast_1d(grads["x"])
    worst = 0.0
    for i in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi[i] += step
        lo[i] -= step
        fd = (float(fn(hi)) - float(fn(lo))) / (2.0 * step)
        if not math.isfinite(fd):
            raise ValueError(f"finite difference is not finite at coordinate {i}")
        worst = max(worst, abs(ad_grad[i] - fd) / max(1.0, abs(ad_grad[i])))
    return worst
