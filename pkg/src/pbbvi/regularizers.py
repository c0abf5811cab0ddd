"""Regularizing functions f and their energy-space forms f(e^{-V}).

Three families are supported:

* ``kl``            f(x) = log x
* ``alpha``         f(x) = x^{1-α}
* ``perturbative``  f(x) = e^{-v0} Σ_{k=0}^{K} (v0 + log x)^k / k!,  K odd

A valid regularizer is concave with f(x) ≤ x on the positive reals; then
E_q[f(e^{-V})] is a lower bound on f(p(x)).  :func:`validate_regularizer`
checks both properties numerically on a grid.

All evaluation functions are written with the polymorphic primitives of
:mod:`pbbvi.autodiff`, so they accept floats, numpy arrays, or tape
variables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "RegularizerSpec",
    "kl",
    "alpha",
    "perturbative",
    "taylor_exp",
    "f_value",
    "f_of_energy",
    "ValidityReport",
    "validate_regularizer",
    "MAX_ORDER",
]

MAX_ORDER = 15
KINDS = ("kl", "alpha", "perturbative")


@dataclass(frozen=True)
class RegularizerSpec:
    """Which regularizer to use.

    ``alpha`` must be positive and different from 1.  Values above 1 are
    representable because the gradient-variance sweep uses α = 2, but they
    do not give a lower bound (see :attr:`is_bound`).
    """

    kind: str
    alpha: float | None = None
    order: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "alpha":
            if self.alpha is None or not np.isfinite(self.alpha) or self.alpha <= 0 or self.alpha == 1:
                raise ValueError(f"alpha must be positive and != 1, got {self.alpha!r}")
        if self.kind == "perturbative":
            K = self.order
            if K is None or int(K) != K or K < 1 or K % 2 == 0:
                raise ValueError(f"perturbative order must be an odd positive integer, got {K!r}")
            if K > MAX_ORDER:
                raise ValueError(f"perturbative order {K} exceeds the supported maximum {MAX_ORDER}")

    @property
    def is_bound(self) -> bool:
        """Whether E_q[f(e^{-V})] is a lower bound (false only for α > 1)."""
        return not (self.kind == "alpha" and self.alpha > 1)

    @property
    def label(self) -> str:
        if self.kind == "alpha":
            return f"alpha={self.alpha:g}"
        if self.kind == "perturbative":
            return f"perturbative K={self.order}"
        return "kl"


def kl() -> RegularizerSpec:
    return RegularizerSpec("kl")


def alpha(a: float) -> RegularizerSpec:
    return RegularizerSpec("alpha", alpha=float(a))


def perturbative(order: int = 3) -> RegularizerSpec:
    return RegularizerSpec("perturbative", order=order)


def taylor_exp(u, K: int):
    """Truncated exponential series Σ_{k=0}^{K} u^k/k! by Horner accumulation.

    K = 0 gives the constant 1 (used for the derivative of the K = 1 series).
    """
    if K < 0:
        raise ValueError("order must be non-negative")
    if K == 0:
        return 1.0 + 0.0 * u
    acc = 1.0
    for k in range(K, 0, -1):
        acc = 1.0 + acc * u / k
    return acc


def _order(spec: RegularizerSpec) -> int:
    # tolerate specs built without validation (used to probe even orders)
    return int(spec.order)


def f_value(spec: RegularizerSpec, v0, x):
    """f(x) in value space.  ``v0`` is ignored except for the perturbative family."""
    xv = x.value if isinstance(x, ad.Var) else np.asarray(x, dtype=float)
    if np.any(xv <= 0):
        raise ad.DomainError("f_value", None, "regularizer argument must be positive")
    if spec.kind == "kl":
        return ad.log(x)
    if spec.kind == "alpha":
        return ad.exp((1.0 - spec.alpha) * ad.log(x))
    return ad.exp(-v0) * taylor_exp(v0 + ad.log(x), _order(spec))


def f_of_energy(spec: RegularizerSpec, v0, v):
    """f(e^{-v}) evaluated directly from the energy v, without forming e^{-v}."""
    if spec.kind == "kl":
        return -v
    if spec.kind == "alpha":
        return ad.exp(-(1.0 - spec.alpha) * v)
    return ad.exp(-v0) * taylor_exp(v0 - v, _order(spec))


@dataclass(frozen=True)
class ValidityReport:
    max_excess: float  # max_x f(x) - x, must be <= tol
    max_concavity_violation: float  # max over adjacent pairs of mean(f(a),f(b)) - f((a+b)/2)
    touch_residual: float | None  # |f(e^{-v0}) - e^{-v0}|, perturbative only
    tol: float

    @property
    def below_identity(self) -> bool:
        return self.max_excess <= self.tol

    @property
    def concave(self) -> bool:
        return self.max_concavity_violation <= self.tol

    @property
    def touches(self) -> bool:
        return self.touch_residual is None or self.touch_residual < self.tol

    @property
    def passed(self) -> bool:
        return self.below_identity and self.concave and self.touches


def validate_regularizer(spec: RegularizerSpec, v0: float, grid, tol: float = 1e-12) -> ValidityReport:
    """Check f(x) ≤ x, midpoint concavity and (perturbative) the touch point on ``grid``."""
    x = np.asarray(grid, dtype=float)
    if x.ndim != 1 or x.size < 2 or np.any(x <= 0) or np.any(np.diff(x) <= 0):
        raise ValueError("grid must be a sorted vector of at least two positive reals")
    fx = f_value(spec, v0, x)
    excess = float(np.max(fx - x))
    mid = 0.5 * (x[:-1] + x[1:])
    violation = float(np.max(0.5 * (fx[:-1] + fx[1:]) - f_value(spec, v0, mid)))
    touch = None
    if spec.kind == "perturbative":
        x0 = np.exp(-v0)
        touch = float(abs(f_value(spec, v0, x0) - x0))
    return ValidityReport(excess, violation, touch, tol)
