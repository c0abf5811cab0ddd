"""Bound estimators and the stochastic optimization loop.

Notation: V(z; λ) = log q(z; λ) − log p(x, z) is the interaction energy and
u = v0 − V.  Each regularizer is optimized through a *surrogate* φ that is a
positive multiple of its bound, chosen so that nothing overflows:

==============  =============================  ============================
regularizer     surrogate φ(V)                 bound = c · E[φ]
==============  =============================  ============================
perturbative    Σ_{k≤K} u^k / k!               c = e^{−v0}
kl              −V                             c = 1
alpha (α<1)     e^{(1−α)u}                     c = e^{−(1−α) v0}
==============  =============================  ============================

For the perturbative family v0 is a free parameter updated alongside λ; for
the alpha family it is a frozen reference energy that only sets the scale.
α > 1 is handled by maximizing −e^{(1−α)u} (i.e. minimizing E[(q/p)^{α−1}]).

Two gradient engines give identical results up to rounding: ``"tape"``
differentiates each sample's surrogate on a scalar tape, ``"numpy"`` applies
the same chain rule to whole batches at once and is what long runs use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import autodiff as ad
from .models import Model
from .regularizers import RegularizerSpec, f_of_energy, perturbative, taylor_exp
from .variational import (
    LOG_2PI,
    NoiseBatch,
    VariationalParams,
    log_density,
    reparameterize,
    sample_noise,
)

__all__ = [
    "InferenceConfig",
    "InferenceState",
    "TraceRecord",
    "BoundEstimate",
    "InferenceError",
    "interaction_energy",
    "energies",
    "surrogate_value",
    "bound_value",
    "kl_bound",
    "objective",
    "objective_and_grad",
    "optimize_v0",
    "initial_state",
    "step",
    "fit",
    "lr",
    "FIT_STREAM",
    "OVERFLOW_V0",
]

FIT_STREAM = 1
OVERFLOW_V0 = 700.0
ENGINES = ("numpy", "tape")


@dataclass(frozen=True)
class InferenceConfig:
    regularizer: RegularizerSpec = field(default_factory=perturbative)
    S: int = 10
    T: int = 1000
    lr0: float = 0.01
    lr_decay: float = 500.0
    seed: int = 0
    init: VariationalParams | None = None
    init_v0: float = 0.0
    engine: str = "numpy"

    def __post_init__(self):
        if self.S < 1 or self.T < 1:
            raise ValueError(f"need S >= 1 and T >= 1, got S={self.S}, T={self.T}")
        if not (self.lr0 > 0 and self.lr_decay > 0):
            raise ValueError(f"need lr0 > 0 and lr_decay > 0, got {self.lr0}, {self.lr_decay}")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}")
        if not math.isfinite(self.init_v0):
            raise ValueError("init_v0 must be finite")


@dataclass(frozen=True)
class TraceRecord:
    t: int
    surrogate: float
    std_error: float
    grad_norm: float
    grad_v0: float
    v0: float
    lr: float


@dataclass
class InferenceState:
    """Current (λ, v0, t).  ``trace`` is a list extended in place by :func:`step`."""

    params: VariationalParams
    v0: float
    t: int = 0
    trace: list[TraceRecord] = field(default_factory=list)


@dataclass(frozen=True)
class BoundEstimate:
    """Monte-Carlo estimate; the quantity estimated is e^{log_prefactor}·value."""

    value: float
    per_sample: np.ndarray
    std_error: float
    log_prefactor: float = 0.0

    @classmethod
    def from_samples(cls, per_sample, log_prefactor: float = 0.0) -> "BoundEstimate":
        x = np.asarray(per_sample, dtype=float)
        se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
        return cls(float(np.mean(x)), x, se, float(log_prefactor))

    @property
    def log_abs_value(self) -> float:
        return math.log(abs(self.value)) + self.log_prefactor if self.value != 0 else -math.inf


class InferenceError(FloatingPointError):
    def __init__(self, t: int, grad_norm: float, grad_v0: float):
        self.t, self.grad_norm, self.grad_v0 = t, grad_norm, grad_v0
        super().__init__(f"non-finite gradient at iteration {t}: |g_lambda|={grad_norm!r}, g_v0={grad_v0!r}")


def lr(t: int, config: InferenceConfig) -> float:
    """Robbins-Monro schedule lr0 / (1 + t/τ)."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    return config.lr0 / (1.0 + t / config.lr_decay)


# -- energies --------------------------------------------------------------


def interaction_energy(model: Model, params: VariationalParams, z):
    """V(z; λ) = log q(z; λ) − log p(x, z)."""
    if ad.is_symbolic(z) or ad.is_symbolic(params.mean) or ad.is_symbolic(params.log_scale):
        return log_density(params, z) - model.log_joint_tape(z)
    return log_density(params, z) - model.log_joint(z)


def energies(model: Model, params: VariationalParams, eps: np.ndarray) -> np.ndarray:
    """V at z = g(ε_s, λ) for every row of ``eps``."""
    eps = np.atleast_2d(eps)
    z = reparameterize(params, eps)
    log_q = np.sum(-0.5 * LOG_2PI - params.log_scale - 0.5 * eps * eps, axis=-1)
    return log_q - model.log_joint(z)


def _surrogate(spec: RegularizerSpec, v0, V):
    """Per-sample surrogate φ; polymorphic over floats, arrays and tape variables."""
    if spec.kind == "kl":
        return -V
    if spec.kind == "alpha":
        sign = 1.0 if spec.alpha < 1 else -1.0
        return sign * ad.exp((1.0 - spec.alpha) * (v0 - V))
    return taylor_exp(v0 - V, spec.order)


def _surrogate_slopes(spec: RegularizerSpec, v0: float, V: np.ndarray):
    """(φ, ∂φ/∂V, ∂φ/∂v0) for a batch of energies."""
    if spec.kind == "kl":
        return -V, -np.ones_like(V), np.zeros_like(V)
    if spec.kind == "alpha":
        phi = _surrogate(spec, v0, V)
        return phi, -(1.0 - spec.alpha) * phi, (1.0 - spec.alpha) * phi
    u = v0 - V
    phi = taylor_exp(u, spec.order)
    d = taylor_exp(u, spec.order - 1)
    return phi, -d, d


def _log_prefactor(spec: RegularizerSpec, v0: float) -> float:
    if spec.kind == "perturbative":
        return -v0
    if spec.kind == "alpha":
        return -(1.0 - spec.alpha) * v0
    return 0.0


# -- bound estimates -------------------------------------------------------


def surrogate_value(model: Model, params: VariationalParams, v0: float, noise: NoiseBatch, K: int) -> BoundEstimate:
    """L̃ = (1/S) Σ_s Σ_{k≤K} (v0 − V_s)^k / k!  (so that L^(K) = e^{−v0} L̃)."""
    if K < 1 or K % 2 == 0:
        raise ValueError(f"K must be an odd positive integer, got {K}")
    V = energies(model, params, noise.eps)
    return BoundEstimate.from_samples(taylor_exp(v0 - V, K))


def bound_value(
    model: Model, params: VariationalParams, v0: float, noise: NoiseBatch, spec: RegularizerSpec
) -> BoundEstimate:
    """E_q[f(e^{−V})] estimated on ``noise``.

    When |v0| exceeds the overflow threshold of e^{−v0}, the perturbative
    estimate is returned as the surrogate with ``log_prefactor = −v0``.
    """
    V = energies(model, params, noise.eps)
    if spec.kind == "perturbative" and abs(v0) > OVERFLOW_V0:
        return BoundEstimate.from_samples(taylor_exp(v0 - V, spec.order), log_prefactor=-v0)
    return BoundEstimate.from_samples(f_of_energy(spec, v0, V))


def kl_bound(model: Model, params: VariationalParams, noise: NoiseBatch) -> BoundEstimate:
    """ELBO estimate E_q[−V]."""
    return BoundEstimate.from_samples(-energies(model, params, noise.eps))


# -- objective and gradients -----------------------------------------------


def objective(model: Model, spec: RegularizerSpec, eps: np.ndarray, form: str = "surrogate") -> Callable:
    """Sample-average objective as a function ``fn(mean, log_scale, v0)``.

    ``form="surrogate"`` averages φ, ``form="bound"`` averages f(e^{−V}).
    The returned function accepts numeric arrays or tape variables, so it
    can be differentiated with :mod:`pbbvi.autodiff` or finite differences.
    """
    if form not in ("surrogate", "bound"):
        raise ValueError("form must be 'surrogate' or 'bound'")
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    per = _surrogate if form == "surrogate" else f_of_energy

    def fn(mean, log_scale, v0):
        params = VariationalParams(mean, log_scale)
        terms = []
        for e in eps:
            z = reparameterize(params, e)
            terms.append(per(spec, v0, interaction_energy(model, params, z)))
        return ad.sum_(terms) * (1.0 / len(eps))

    return fn


def _grad_tape(model, spec, params, v0, eps, form):
    fn = objective(model, spec, eps, form)
    value, g = ad.value_and_grad(fn, mean=params.mean, log_scale=params.log_scale, v0=v0)
    return value, np.asarray(g["mean"]), np.asarray(g["log_scale"]), float(g["v0"])


def _per_sample_numpy(model, spec, params, v0, eps):
    """Per-sample φ and its gradients (rows = samples)."""
    eps = np.atleast_2d(eps)
    sigma = np.exp(params.log_scale)
    z = params.mean + sigma * eps
    log_q = np.sum(-0.5 * LOG_2PI - params.log_scale - 0.5 * eps * eps, axis=-1)
    V = log_q - model.log_joint(z)
    gz = model.grad_log_joint(z)
    phi, dphi_dV, dphi_dv0 = _surrogate_slopes(spec, v0, V)
    g_mean = -dphi_dV[:, None] * gz
    g_log_scale = dphi_dV[:, None] * (-1.0 - gz * sigma * eps)
    return phi, g_mean, g_log_scale, dphi_dv0, V


def objective_and_grad(
    model: Model,
    params: VariationalParams,
    v0: float,
    eps: np.ndarray,
    spec: RegularizerSpec,
    engine: str = "numpy",
    form: str = "surrogate",
):
    """(value, ∂/∂mean, ∂/∂log_scale, ∂/∂v0) of the sample-average objective."""
    if engine == "tape":
        return _grad_tape(model, spec, params, v0, eps, form)
    if engine != "numpy":
        raise ValueError(f"engine must be one of {ENGINES}")
    phi, gm, gs, gv, V = _per_sample_numpy(model, spec, params, v0, eps)
    value, g_mean, g_ls, g_v0 = float(np.mean(phi)), gm.mean(0), gs.mean(0), float(np.mean(gv))
    if form == "bound":
        # bound = c(v0)·surrogate with c = e^{log_prefactor}; α > 1 flips sign
        sign = -1.0 if spec.kind == "alpha" and spec.alpha > 1 else 1.0
        lp = _log_prefactor(spec, v0)
        c = sign * math.exp(lp)
        dlp = -1.0 if spec.kind == "perturbative" else 0.0
        if spec.kind == "alpha":
            # E[e^{-(1-α)V}] does not depend on v0
            return c * value, c * g_mean, c * g_ls, 0.0
        return c * value, c * g_mean, c * g_ls, c * (g_v0 + dlp * value)
    return value, g_mean, g_ls, g_v0


def optimize_v0(model: Model, params: VariationalParams, noise: NoiseBatch, spec: RegularizerSpec) -> float:
    """Exact maximizer over v0 of the perturbative bound estimate at fixed λ.

    d/dv0 [e^{−v0} E(Σ_{k≤K} u^k/k!)] = −e^{−v0} E[u^K]/K!, and E[(v0 − V)^K]
    is strictly increasing in v0 for odd K, so the maximizer is its unique
    root, which lies between the smallest and largest sampled energy.
    """
    if spec.kind != "perturbative":
        raise ValueError("v0 is only optimized for the perturbative family")
    V = energies(model, params, noise.eps)
    K = spec.order
    lo, hi = float(V.min()), float(V.max())
    if hi - lo <= 1e-15 * max(1.0, abs(lo)):
        return float(np.mean(V))
    center = float(np.mean(V))
    scale = hi - lo
    g = lambda v: float(np.mean(((v - V) / scale) ** K))
    return float(brentq(g, lo, hi, xtol=1e-14 * max(1.0, abs(center)), rtol=4 * np.finfo(float).eps))


# -- the loop --------------------------------------------------------------


def initial_state(model: Model, config: InferenceConfig) -> InferenceState:
    params = config.init if config.init is not None else VariationalParams.standard(model.dim)
    if params.dim != model.dim:
        raise ValueError(f"initial parameters have dimension {params.dim}, model has {model.dim}")
    return InferenceState(params, float(config.init_v0), 0, [])


def step(state: InferenceState, model: Model, config: InferenceConfig) -> InferenceState:
    """One iteration: draw S samples, ascend along the surrogate gradient.

    λ ← λ + ρ_t g_λ, and for the perturbative family v0 ← v0 + ρ_t (g_v0 − L̃),
    both evaluated at the pre-update (λ, v0) on the same samples.
    """
    if state.params.dim != model.dim:
        raise ValueError(f"state has dimension {state.params.dim}, model has {model.dim}")
    spec = config.regularizer
    rho = lr(state.t, config)
    noise = sample_noise(config.S, model.dim, config.seed, FIT_STREAM, state.t)
    if config.engine == "numpy":
        phi, gm, gs, gv, _ = _per_sample_numpy(model, spec, state.params, state.v0, noise.eps)
        value, g_mean, g_ls, g_v0 = float(np.mean(phi)), gm.mean(0), gs.mean(0), float(np.mean(gv))
        se = float(np.std(phi, ddof=1) / math.sqrt(phi.size)) if phi.size > 1 else 0.0
    else:
        value, g_mean, g_ls, g_v0 = _grad_tape(model, spec, state.params, state.v0, noise.eps, "surrogate")
        se = float("nan")
    grad_norm = float(math.sqrt(np.sum(g_mean**2) + np.sum(g_ls**2)))
    v0_direction = g_v0 - value if spec.kind == "perturbative" else 0.0
    if not (math.isfinite(grad_norm) and math.isfinite(v0_direction) and math.isfinite(value)):
        raise InferenceError(state.t, grad_norm, v0_direction)
    params = VariationalParams(state.params.mean + rho * g_mean, state.params.log_scale + rho * g_ls)
    v0 = state.v0 + rho * v0_direction
    state.trace.append(TraceRecord(state.t, value, se, grad_norm, v0_direction, v0, rho))
    return InferenceState(params, v0, state.t + 1, state.trace)


def fit(
    model: Model,
    config: InferenceConfig,
    state: InferenceState | None = None,
    callback: Callable[[InferenceState], None] | None = None,
) -> InferenceState:
    """Run ``config.T`` steps from ``state`` (default: :func:`initial_state`)."""
    state = initial_state(model, config) if state is None else state
    for _ in range(config.T):
        state = step(state, model, config)
        if callback is not None:
            callback(state)
    return state


def with_spec(config: InferenceConfig, spec: RegularizerSpec, **changes) -> InferenceConfig:
    """Copy of ``config`` using a different regularizer."""
    return replace(config, regularizer=spec, **changes)
