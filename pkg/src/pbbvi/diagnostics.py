"""Evaluation tools: gradient variance, divergence gaps, posterior summaries.

Gradient variance
-----------------
:func:`gradient_variance` draws single-sample reparameterization gradients
with respect to the variational means.  For the KL bound these are the raw
gradients of the ELBO.  For the alpha and perturbative bounds the raw
gradient carries a data-dependent scale (e^{−v0}, or p(x)^{1−α}) that has
nothing to do with sampling noise, so each single-sample gradient is divided
by the bound estimate computed from all samples, i.e. we report the variance
of the stochastic gradient of log L.  This is invariant to adding a constant
to the log joint and to the choice of reference energy for alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .inference import (
    InferenceConfig,
    InferenceState,
    _per_sample_numpy,
    bound_value,
    energies,
    fit,
    optimize_v0,
)
from .models import (
    Dataset,
    KernelConfig,
    Model,
    cholesky,
    gp_regression_model,
    matern32,
    synth_sinusoid,
)
from .regularizers import RegularizerSpec, taylor_exp
from .variational import VariationalParams, sample_noise

__all__ = [
    "VarianceReport",
    "DivergenceReport",
    "gradient_variance",
    "divergence_gap",
    "avg_marginal_variance",
    "error_rate",
    "test_log_likelihood",
    "gp_predictive",
    "mass_covering",
    "fit_variance_scaling",
    "ScalingRow",
    "scaling_regressions",
    "fit_spec",
    "VARIANCE_STREAM",
    "DIVERGENCE_STREAM",
]

VARIANCE_STREAM = 2
DIVERGENCE_STREAM = 3
_CHUNK = 2000


@dataclass(frozen=True)
class VarianceReport:
    n_latents: int
    per_coordinate_variance: np.ndarray
    mean_variance: float
    n_samples: int


@dataclass(frozen=True)
class DivergenceReport:
    d_f: float
    f_of_evidence: float
    bound: float
    std_error: float

    @property
    def tolerance_floor(self) -> float:
        """Rounding floor of d_f: a few ulps of the two terms it subtracts."""
        return 16 * np.finfo(float).eps * max(abs(self.f_of_evidence), abs(self.bound))

    def nonnegative(self, k: float = 4.0) -> bool:
        return self.d_f >= -(k * self.std_error + self.tolerance_floor)

    def consistent_with_zero(self, k: float = 4.0) -> bool:
        return abs(self.d_f) <= k * self.std_error + self.tolerance_floor


def gradient_variance(
    model: Model,
    params: VariationalParams,
    v0: float,
    spec: RegularizerSpec,
    n_samples: int = 100_000,
    seed: int = 0,
) -> VarianceReport:
    """Per-coordinate variance of single-sample mean gradients (see module docs)."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    N = model.dim
    phis, grads = [], []
    # fixed chunking and a per-chunk sub-stream keep the result deterministic
    for c, start in enumerate(range(0, n_samples, _CHUNK)):
        S = min(_CHUNK, n_samples - start)
        eps = sample_noise(S, N, seed, VARIANCE_STREAM, c).eps
        phi, g_mean, _, _, _ = _per_sample_numpy(model, spec, params, v0, eps)
        phis.append(phi)
        grads.append(g_mean)
    phi = np.concatenate(phis)
    g = np.concatenate(grads)
    if spec.kind != "kl":
        g = g / np.mean(phi)
    var = np.var(g, axis=0, ddof=1)
    return VarianceReport(N, var, float(np.mean(var)), n_samples)


def divergence_gap(
    model: Model,
    params: VariationalParams,
    v0: float,
    spec: RegularizerSpec,
    n_samples: int = 100_000,
    seed: int = 0,
) -> DivergenceReport:
    """D_f = f(p(x)) − L_f(q), using the model's analytic evidence."""
    if model.analytic_log_evidence is None:
        raise ValueError(f"model '{model.name}' has no analytic evidence")
    noise = sample_noise(n_samples, model.dim, seed, DIVERGENCE_STREAM, 0)
    est = bound_value(model, params, v0, noise, spec)
    if est.log_prefactor != 0.0:
        raise OverflowError("v0 is outside the range where the bound can be formed directly")
    f_ev = float(_f_of_log_evidence(spec, v0, model.analytic_log_evidence))
    return DivergenceReport(f_ev - est.value, f_ev, est.value, est.std_error)


def _f_of_log_evidence(spec: RegularizerSpec, v0: float, log_evidence: float) -> float:
    # f(p(x)) from log p(x) without exponentiating (avoids underflow)
    if spec.kind == "kl":
        return log_evidence
    if spec.kind == "alpha":
        return math.exp((1.0 - spec.alpha) * log_evidence)
    return math.exp(-v0) * float(taylor_exp(v0 + log_evidence, spec.order))


def avg_marginal_variance(source) -> float:
    """Mean marginal variance of a fitted λ or of a covariance matrix."""
    if isinstance(source, VariationalParams):
        return float(np.mean(source.variance))
    cov = np.asarray(source, dtype=float)
    return float(np.mean(np.diag(cov)))


def error_rate(probabilities, labels) -> float:
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    predicted = np.where(p > 0.5, 1, 0)
    wrong = (predicted != y) | (p == 0.5)
    return float(np.mean(wrong))


def test_log_likelihood(probabilities, labels) -> float:
    """Mean Bernoulli log-likelihood of the labels."""
    p = np.clip(np.asarray(probabilities, dtype=float), 1e-300, 1.0 - 1e-16)
    y = np.asarray(labels, dtype=float)
    return float(np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def gp_predictive(model: Model, params: VariationalParams, test_inputs, kernel: KernelConfig | None = None) -> np.ndarray:
    """σ(f̂) where f̂ = Λ_{*x} Λ_{xx}⁻¹ m is noise-free conditioning on the fitted means."""
    data: Dataset = model.info["data"]
    kernel = kernel or model.info["kernel"]
    Kxx = matern32(kernel, data.inputs)
    Ksx = matern32(kernel, np.asarray(test_inputs, dtype=float), data.inputs)
    f_hat = Ksx @ cholesky(Kxx).solve(params.mean)
    return np.asarray(ad.sigmoid(f_hat), dtype=float)


def mass_covering(params_pbbvi: VariationalParams, params_kl: VariationalParams) -> float:
    """σ_PBBVI / σ_KL for one-dimensional fits."""
    if params_pbbvi.dim != 1 or params_kl.dim != 1:
        raise ValueError("mass_covering compares one-dimensional fits")
    return float(params_pbbvi.scale[0] / params_kl.scale[0])


# -- fitting helpers shared by the experiments ------------------------------


def fit_spec(
    model: Model,
    spec: RegularizerSpec,
    config: InferenceConfig,
    warm: VariationalParams | None = None,
    reference_samples: int = 10_000,
    callback=None,
) -> InferenceState:
    """Fit ``spec`` starting from ``warm`` with a reference energy matched to it.

    For the perturbative family v0 starts at its exact maximizer for the
    warm-start λ; for alpha the (frozen) reference is the mean energy there,
    which keeps e^{(1−α)(v0−V)} of order one.
    """
    start = warm if warm is not None else VariationalParams.standard(model.dim)
    v0 = 0.0
    if spec.kind != "kl":
        noise = sample_noise(reference_samples, model.dim, config.seed, 4, 0)
        if spec.kind == "perturbative":
            v0 = optimize_v0(model, start, noise, spec)
        else:
            v0 = float(np.mean(energies(model, start, noise.eps)))
    cfg = replace(config, regularizer=spec, init=start, init_v0=v0)
    return fit(model, cfg, callback=callback)


def closed_form_klvi(model: Model) -> VariationalParams:
    """Exact mean-field KL optimum for a Gaussian posterior: m = μ, σ_i² = 1/P_ii."""
    if model.analytic_posterior is None:
        raise ValueError("closed-form KLVI needs an analytic posterior")
    mu, cov = model.analytic_posterior
    precision = np.linalg.inv(cov)
    return VariationalParams(mu, -0.5 * np.log(np.diag(precision)))


@dataclass(frozen=True)
class ScalingRow:
    N: int
    spec: str
    mean_variance: float
    seed: int


def fit_variance_scaling(
    N_values: Sequence[int],
    specs: Sequence[RegularizerSpec],
    seeds: Iterable[int] = (0,),
    n_samples: int = 100_000,
    config: InferenceConfig | None = None,
    spacing: float = 0.5,
    noise_var: float = 0.1,
    kernel: KernelConfig = KernelConfig(1.0, 0.5),
) -> list[ScalingRow]:
    """Gradient-variance table over latent dimension N.

    For each N a synthetic GP regression data set with inputs on a grid of
    fixed ``spacing`` is built.  The mean-field KL optimum (closed form for
    this conjugate model) is the warm start for every spec, which is then
    fitted with ``config`` before the variance is measured at its own fit.
    """
    N_values = list(N_values)
    if N_values != sorted(N_values):
        raise ValueError("N_values must be sorted")
    config = config or InferenceConfig(S=10, T=1000, lr0=1e-3, lr_decay=1000.0)
    rows = []
    for seed in seeds:
        for N in N_values:
            data = synth_sinusoid(N, seed=seed, spacing=spacing)
            model = gp_regression_model(data, kernel, noise_var)
            warm = closed_form_klvi(model)
            for spec in specs:
                state = fit_spec(model, spec, replace(config, seed=seed), warm=warm)
                rep = gradient_variance(model, state.params, state.v0, spec, n_samples, seed)
                rows.append(ScalingRow(N, spec.label, rep.mean_variance, seed))
    return rows


def scaling_regressions(rows: Sequence[ScalingRow]) -> dict[str, dict[str, float]]:
    """Least-squares fits of log(var) against N and against log N, per spec."""
    out: dict[str, dict[str, float]] = {}
    for label in dict.fromkeys(r.spec for r in rows):
        sel = [r for r in rows if r.spec == label]
        N = np.array([r.N for r in sel], dtype=float)
        y = np.log(np.array([r.mean_variance for r in sel]))
        lin = _linfit(N, y)
        loglog = _linfit(np.log(N), y)
        out[label] = {
            "slope_vs_N": lin[0],
            "r2_vs_N": lin[1],
            "slope_vs_logN": loglog[0],
            "r2_vs_logN": loglog[1],
        }
    return out


def _linfit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2
