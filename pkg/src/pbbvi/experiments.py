"""Experiment drivers shared by the command line and the acceptance suite.

Each driver returns plain dictionaries (``rows`` and ``metrics``) so the
caller decides how to serialize them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import diagnostics as diag
from .inference import InferenceConfig, bound_value, energies, fit, optimize_v0
from .models import (
    Dataset,
    KernelConfig,
    bimodal_target,
    conjugate_gaussian,
    gp_classification_model,
    gp_regression_model,
    synth_sinusoid,
)
from .regularizers import RegularizerSpec, alpha, kl, perturbative
from .variational import VariationalParams, noise_generator, sample_noise

__all__ = [
    "Result",
    "fit_1d",
    "gp_reg_synth",
    "gp_class",
    "variance_scaling",
    "divergence_check",
    "convergence_race",
    "conjugate_oracle",
    "standardize",
    "split",
    "split_three",
    "FIT_1D_DEFAULTS",
    "GP_REG_DEFAULTS",
    "GP_REG_KL_STAGE",
    "GP_CLASS_DEFAULTS",
    "SCALING_DEFAULTS",
    "RACE_DEFAULTS",
    "CONJUGATE_DEFAULTS",
    "SCALING_N",
    "SCALING_SPECS",
]


@dataclass
class Result:
    rows: list[dict]
    metrics: dict


# -- defaults per experiment (S, T, lr0, τ) ---------------------------------

CONJUGATE_DEFAULTS = InferenceConfig(perturbative(3), S=10, T=5000, lr0=0.01, lr_decay=500.0)
FIT_1D_DEFAULTS = InferenceConfig(perturbative(3), S=300, T=30000, lr0=0.1, lr_decay=300.0)
GP_REG_KL_STAGE = InferenceConfig(kl(), S=10, T=20000, lr0=1e-3, lr_decay=2000.0)
GP_REG_DEFAULTS = InferenceConfig(perturbative(3), S=10, T=20000, lr0=1e-4, lr_decay=2000.0)
GP_CLASS_DEFAULTS = InferenceConfig(perturbative(3), S=10, T=5000, lr0=2e-3, lr_decay=1000.0)
SCALING_DEFAULTS = InferenceConfig(perturbative(3), S=10, T=1000, lr0=1e-4, lr_decay=1000.0)
RACE_DEFAULTS = InferenceConfig(perturbative(3), S=100, T=50000, lr0=1e-5, lr_decay=math.inf)

SCALING_N = (1, 2, 5, 10, 20, 50, 100, 200)
SCALING_SPECS = (alpha(0.2), alpha(0.5), alpha(2.0), perturbative(3))


def _params_row(label: str, state) -> dict:
    p = state.params
    return {
        "method": label,
        "mean": float(p.mean[0]) if p.dim == 1 else float(np.mean(p.mean)),
        "sigma": float(p.scale[0]) if p.dim == 1 else float(np.mean(p.scale)),
        "avg_variance": float(np.mean(p.variance)),
        "v0": float(state.v0),
        "final_surrogate": float(state.trace[-1].surrogate) if state.trace else float("nan"),
    }


# -- one-dimensional experiments -------------------------------------------


def conjugate_oracle(config: InferenceConfig = CONJUGATE_DEFAULTS, n_check: int = 100_000) -> Result:
    """Fit the 1-D conjugate Gaussian and test stationarity and positivity at the optimum."""
    model = conjugate_gaussian()
    state = fit(model, config)
    mu, cov = model.analytic_posterior
    noise = sample_noise(n_check, 1, config.seed, 5, 0)
    V = energies(model, state.params, noise.eps)
    K = config.regularizer.order
    moment = (state.v0 - V) ** K
    bound = bound_value(model, state.params, state.v0, noise, config.regularizer)
    # the same check with v0 replaced by its exact maximizer at the fitted λ
    v0_star = optimize_v0(model, state.params, noise, config.regularizer)
    refined = (v0_star - V) ** K
    metrics = {
        "mean_error": abs(float(state.params.mean[0]) - float(mu[0])),
        "sigma_rel_error": abs(float(state.params.scale[0]) / math.sqrt(cov[0, 0]) - 1.0),
        "moment": float(moment.mean()),
        "moment_se": float(moment.std(ddof=1) / math.sqrt(n_check)),
        "moment_refined_v0": float(refined.mean()),
        "moment_refined_se": float(refined.std(ddof=1) / math.sqrt(n_check)),
        "v0_fit": float(state.v0),
        "v0_star": v0_star,
        "bound": bound.value,
        "bound_se": bound.std_error,
    }
    return Result([_params_row(config.regularizer.label, state)], metrics)


def fit_1d(
    spec: RegularizerSpec = perturbative(3),
    config: InferenceConfig = FIT_1D_DEFAULTS,
    separation: float = 2.0,
    width: float = 0.5,
) -> Result:
    """Fit ``spec`` and KLVI to the bimodal target; report σ_spec / σ_KL.

    Both fits start from the same asymmetric point (mean at the right-hand
    mode, unit scale) so neither is helped by the symmetry of the target,
    with v0 at its exact maximizer there.  The perturbative optimum is only
    about 11% wider than the KL one at the default target and the bound is
    flat in σ near it, hence the long schedule with many samples per step.
    """
    model = bimodal_target(separation, width)
    init = VariationalParams([separation], [0.0])
    rows, states = [], {}
    for s in dict.fromkeys([spec, kl()]):
        state = diag.fit_spec(model, s, config, warm=init)
        states[s.label] = state
        rows.append(_params_row(s.label, state))
    ratio = diag.mass_covering(states[spec.label].params, states["kl"].params)
    return Result(rows, {"mass_covering": ratio})


def divergence_check(
    spec: RegularizerSpec = perturbative(3),
    n_random: int = 50,
    n_samples: int = 100_000,
    seed: int = 0,
) -> Result:
    """D_f on the conjugate model at random (λ, v0) and at the exact posterior."""
    model = conjugate_gaussian()
    rng = noise_generator(seed, 6, 0)
    rows, reports = [], []
    for i in range(n_random):
        params = VariationalParams([rng.uniform(-2.0, 2.0)], [rng.uniform(-1.5, 1.0)])
        v0 = float(rng.uniform(-1.0, 4.0))
        rep = diag.divergence_gap(model, params, v0, spec, n_samples, seed + i)
        reports.append(rep)
        rows.append({"case": f"random-{i}", "mean": params.mean[0], "log_scale": params.log_scale[0], "v0": v0, **rep.__dict__})
    mu, cov = model.analytic_posterior
    post = VariationalParams(mu, 0.5 * np.log(np.diag(cov)))
    v0_star = v0 = 0.0
    if spec.kind == "perturbative":
        v0_star = optimize_v0(model, post, sample_noise(1000, 1, seed, 7, 0), spec)
        v0 = v0_star
    rep = diag.divergence_gap(model, post, v0, spec, n_samples, seed)
    rows.append({"case": "posterior", "mean": mu[0], "log_scale": post.log_scale[0], "v0": v0, **rep.__dict__})
    worst = min(r["d_f"] / r["std_error"] if r["std_error"] > 0 else math.inf for r in rows[:-1])
    metrics = {
        "all_nonnegative": all(r.nonnegative(4.0) for r in reports),
        "posterior_consistent_with_zero": rep.consistent_with_zero(4.0),
        "min_d_f_over_se": worst,
        "posterior_d_f": rep.d_f,
        "posterior_se": rep.std_error,
        "v0_star": v0_star,
    }
    return Result(rows, metrics)


# -- GP regression ----------------------------------------------------------


def gp_reg_synth(
    spec: RegularizerSpec = perturbative(3),
    config: InferenceConfig = GP_REG_DEFAULTS,
    n: int = 50,
    noise_var: float = 0.1,
    kernel: KernelConfig = KernelConfig(1.0, 0.5),
    data_seed: int | None = None,
    kl_config: InferenceConfig = GP_REG_KL_STAGE,
) -> Result:
    """Average posterior variance: analytic vs KLVI vs ``spec`` on synthetic data.

    KLVI is fitted from the default initialization with ``kl_config``;
    ``spec`` is then warm-started from the KLVI fit (with v0 at its exact
    maximizer there) and run with ``config``.  The perturbative surrogate's
    gradients are larger than the ELBO's by roughly E[Σ_{k<K} u^k/k!], hence
    the smaller default learning rate for that stage.
    """
    seed = config.seed if data_seed is None else data_seed
    model = gp_regression_model(synth_sinusoid(n, seed=seed), kernel, noise_var)
    _, cov = model.analytic_posterior
    kl_state = fit(model, replace(kl_config, seed=config.seed))
    rows = [{"method": "analytic", "avg_variance": diag.avg_marginal_variance(cov)}]
    rows.append(_params_row("kl", kl_state))
    if spec.kind != "kl":
        state = diag.fit_spec(model, spec, config, warm=kl_state.params)
        rows.append(_params_row(spec.label, state))
    v = {r["method"]: r["avg_variance"] for r in rows}
    metrics = {"avg_variance_" + k: val for k, val in v.items()}
    if spec.kind != "kl":
        a, k_, p = v["analytic"], v["kl"], v[spec.label]
        metrics["closer_than_kl"] = abs(p - a) < abs(k_ - a)
        metrics["kl_underestimates"] = k_ < a
    return Result(rows, metrics)


def variance_scaling(
    specs=SCALING_SPECS,
    N_values=SCALING_N,
    seeds=(0,),
    n_samples: int = 100_000,
    config: InferenceConfig = SCALING_DEFAULTS,
    spacing: float = 0.5,
) -> Result:
    rows = diag.fit_variance_scaling(N_values, specs, seeds, n_samples, config, spacing=spacing)
    reg = diag.scaling_regressions(rows)
    metrics: dict = {"regressions": reg}
    at50 = {r.spec: r.mean_variance for r in rows if r.N == 50}
    if "alpha=0.5" in at50 and "perturbative K=3" in at50:
        metrics["ratio_alpha0.5_over_pbbvi_at_50"] = at50["alpha=0.5"] / at50["perturbative K=3"]
    return Result([r.__dict__ for r in rows], metrics)


# -- classification ---------------------------------------------------------


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Scale features with the training split's mean and standard deviation.

    Constant columns map to 0.
    """
    mu = train.inputs.mean(0)
    sd = train.inputs.std(0)
    safe = np.where(sd > 0, sd, 1.0)
    scale = lambda d: Dataset(np.where(sd > 0, (d.inputs - mu) / safe, 0.0), d.targets)
    return tuple(scale(d) for d in (train, *others))


def split(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random split into ⌈fraction·M⌉ and the remaining rows."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    perm = np.random.default_rng(seed).permutation(data.M)
    k = math.ceil(fraction * data.M)
    return data.subset(np.sort(perm[:k])), data.subset(np.sort(perm[k:]))


def split_three(data: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Train / validation / test of (nearly) equal size."""
    perm = np.random.default_rng(seed).permutation(data.M)
    parts = np.array_split(perm, 3)
    return tuple(data.subset(np.sort(p)) for p in parts)


def gp_class(
    data: Dataset,
    spec: RegularizerSpec = perturbative(3),
    config: InferenceConfig = GP_CLASS_DEFAULTS,
    split_seed: int = 0,
) -> Result:
    """Half/half split, standardized features, KLVI and ``spec`` from the default init."""
    train, test = standardize(*split(data, 0.5, split_seed))
    kernel = KernelConfig.default_for(train.D)
    model = gp_classification_model(train, kernel)
    rows = []
    for s in dict.fromkeys([kl(), spec]):
        state = diag.fit_spec(model, s, config)
        probs = diag.gp_predictive(model, state.params, test.inputs, kernel)
        rows.append(
            {
                "method": s.label,
                "error_rate": diag.error_rate(probs, test.targets),
                "test_log_likelihood": diag.test_log_likelihood(probs, test.targets),
            }
        )
    metrics = {f"error_{r['method']}": r["error_rate"] for r in rows}
    return Result(rows, metrics)


def convergence_race(
    data: Dataset,
    config: InferenceConfig = RACE_DEFAULTS,
    split_seed: int = 0,
    every: int = 500,
    contender: RegularizerSpec = perturbative(3),
    baseline: RegularizerSpec = alpha(0.5),
) -> Result:
    """Test log-likelihood traces of ``contender`` and ``baseline``.

    Reports the first recorded iteration at which the contender reaches the
    baseline's final test log-likelihood.
    """
    train, valid, test = split_three(data, split_seed)
    train, valid, test = standardize(train, valid, test)
    kernel = KernelConfig.default_for(train.D)
    model = gp_classification_model(train, kernel)
    rows, curves = [], {}
    for s in (baseline, contender):
        curve = []

        def record(state, s=s, curve=curve):
            if state.t % every == 0 or state.t == config.T:
                probs = diag.gp_predictive(model, state.params, test.inputs, kernel)
                ll = diag.test_log_likelihood(probs, test.targets)
                curve.append((state.t, ll))
                rows.append({"method": s.label, "iteration": state.t, "test_log_likelihood": ll})

        diag.fit_spec(model, s, config, callback=record)
        curves[s.label] = curve
    target = curves[baseline.label][-1][1]
    reached = next((t for t, ll in curves[contender.label] if ll >= target), None)
    metrics = {
        "baseline_final_ll": target,
        "contender_final_ll": curves[contender.label][-1][1],
        "contender_iterations_to_baseline_final": reached,
        "baseline_iterations": config.T,
        "fraction": (reached / config.T) if reached is not None else None,
    }
    return Result(rows, metrics)
