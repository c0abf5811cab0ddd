"""Log-joint densities log p(x, z) with analytic oracles where available.

Each :class:`Model` carries three views of the same density:

``log_joint(z)``
    numpy, batched over leading axes of ``z`` (shape ``(..., N)``);
``grad_log_joint(z)``
    its gradient with respect to ``z``, same batching;
``log_joint_tape(z)``
    the same function on a list of :class:`pbbvi.autodiff.Var`.

The numpy views drive the Monte-Carlo loops; the tape view provides exact
reference gradients and is what the gradient tests compare against.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import autodiff as ad

__all__ = [
    "Model",
    "KernelConfig",
    "Dataset",
    "CholeskyFactor",
    "NotPositiveDefiniteError",
    "JITTER_SCHEDULE",
    "cholesky",
    "matern32",
    "gp_regression_model",
    "gp_classification_model",
    "conjugate_gaussian",
    "gaussian_model",
    "flat_model",
    "bimodal_target",
    "synth_sinusoid",
    "shifted",
]

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
JITTER_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class Model:
    dim: int
    log_joint: Callable[[np.ndarray], np.ndarray]
    grad_log_joint: Callable[[np.ndarray], np.ndarray]
    log_joint_tape: Callable[[Sequence], object]
    analytic_log_evidence: float | None = None
    analytic_posterior: tuple[np.ndarray, np.ndarray] | None = None
    name: str = "model"
    info: dict = field(default_factory=dict, compare=False, repr=False)


@dataclass(frozen=True)
class KernelConfig:
    s: float = 1.0
    l: float = 1.0

    def __post_init__(self):
        if not (self.s > 0 and self.l > 0):
            raise ValueError(f"kernel amplitude and length-scale must be positive, got s={self.s}, l={self.l}")

    @classmethod
    def default_for(cls, D: int) -> "KernelConfig":
        """s = 1, l = √D / 2."""
        return cls(1.0, math.sqrt(D) / 2.0)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.targets, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"inputs {X.shape} and targets {y.shape} disagree on the number of rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains missing or non-finite values")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)

    @property
    def M(self) -> int:
        return self.inputs.shape[0]

    @property
    def D(self) -> int:
        return self.inputs.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.inputs[rows], self.targets[rows])


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter: float = 0.0

    @property
    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self.lower, True), b)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def cholesky(A, schedule: Sequence[float] = JITTER_SCHEDULE) -> CholeskyFactor:
    """Factor A + j·I for the smallest jitter j in ``schedule`` that succeeds."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=1e-12, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    eye = np.eye(A.shape[0])
    for j in schedule:
        try:
            L = np.linalg.cholesky(A + j * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            if j > 0:
                log.warning("cholesky needed jitter %.1e on a %dx%d matrix", j, *A.shape)
            return CholeskyFactor(L, float(j))
    raise NotPositiveDefiniteError(f"matrix not positive definite even with jitter {max(schedule):.1e}")


def matern32(config: KernelConfig, X, X2=None) -> np.ndarray:
    """Matérn-3/2 covariance s²(1 + √3 r/l) exp(−√3 r/l)."""
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Y = X if X2 is None else np.asarray(X2, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    d2 = np.sum(X**2, 1)[:, None] + np.sum(Y**2, 1)[None, :] - 2.0 * X @ Y.T
    r = np.sqrt(np.maximum(d2, 0.0))
    if X2 is None:
        np.fill_diagonal(r, 0.0)
        r = 0.5 * (r + r.T)
    a = math.sqrt(3.0) * r / config.l
    return config.s**2 * (1.0 + a) * np.exp(-a)


# -- Gaussian prior pieces -------------------------------------------------


def _gaussian_prior(chol: CholeskyFactor):
    """log N(z; 0, Λ) with Λ = L Lᵀ: numpy value, gradient, and tape versions."""
    L = chol.lower
    n = L.shape[0]
    const = -0.5 * n * LOG_2PI - 0.5 * chol.log_det
    Linv = solve_triangular(L, np.eye(n), lower=True)

    def value(z):
        z = np.asarray(z, dtype=float)
        a = solve_triangular(L, z.reshape(-1, n).T, lower=True)
        out = const - 0.5 * np.sum(a * a, axis=0)
        return out.reshape(z.shape[:-1])

    def grad(z):
        z = np.asarray(z, dtype=float)
        g = -cho_solve((L, True), z.reshape(-1, n).T).T
        return g.reshape(z.shape)

    def tape(z):
        # whitened coordinates a = L⁻¹ z, one dot node per row
        a = [ad.dot(Linv[i, : i + 1], z[: i + 1]) for i in range(n)]
        return const - 0.5 * ad.dot(a, a)

    return value, grad, tape


def gp_regression_model(data: Dataset, kernel: KernelConfig, noise_var: float = 0.1) -> Model:
    """f ~ GP(0, Λ), y_i ~ N(f_i, noise_var); latents are the M function values."""
    if not noise_var > 0:
        raise ValueError(f"noise_var must be positive, got {noise_var}")
    Lam = matern32(kernel, data.inputs)
    prior_value, prior_grad, prior_tape = _gaussian_prior(cholesky(Lam))
    y = data.targets
    M = data.M
    lik_const = -0.5 * M * math.log(2.0 * math.pi * noise_var)

    def log_joint(z):
        z = np.asarray(z, dtype=float)
        return prior_value(z) + lik_const - 0.5 * np.sum((y - z) ** 2, axis=-1) / noise_var

    def grad_log_joint(z):
        z = np.asarray(z, dtype=float)
        return prior_grad(z) + (y - z) / noise_var

    def log_joint_tape(z):
        r = [yi - zi for yi, zi in zip(y, z)]
        return prior_tape(z) + lik_const - (0.5 / noise_var) * ad.dot(r, r)

    Ky = cholesky(Lam + noise_var * np.eye(M))
    alpha_y = Ky.solve(y)
    evidence = -0.5 * float(y @ alpha_y) - 0.5 * Ky.log_det - 0.5 * M * LOG_2PI
    post_mean = Lam @ alpha_y
    post_cov = Lam - Lam @ Ky.solve(Lam)
    post_cov = 0.5 * (post_cov + post_cov.T)
    return Model(
        M,
        log_joint,
        grad_log_joint,
        log_joint_tape,
        evidence,
        (post_mean, post_cov),
        name="gp-regression",
        info={"data": data, "kernel": kernel, "noise_var": noise_var, "prior_cov": Lam},
    )


def conjugate_gaussian(y: float = 1.0, prior_var: float = 1.0, noise_var: float = 1.0) -> Model:
    """z ~ N(0, prior_var), y ~ N(z, noise_var): the one-dimensional conjugate model."""
    data = Dataset(np.zeros((1, 1)), np.array([y]))
    model = gp_regression_model(data, KernelConfig(math.sqrt(prior_var), 1.0), noise_var)
    return replace(model, name="conjugate-gaussian")


def gp_classification_model(data: Dataset, kernel: KernelConfig) -> Model:
    """f ~ GP(0, Λ), y_i ~ Bernoulli(σ(f_i)); no analytic oracles."""
    y = data.targets
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("classification targets must be 0 or 1")
    Lam = matern32(kernel, data.inputs)
    prior_value, prior_grad, prior_tape = _gaussian_prior(cholesky(Lam))
    sign = 2.0 * y - 1.0  # y log σ(f) + (1-y) log σ(-f) = log σ(sign·f)

    def log_joint(f):
        f = np.asarray(f, dtype=float)
        return prior_value(f) + np.sum(ad.log_sigmoid(sign * f), axis=-1)

    def grad_log_joint(f):
        f = np.asarray(f, dtype=float)
        return prior_grad(f) + sign * ad.sigmoid(-sign * f)

    def log_joint_tape(f):
        return prior_tape(f) + ad.sum_([ad.log_sigmoid(si * fi) for si, fi in zip(sign, f)])

    return Model(
        data.M,
        log_joint,
        grad_log_joint,
        log_joint_tape,
        name="gp-classification",
        info={"data": data, "kernel": kernel, "prior_cov": Lam},
    )


def gaussian_model(mean, scale, log_evidence: float = 0.0) -> Model:
    """log p(x, z) = log N(z; mean, diag(scale²)) + log_evidence.

    With q equal to this Gaussian the interaction energy is the constant
    −log_evidence, which makes it the natural toy model for exact checks.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    scale = np.broadcast_to(np.asarray(scale, dtype=float), mean.shape).copy()
    if np.any(scale <= 0):
        raise ValueError("scale must be positive")
    const = float(log_evidence) - 0.5 * mean.size * LOG_2PI - float(np.sum(np.log(scale)))

    def log_joint(z):
        r = (np.asarray(z, dtype=float) - mean) / scale
        return const - 0.5 * np.sum(r * r, axis=-1)

    def grad_log_joint(z):
        return -(np.asarray(z, dtype=float) - mean) / scale**2

    def log_joint_tape(z):
        r = [(zi - m) / s for zi, m, s in zip(z, mean, scale)]
        return const - 0.5 * ad.dot(r, r)

    return Model(
        mean.size,
        log_joint,
        grad_log_joint,
        log_joint_tape,
        float(log_evidence),
        (mean, np.diag(scale**2)),
        name="gaussian",
    )


def flat_model(dim: int, level: float = 0.0) -> Model:
    """log p(x, z) = level for all z (improper; gradients vanish identically)."""

    def log_joint(z):
        z = np.asarray(z, dtype=float)
        return np.full(z.shape[:-1], float(level))

    def grad_log_joint(z):
        return np.zeros_like(np.asarray(z, dtype=float))

    def log_joint_tape(z):
        return ad.sum_([0.0 * zi for zi in z]) + float(level)

    return Model(dim, log_joint, grad_log_joint, log_joint_tape, name="flat")


def shifted(model: Model, c: float) -> Model:
    """The same model with log p(x, z) replaced by log p(x, z) + c."""
    c = float(c)
    evidence = None if model.analytic_log_evidence is None else model.analytic_log_evidence + c
    return replace(
        model,
        log_joint=lambda z: model.log_joint(z) + c,
        log_joint_tape=lambda z: model.log_joint_tape(z) + c,
        analytic_log_evidence=evidence,
        name=f"{model.name}+{c:g}",
    )


def bimodal_target(separation: float = 2.0, width: float = 0.5) -> Model:
    """½N(z; −separation, width²) + ½N(z; +separation, width²) in one dimension."""
    if not width > 0:
        raise ValueError("width must be positive")
    a, w = float(separation), float(width)
    const = -math.log(2.0) - 0.5 * LOG_2PI - math.log(w)

    def log_joint(z):
        z = np.asarray(z, dtype=float)[..., 0]
        return const + np.logaddexp(-0.5 * ((z + a) / w) ** 2, -0.5 * ((z - a) / w) ** 2)

    def grad_log_joint(z):
        z = np.asarray(z, dtype=float)
        lo, hi = -0.5 * ((z + a) / w) ** 2, -0.5 * ((z - a) / w) ** 2
        r_hi = ad.sigmoid(hi - lo)  # responsibility of the right-hand mode
        return -((z + a) * (1.0 - r_hi) + (z - a) * r_hi) / w**2

    def log_joint_tape(z):
        (zi,) = z
        lo = -0.5 * ((zi + a) / w) ** 2
        hi = -0.5 * ((zi - a) / w) ** 2
        m = max(float(lo), float(hi))  # constant shift; the gradient is unaffected
        return const + m + ad.log(ad.exp(lo - m) + ad.exp(hi - m))

    return Model(1, log_joint, grad_log_joint, log_joint_tape, 0.0, name="bimodal")


def synth_sinusoid(
    n: int,
    noise_sd: float = 0.3,
    seed: int = 0,
    x_range: tuple[float, float] = (0.0, 6.0),
    amplitudes: Sequence[float] = (1.0, 0.5),
    frequencies: Sequence[float] = (1.0, 2.3),
    phases: Sequence[float] = (0.0, 0.0),
    spacing: float | None = None,
) -> Dataset:
    """Noisy samples of Σ_j a_j sin(ω_j x + φ_j) on a uniform grid.

    The grid is ``linspace(*x_range, n)`` unless ``spacing`` is given, in
    which case it is ``x_range[0] + spacing·arange(n)`` (fixed density,
    growing interval).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if spacing is None:
        x = np.linspace(x_range[0], x_range[1], n)
    else:
        x = x_range[0] + spacing * np.arange(n)
    f = sum(a * np.sin(w * x + p) for a, w, p in zip(amplitudes, frequencies, phases))
    y = f + noise_sd * np.random.default_rng(seed).standard_normal(n)
    return Dataset(x[:, None], y)
