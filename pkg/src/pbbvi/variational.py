"""Mean-field Gaussian variational family q(z; λ) = Π_i N(z_i; m_i, σ_i²).

λ is stored as ``(mean, log_scale)`` with σ = exp(log_scale), so every real
vector is a valid parameter.  Functions here accept either numeric arrays or
lists of :class:`pbbvi.autodiff.Var` (for exact gradients with respect to λ).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "VariationalParams",
    "NoiseBatch",
    "reparameterize",
    "log_density",
    "entropy",
    "sample_noise",
    "noise_generator",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VariationalParams:
    mean: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        if ad.is_symbolic(self.mean) or ad.is_symbolic(self.log_scale):
            if len(self.mean) != len(self.log_scale):
                raise ValueError("mean and log_scale must have the same length")
            return
        mean = np.atleast_1d(np.array(self.mean, dtype=float))
        log_scale = np.atleast_1d(np.array(self.log_scale, dtype=float))
        if mean.ndim != 1 or mean.shape != log_scale.shape:
            raise ValueError(f"mean {mean.shape} and log_scale {log_scale.shape} must be equal-length vectors")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_scale))):
            raise ValueError("variational parameters must be finite")
        mean.flags.writeable = False
        log_scale.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_scale", log_scale)

    @classmethod
    def standard(cls, n: int) -> "VariationalParams":
        """Standard normal: mean 0, log_scale 0."""
        return cls(np.zeros(n), np.zeros(n))

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def variance(self) -> np.ndarray:
        return np.exp(2.0 * self.log_scale)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mean, self.log_scale])

    @classmethod
    def from_flat(cls, theta) -> "VariationalParams":
        theta = np.asarray(theta, dtype=float)
        n = theta.size // 2
        return cls(theta[:n], theta[n:])


@dataclass(frozen=True)
class NoiseBatch:
    """S × N standard-normal draws plus where they came from."""

    eps: np.ndarray
    seed: int
    stream: int = 0
    counter: int = 0

    @property
    def S(self) -> int:
        return self.eps.shape[0]

    @property
    def N(self) -> int:
        return self.eps.shape[1]


def _check_dims(params: VariationalParams, x, what: str) -> None:
    n = len(x) if ad.is_symbolic(x) else np.shape(x)[-1] if np.ndim(x) else 1
    if n != params.dim:
        raise ValueError(f"{what} has dimension {n}, variational family has {params.dim}")


def reparameterize(params: VariationalParams, eps):
    """z = mean + exp(log_scale) ⊙ eps.  ``eps`` may be a vector or an S × N batch."""
    _check_dims(params, eps, "eps")
    if ad.is_symbolic(params.mean) or ad.is_symbolic(params.log_scale):
        eps = np.asarray(eps, dtype=float)
        return [m + ad.exp(s) * e for m, s, e in zip(params.mean, params.log_scale, eps)]
    return params.mean + np.exp(params.log_scale) * np.asarray(eps, dtype=float)


def log_density(params: VariationalParams, z):
    """log q(z; λ) in nats.  Batched over leading axes of ``z`` for numeric inputs."""
    _check_dims(params, z, "z")
    if ad.is_symbolic(params.mean) or ad.is_symbolic(params.log_scale) or ad.is_symbolic(z):
        terms = []
        for m, s, zi in zip(params.mean, params.log_scale, z):
            r = (zi - m) * ad.exp(-s)
            terms.append(-0.5 * LOG_2PI - s - 0.5 * r * r)
        return ad.sum_(terms)
    r = (np.asarray(z, dtype=float) - params.mean) * np.exp(-params.log_scale)
    return np.sum(-0.5 * LOG_2PI - params.log_scale - 0.5 * r * r, axis=-1)


def entropy(params: VariationalParams):
    """Differential entropy Σ_i [½ log(2πe) + log_scale_i]."""
    if ad.is_symbolic(params.log_scale):
        return ad.sum_([0.5 * (LOG_2PI + 1.0) + s for s in params.log_scale])
    return float(np.sum(0.5 * (LOG_2PI + 1.0) + params.log_scale))


def noise_generator(seed: int, stream: int = 0, counter: int = 0) -> np.random.Generator:
    """Independent generator for the triple (seed, stream, counter).

    Uses numpy's ``SeedSequence`` spawn keys, so any two distinct triples
    give statistically independent streams and the same triple always
    reproduces the same draws regardless of evaluation order.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(counter))))


def sample_noise(S: int, N: int, seed: int, stream: int = 0, counter: int = 0) -> NoiseBatch:
    if S < 1 or N < 1:
        raise ValueError(f"need S >= 1 and N >= 1, got S={S}, N={N}")
    eps = noise_generator(seed, stream, counter).standard_normal((S, N))
    return NoiseBatch(eps, int(seed), int(stream), int(counter))
