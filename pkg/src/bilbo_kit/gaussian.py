"""Diagonal Gaussians: reparameterized sampling, closed-form KL, likelihoods.

All densities are diagonal-covariance; variances (not standard deviations)
are the canonical storage.  Network heads that emit standard deviations are
squared at the boundary where their output becomes a :class:`DiagGaussian`,
with a minimum-variance floor so logs stay finite.

Functions accept either plain arrays or tape Nodes (see ``tensor``); with a
2-D mean/var of shape (batch, dim) the per-example quantities come back as a
length-batch vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Rng, value_of

# Variance floor applied where network outputs become distributions.
MIN_VAR = 1e-10

# Floor for the adaptive likelihood variance; keeps log det finite on an
# exact reconstruction, which is the degenerate attractor the bound tames.
MIN_NOISE_VAR = 1e-12


class EventCounters(dict):
    """Named counters for boundary events (clamps, floors, clips)."""

    def bump(self, key: str, n: int = 1) -> None:
        if n:
            self[key] = self.get(key, 0) + int(n)


@dataclass(frozen=True)
class DiagGaussian:
    """A diagonal Gaussian; mean and var may be arrays or tape Nodes."""

    mean: object
    var: object

    def __post_init__(self):
        m, v = value_of(self.mean), value_of(self.var)
        if m.shape != v.shape:
            raise ValueError(f"mean/var shapes differ: {m.shape} vs {v.shape}")
        if not np.all(v > 0.0):
            raise ValueError("variances must be strictly positive")

    @property
    def dim(self) -> int:
        return value_of(self.mean).shape[-1]


class LikelihoodKind(str, Enum):
    BERNOULLI_LOGITS = "bernoulli"
    GAUSSIAN_FIXED = "gaussian"
    GAUSSIAN_LEARNED = "gaussian-learned"
    GAUSSIAN_BAGGINS = "gaussian-baggins"


@dataclass(frozen=True)
class LikelihoodSpec:
    """Which decoder likelihood is in force, plus its constants."""

    kind: LikelihoodKind
    fixed_var: float | None = None  # data-noise variance for GAUSSIAN_FIXED
    tau: float | None = None  # information factor for GAUSSIAN_BAGGINS

    def __post_init__(self):
        if self.kind == LikelihoodKind.GAUSSIAN_FIXED:
            if self.fixed_var is None or self.fixed_var <= 0.0:
                raise ValueError("gaussian likelihood needs fixed_var > 0")
        if self.kind == LikelihoodKind.GAUSSIAN_BAGGINS:
            if self.tau is None or self.tau <= 0.0:
                raise ValueError("baggins likelihood needs tau > 0")


def clamp_var(var, events: EventCounters | None = None, key: str = "var_clamped"):
    """Apply the minimum-variance floor, counting how often it binds."""
    if events is not None:
        events.bump(key, int(np.count_nonzero(value_of(var) < MIN_VAR)))
    return T.clamp_min(var, MIN_VAR)


def sample_reparam(q: DiagGaussian, rng: Rng):
    """Draw mean + sqrt(var) * eps with eps ~ N(0, I).

    Differentiable w.r.t. mean and var when they are tape Nodes.
    """
    eps = rng.normal(value_of(q.mean).shape)
    return q.mean + T.sqrt(q.var) * eps


def kl_to_prior(q: DiagGaussian, prior_var):
    """KL(q || N(0, prior_var)) for diagonal Gaussians, elementwise-summed.

    Equals 0.5 * sum(var/s2 + mean^2/s2 - 1 - log(var/s2)); non-negative,
    zero exactly when q matches the prior.
    """
    ratio = q.var / prior_var
    quad = q.mean * q.mean / prior_var
    return 0.5 * T.sum(ratio + quad - 1.0 - T.log(ratio), axis=-1)


def log_likelihood(x, decoded_mean, spec: LikelihoodSpec, decoded_std=None,
                   noise_var=None, events: EventCounters | None = None):
    """Log density of x under the decoded likelihood.

    decoded_std is the learned standard-deviation head output and must be
    given exactly when kind is GAUSSIAN_LEARNED.  noise_var is the adaptive
    per-example variance and must be given exactly when kind is
    GAUSSIAN_BAGGINS (a scalar, or one value per batch row).
    """
    m = value_of(x).shape[-1]
    if spec.kind == LikelihoodKind.BERNOULLI_LOGITS:
        if decoded_std is not None or noise_var is not None:
            raise ValueError("bernoulli likelihood takes logits only")
        # x*logit - log(1 + e^logit): stable for any logit sign
        return T.sum(x * decoded_mean - T.softplus(decoded_mean), axis=-1)

    residual = x - decoded_mean
    sq = residual * residual
    if spec.kind == LikelihoodKind.GAUSSIAN_FIXED:
        if decoded_std is not None or noise_var is not None:
            raise ValueError("fixed-variance likelihood takes a mean only")
        t = spec.fixed_var
        return -0.5 * (m * np.log(2.0 * np.pi * t) + T.sum(sq, axis=-1) / t)
    if spec.kind == LikelihoodKind.GAUSSIAN_LEARNED:
        if decoded_std is None:
            raise ValueError("learned-variance likelihood needs decoded_std")
        var = clamp_var(decoded_std * decoded_std, events,
                        key="likelihood_var_clamped")
        return -0.5 * T.sum(
            np.log(2.0 * np.pi) + T.log(var) + sq / var, axis=-1
        )
    if spec.kind == LikelihoodKind.GAUSSIAN_BAGGINS:
        if noise_var is None:
            raise ValueError("baggins likelihood needs a per-example noise_var")
        two_pi_t = T.log(noise_var) + np.log(2.0 * np.pi)
        return -0.5 * (m * two_pi_t + T.sum(sq, axis=-1) / noise_var)
    raise ValueError(f"unknown likelihood kind: {spec.kind!r}")


def log_density(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Plain diagonal-Gaussian log density (array-only helper)."""
    x, mean, var = np.asarray(x, float), np.asarray(mean, float), np.asarray(var, float)
    d = x - mean
    return -0.5 * np.sum(np.log(2.0 * np.pi * var) + d * d / var, axis=-1)
