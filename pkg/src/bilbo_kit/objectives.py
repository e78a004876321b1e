"""Training objectives: ELBO variants, BILBO, and the BAGGINS variance rule.

Conventions shared by everything here:

* objectives are per-example bounds to be *maximized*; the training loop
  negates them;
* batch inputs are (batch, dim) matrices; the returned value is a scalar
  (mean bound per example);
* constant-variance modes use a fixed posterior variance ``sigma_const``
  (diagonal, shared by all examples) and let the prior float as
  ``s2 = sigma_const + m_b`` where ``m_b`` is the batch second moment of the
  posterior means.  The floating-prior term backpropagates into the encoder
  means: it is part of the loss, not a constant.
* the BAGGINS noise scale ``t = tau * |x - decoded|^2 / trace(s2/sigma)``
  treats the trace as a constant w.r.t. gradients (it is an estimate of the
  batch information, not a differentiable path) while the residual stays
  differentiable; this makes the fused batch objective and the plain BILBO
  with adaptive Gaussian likelihood agree in both value and gradient.

``decode`` arguments are callables mapping a latent batch to either a
decoded-mean batch or a (mean, std) pair when a learned variance head exists.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .gaussian import (
    MIN_NOISE_VAR,
    DiagGaussian,
    EventCounters,
    LikelihoodKind,
    LikelihoodSpec,
    clamp_var,
    kl_to_prior,
    log_likelihood,
)
from .tensor import Rng, value_of


class ObjectiveMode(str, Enum):
    ELBO_LEARNED = "elbo-learned"
    ELBO_CONST = "elbo-const"
    BILBO = "bilbo"
    BILBO_BAGGINS = "bilbo-baggins"


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which bound is optimized, plus its constants."""

    mode: ObjectiveMode
    likelihood: LikelihoodSpec
    sigma_const: np.ndarray | float | None = None
    mc_samples: int = 1

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.mode != ObjectiveMode.ELBO_LEARNED:
            sig = np.atleast_1d(np.asarray(self.sigma_const, dtype=float))
            if self.sigma_const is None or not np.all(sig > 0.0):
                raise ValueError(f"{self.mode.value} needs sigma_const > 0")
        if self.mode == ObjectiveMode.BILBO_BAGGINS:
            if self.likelihood.kind != LikelihoodKind.GAUSSIAN_BAGGINS:
                raise ValueError(
                    "bilbo-baggins requires the adaptive gaussian likelihood"
                )

    def sigma_vector(self, latent_dim: int) -> np.ndarray:
        sig = np.asarray(self.sigma_const, dtype=float)
        if sig.ndim == 0:
            return np.full(latent_dim, float(sig))
        if sig.shape != (latent_dim,):
            raise ValueError(f"sigma_const shape {sig.shape} != ({latent_dim},)")
        return sig


@dataclass(frozen=True)
class BatchMoments:
    """Batch second moment of posterior means and the floating prior."""

    m_b: object  # diagonal vector, >= 0 elementwise
    s2: object  # sigma_const + m_b, positive-definite by construction


def optimal_prior(posteriors: list[DiagGaussian]) -> np.ndarray:
    """Prior variance that zeroes the bound's prior gradient.

    Diagonal of the average of (var + mean^2) over the given posteriors.
    """
    if not posteriors:
        raise ValueError("optimal_prior: need at least one posterior")
    acc = np.zeros(posteriors[0].dim)
    for q in posteriors:
        m, v = value_of(q.mean), value_of(q.var)
        acc = acc + v + m * m
    return acc / len(posteriors)


def batch_second_moment(batch_mu):
    """Columnwise mean of mu ⊙ mu over the batch axis (differentiable)."""
    return T.mean(batch_mu * batch_mu, axis=0)


def floating_prior(m_b, sigma_const) -> BatchMoments:
    """Fix the posterior variance and let the prior float: s2 = sigma + m_b."""
    mb_val = value_of(m_b)
    if np.any(mb_val < 0.0):
        raise ValueError("m_b must be elementwise >= 0")
    sig = value_of(sigma_const)
    if np.any(sig <= 0.0):
        raise ValueError("sigma_const must be elementwise > 0")
    return BatchMoments(m_b=m_b, s2=sigma_const + m_b)


def _decoded(decode, z):
    out = decode(z)
    if isinstance(out, tuple):
        return out
    return out, None


def _as_batch(x):
    v = value_of(x)
    return v if v.ndim == 2 else v.reshape(1, -1)


def _expected_loglik(batch_x, q: DiagGaussian, decode, likelihood: LikelihoodSpec,
                     rng: Rng, mc_samples: int, noise_var=None,
                     events: EventCounters | None = None):
    """Monte-Carlo expected log likelihood over the reparameterized posterior."""
    total = None
    for _ in range(mc_samples):
        eps = rng.normal(value_of(q.mean).shape)
        z = q.mean + T.sqrt(q.var) * eps
        mean, std = _decoded(decode, z)
        ll = log_likelihood(batch_x, mean, likelihood, decoded_std=std,
                            noise_var=noise_var, events=events)
        total = ll if total is None else total + ll
    return total if mc_samples == 1 else total / float(mc_samples)


def _baggins_noise(batch_x, q: DiagGaussian, decode, tau: float,
                   trace_value: float, rng: Rng, mc_samples: int,
                   events: EventCounters | None):
    """Per-example adaptive noise variance and the matching log likelihood.

    Returns (loglik_rows, t_values).  The trace in the denominator enters as
    a plain float, so gradients flow only through the residual.
    """
    m = _as_batch(batch_x).shape[1]
    total = None
    t_vals = []
    for _ in range(mc_samples):
        eps = rng.normal(value_of(q.mean).shape)
        z = q.mean + T.sqrt(q.var) * eps
        mean, _ = _decoded(decode, z)
        resid = batch_x - mean
        sq = T.sum(resid * resid, axis=-1)
        t = T.clamp_min(sq * (tau / trace_value), MIN_NOISE_VAR)
        if events is not None:
            events.bump("baggins_t_floored",
                        int(np.count_nonzero(value_of(sq) * (tau / trace_value)
                                             < MIN_NOISE_VAR)))
        t_vals.append(value_of(t))
        ll = -0.5 * (m * (T.log(t) + np.log(2.0 * np.pi)) + sq / t)
        total = ll if total is None else total + ll
    ll_rows = total if mc_samples == 1 else total / float(mc_samples)
    return ll_rows, np.concatenate([np.atleast_1d(v) for v in t_vals])


def baggins_variance(x, decoded_mean, sigma_const, s2, tau: float,
                     events: EventCounters | None = None) -> float:
    """Adaptive isotropic likelihood variance from a single decoded sample.

    t = tau * |x - decoded_mean|^2 / trace(s2 / sigma_const), floored at
    MIN_NOISE_VAR (an exact reconstruction would otherwise send the log
    density to +inf).  The caller uses t * I as the likelihood variance.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    trace = float(np.sum(value_of(s2) / value_of(sigma_const)))
    if trace <= 0.0:
        raise ValueError("trace(s2/sigma) must be positive")
    resid = value_of(x) - value_of(decoded_mean)
    t = tau * float(np.dot(resid, resid)) / trace
    if t < MIN_NOISE_VAR:
        if events is not None:
            events.bump("baggins_t_floored")
        return MIN_NOISE_VAR
    return t


def elbo(x, q: DiagGaussian, prior_var, decode, spec: ObjectiveSpec, rng: Rng,
         events: EventCounters | None = None, parts: dict | None = None):
    """Per-example evidence lower bound, averaged over the batch.

    prior term: 0.5*(log det(e * s2^-1 * var) - tr(s2^-1 var) - |mean|^2/s2),
    likelihood term: Monte-Carlo mean of log p(x | z) over reparameterized
    draws.  Differentiable end to end when inputs are tape Nodes.
    """
    kl = kl_to_prior(q, prior_var)
    if spec.likelihood.kind == LikelihoodKind.GAUSSIAN_BAGGINS:
        qvar = value_of(q.var)
        sigma_row = qvar if qvar.ndim == 1 else qvar[0]
        trace = float(np.sum(value_of(prior_var) / sigma_row))
        ll_rows, t_vals = _baggins_noise(
            x, q, decode, spec.likelihood.tau, trace, rng, spec.mc_samples,
            events)
        if parts is not None:
            parts["baggins_t_median"] = float(np.median(t_vals))
    else:
        ll_rows = _expected_loglik(x, q, decode, spec.likelihood, rng,
                                   spec.mc_samples, events=events)
    bound = T.mean(ll_rows - kl)
    if parts is not None:
        parts["kl_term"] = float(np.mean(value_of(kl)))
        parts["loglik_term"] = float(np.mean(value_of(ll_rows)))
    return bound


def bilbo(batch_x, batch_mu, sigma_const, decode, likelihood: LikelihoodSpec,
          rng: Rng, mc_samples: int = 1,
          events: EventCounters | None = None, parts: dict | None = None,
          trace_value: float | None = None):
    """Batch information lower bound.

    -0.5 * log det(I + sigma^-1 M_B) plus the batch-mean expected log
    likelihood under z ~ N(mu, sigma_const).  M_B is the batch second moment
    of the encoder means and stays on the tape, so the prior term trains the
    encoder.  With the adaptive Gaussian likelihood, ``trace_value`` pins the
    (gradient-detached) information trace; by default it is recomputed from
    the current batch.
    """
    if value_of(batch_mu).ndim != 2 or _as_batch(batch_x).shape[0] < 1:
        raise ValueError("bilbo: needs a nonempty (batch, dim) matrix pair")
    m_b = batch_second_moment(batch_mu)
    ratio = m_b / sigma_const
    prior_term = -0.5 * T.sum(T.log(1.0 + ratio))

    sigma_rows = np.broadcast_to(value_of(sigma_const),
                                 value_of(batch_mu).shape)
    q = DiagGaussian(batch_mu, sigma_rows)
    if likelihood.kind == LikelihoodKind.GAUSSIAN_BAGGINS:
        if trace_value is None:
            trace_value = float(np.sum(value_of(m_b) / value_of(sigma_const))) \
                + value_of(batch_mu).shape[1]
        ll_rows, t_vals = _baggins_noise(batch_x, q, decode, likelihood.tau,
                                         trace_value, rng, mc_samples, events)
        if parts is not None:
            parts["baggins_t_median"] = float(np.median(t_vals))
    else:
        ll_rows = _expected_loglik(batch_x, q, decode, likelihood, rng,
                                   mc_samples, events=events)
    bound = prior_term + T.mean(ll_rows)
    if parts is not None:
        parts["kl_term"] = float(-value_of(prior_term))
        parts["loglik_term"] = float(np.mean(value_of(ll_rows)))
        parts["tr_s2"] = float(np.sum(value_of(sigma_const) + value_of(m_b)))
    return bound


def bilbo_baggins(batch_x, batch_mu, sigma_const, decode, tau: float,
                  rng: Rng, mc_samples: int = 1,
                  events: EventCounters | None = None,
                  parts: dict | None = None,
                  trace_value: float | None = None):
    """Fused batch objective with the adaptive Gaussian likelihood.

    -0.5 * [ log det(I + sigma^-1 M_B) + (1/tau) tr(I + sigma^-1 M_B)
             + mean_B log det(2 pi T) ]
    with T = t * I from the per-example adaptive variance and one z draw per
    example.  Expanding it term by term recovers ``bilbo`` with the adaptive
    Gaussian likelihood; the agreement is asserted by the identity suite.
    ``trace_value`` pins the gradient-detached information trace (default:
    recomputed from the current batch).
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    if value_of(batch_mu).ndim != 2:
        raise ValueError("bilbo_baggins: batch_mu must be (batch, latent)")
    m = _as_batch(batch_x).shape[1]
    n = value_of(batch_mu).shape[1]
    m_b = batch_second_moment(batch_mu)
    ratio = m_b / sigma_const
    logdet_term = T.sum(T.log(1.0 + ratio))
    if trace_value is None:
        trace_value = float(np.sum(value_of(ratio))) + n  # detached from grads

    sigma_rows = np.broadcast_to(value_of(sigma_const),
                                 value_of(batch_mu).shape)
    q = DiagGaussian(batch_mu, sigma_rows)
    total = None
    t_all = []
    for _ in range(mc_samples):
        eps = rng.normal(value_of(q.mean).shape)
        z = q.mean + T.sqrt(q.var) * eps
        mean, _ = _decoded(decode, z)
        resid = batch_x - mean
        sq = T.sum(resid * resid, axis=-1)
        t = T.clamp_min(sq * (tau / trace_value), MIN_NOISE_VAR)
        t_all.append(value_of(t))
        logdet_2pi_t = m * (T.log(t) + np.log(2.0 * np.pi))
        total = logdet_2pi_t if total is None else total + logdet_2pi_t
    mean_logdet_t = T.mean(total if mc_samples == 1 else total / float(mc_samples))

    bound = -0.5 * (logdet_term + trace_value / tau + mean_logdet_t)
    if parts is not None:
        parts["kl_term"] = float(0.5 * value_of(logdet_term))
        parts["loglik_term"] = float(
            -0.5 * (trace_value / tau + value_of(mean_logdet_t)))
        parts["tr_s2"] = float(np.sum(value_of(sigma_const) + value_of(m_b)))
        parts["baggins_t_median"] = float(np.median(np.concatenate(
            [np.atleast_1d(v) for v in t_all])))
    return bound


def objective_value(batch_x, model, spec: ObjectiveSpec, rng: Rng,
                    params=None, events: EventCounters | None = None,
                    parts: dict | None = None):
    """Dispatch a batch through the configured objective.

    ``model`` must provide encode(x, params) -> (mu, std-or-None) and
    decode(z, params) -> mean or (mean, std).  Returns the scalar bound
    (mean per example); fills ``parts`` with logging components if given.
    """
    decode = lambda z: model.decode(z, params)  # noqa: E731
    mu, enc_std = model.encode(batch_x, params)
    latent_dim = value_of(mu).shape[1]

    if spec.mode == ObjectiveMode.ELBO_LEARNED:
        if enc_std is None:
            raise ValueError("elbo-learned requires an encoder variance head")
        var = clamp_var(enc_std * enc_std, events, key="posterior_var_clamped")
        q = DiagGaussian(mu, var)
        prior = np.ones(latent_dim)
        bound = elbo(batch_x, q, prior, decode, spec, rng, events, parts)
        if parts is not None:
            parts["tr_s2"] = float(latent_dim)
        return bound

    sigma = spec.sigma_vector(latent_dim)
    if spec.mode == ObjectiveMode.ELBO_CONST:
        moments = floating_prior(batch_second_moment(mu), sigma)
        sigma_rows = np.broadcast_to(sigma, value_of(mu).shape)
        q = DiagGaussian(mu, sigma_rows)
        bound = elbo(batch_x, q, moments.s2, decode, spec, rng, events, parts)
        if parts is not None:
            parts["tr_s2"] = float(np.sum(value_of(moments.s2)))
        return bound
    if spec.mode == ObjectiveMode.BILBO:
        return bilbo(batch_x, mu, sigma, decode, spec.likelihood, rng,
                     spec.mc_samples, events, parts)
    if spec.mode == ObjectiveMode.BILBO_BAGGINS:
        return bilbo_baggins(batch_x, mu, sigma, decode, spec.likelihood.tau,
                             rng, spec.mc_samples, events, parts)
    raise ValueError(f"unknown objective mode: {spec.mode!r}")
