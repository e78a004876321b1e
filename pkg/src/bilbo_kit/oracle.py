"""Closed-form ground truth used to cross-verify the trainable stack.

Nothing in this module touches the tape: Jacobians come from central finite
differences, expectations from Monte Carlo or dense linear algebra, so every
check here is independent of the autodiff implementation it validates.

Key objects:

* the kernel-weighted optimal decoder and its Jacobian, computed from an
  ensemble of per-example posteriors (log-sum-exp weighting; naive products
  underflow once probes sit tens of sigmas from the data);
* exact log-evidence formulas for unit and general Gaussian data noise;
* the bound-vs-evidence gap and the trace-probe log-determinant minimizer;
* the constant-posterior-variance penalty (relative variance of the
  per-example information);
* stationarity residuals and Monte-Carlo checks of the derivative
  identities for the expected log likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian import DiagGaussian
from .tensor import Rng

# Below this max log-weight the naive weight sum underflows to zero and the
# weighted average is extrapolation, not interpolation.
LOG_UNDERFLOW = -700.0


# ---------------------------------------------------------------------------
# datasets of posteriors


@dataclass
class TheoryDataset:
    """A frozen ensemble {x_i, posterior_i} plus the prior variance."""

    xs: np.ndarray  # (N, m)
    posteriors: list[DiagGaussian]
    prior_var: np.ndarray  # (n,)
    mus: np.ndarray = field(init=False)  # (N, n)
    vars: np.ndarray = field(init=False)  # (N, n)

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        if len(self.posteriors) == 0 or self.xs.shape[0] != len(self.posteriors):
            raise ValueError("need one posterior per data row (and at least one)")
        self.mus = np.stack([np.asarray(q.mean, dtype=float)
                             for q in self.posteriors])
        self.vars = np.stack([np.asarray(q.var, dtype=float)
                              for q in self.posteriors])
        self.prior_var = np.asarray(self.prior_var, dtype=float)
        if self.prior_var.shape != (self.mus.shape[1],):
            raise ValueError("prior_var length must match the latent dimension")

    @property
    def n_examples(self) -> int:
        return self.xs.shape[0]

    @classmethod
    def random(cls, rng: Rng, n_examples: int, latent_dim: int,
               data_dim: int) -> "TheoryDataset":
        xs = rng.normal((n_examples, data_dim))
        posts = [
            DiagGaussian(rng.normal((latent_dim,)),
                         rng.uniform(0.3, 1.5, (latent_dim,)))
            for _ in range(n_examples)
        ]
        prior = rng.uniform(0.5, 2.0, (latent_dim,))
        return cls(xs=xs, posteriors=posts, prior_var=prior)


def _log_weights(z: np.ndarray, ds: TheoryDataset) -> np.ndarray:
    d = z[None, :] - ds.mus
    return -0.5 * np.sum(np.log(2.0 * np.pi * ds.vars) + d * d / ds.vars,
                         axis=1)


def optimal_decoder_info(z, ds: TheoryDataset):
    """Posterior-weighted average of the data, with an extrapolation flag.

    Weights are normalized in log space.  When every weight underflows the
    function falls back to the data row of the nearest posterior in
    Mahalanobis distance and flags the result; flagged probes are excluded
    from identity statistics.
    """
    z = np.asarray(z, dtype=float)
    logw = _log_weights(z, ds)
    top = logw.max()
    if top < LOG_UNDERFLOW:
        d = z[None, :] - ds.mus
        maha = np.sum(d * d / ds.vars, axis=1)
        return ds.xs[int(np.argmin(maha))].copy(), True
    w = np.exp(logw - top)
    w /= w.sum()
    return w @ ds.xs, False


def optimal_decoder(z, ds: TheoryDataset) -> np.ndarray:
    value, _ = optimal_decoder_info(z, ds)
    return value


def optimal_decoder_jacobian_info(z, ds: TheoryDataset):
    """Jacobian of the optimal decoder w.r.t. the latent point.

    sum_i w_i (decode(z) - x_i) (z - mu_i)^T Sigma_i^-1 with normalized
    weights w_i; rows index data coordinates, columns latent coordinates.
    The orientation and sign are pinned by the finite-difference check in
    the identity suite.  Extrapolated probes return a zero matrix (the
    fallback decoder is locally constant) and are flagged.
    """
    z = np.asarray(z, dtype=float)
    logw = _log_weights(z, ds)
    top = logw.max()
    m, n = ds.xs.shape[1], ds.mus.shape[1]
    if top < LOG_UNDERFLOW:
        return np.zeros((m, n)), True
    w = np.exp(logw - top)
    w /= w.sum()
    nu = w @ ds.xs
    lever = (z[None, :] - ds.mus) / ds.vars  # (N, n)
    jac = np.einsum("i,im,in->mn", w, nu[None, :] - ds.xs, lever)
    return jac, False


def optimal_decoder_jacobian(z, ds: TheoryDataset) -> np.ndarray:
    jac, _ = optimal_decoder_jacobian_info(z, ds)
    return jac


def fd_jacobian(f, z: np.ndarray, h: float = 1e-5,
                scale_steps: bool = False) -> np.ndarray:
    """Central finite-difference Jacobian of f at z (columns = latent dims)."""
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        step = h * max(1.0, abs(z[i])) if scale_steps else h
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        cols.append((np.asarray(f(zp), float) - np.asarray(f(zm), float))
                    / (2.0 * step))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# exact log evidence


def log_evidence_unit_noise(z, prior_var, jac, residual) -> float:
    """Exact log evidence for unit-variance Gaussian data noise.

    -(1/2) (m log 2pi + |z|^2/s2 + |residual|^2 + log det(J^T J S^2 + I)).
    """
    z = np.asarray(z, float)
    s2 = np.asarray(prior_var, float)
    jac = np.asarray(jac, float)
    residual = np.asarray(residual, float)
    m = residual.size
    gram = jac.T @ jac * s2[None, :] + np.eye(z.size)
    sign, logdet = np.linalg.slogdet(gram)
    if sign <= 0:
        raise ValueError("information matrix lost positivity")
    return -0.5 * (m * np.log(2.0 * np.pi) + float(np.sum(z * z / s2))
                   + float(residual @ residual) + logdet)


def log_evidence_gaussian_noise(mu, prior_var, jac, residual,
                                noise_var) -> float:
    """Exact log evidence for diagonal Gaussian data noise T.

    -(1/2) (m log 2pi + |mu|^2/s2 + residual^T T^-1 residual
            + log det(J S^2 J^T + T)).
    """
    mu = np.asarray(mu, float)
    s2 = np.asarray(prior_var, float)
    jac = np.asarray(jac, float)
    residual = np.asarray(residual, float)
    m = residual.size
    t = np.asarray(noise_var, float)
    t = np.full(m, float(t)) if t.ndim == 0 else t
    if np.any(t <= 0):
        raise ValueError("noise_var must be positive")
    cov = (jac * s2[None, :]) @ jac.T + np.diag(t)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("data covariance lost positivity")
    return -0.5 * (m * np.log(2.0 * np.pi) + float(np.sum(mu * mu / s2))
                   + float(np.sum(residual * residual / t)) + logdet)


# ---------------------------------------------------------------------------
# bound-vs-evidence gap and the trace-probe log-determinant


def hessian_matrix(prior_var, jac) -> np.ndarray:
    """Posterior information: prior precision plus the decoder Gram matrix."""
    s2 = np.asarray(prior_var, float)
    jac = np.asarray(jac, float)
    return np.diag(1.0 / s2) + jac.T @ jac


def diag_hessian(prior_var, jac) -> np.ndarray:
    """Diagonal representation of the posterior information."""
    s2 = np.asarray(prior_var, float)
    jac = np.asarray(jac, float)
    return 1.0 / s2 + np.sum(jac * jac, axis=0)


def elbo_evidence_gap(prior_var, jac, sigma) -> float:
    """Evidence minus bound at matched means, as a function of the variance.

    0.5 * (tr(H Sigma) - log det(e H Sigma)) with H the posterior
    information.  A 1-D ``sigma`` uses the diagonal representation of H (the
    model family actually trained); a 2-D ``sigma`` uses full matrices.
    Non-negative, and zero exactly at Sigma = H^-1.
    """
    sigma = np.asarray(sigma, float)
    if np.any(np.linalg.eigvalsh(np.diag(sigma) if sigma.ndim == 1 else sigma)
              <= 0):
        raise ValueError("sigma must be positive definite")
    if sigma.ndim == 1:
        h = diag_hessian(prior_var, jac)
        lam = h * sigma
        return 0.5 * float(np.sum(lam - 1.0 - np.log(lam)))
    hmat = hessian_matrix(prior_var, jac)
    n = hmat.shape[0]
    prod = hmat @ sigma
    sign, logdet = np.linalg.slogdet(prod)
    if sign <= 0:
        raise ValueError("H Sigma lost positivity")
    return 0.5 * float(np.trace(prod) - n - logdet)


def trace_log_value(a: np.ndarray, sigma) -> float:
    """tr(A Sigma) - log det(e Sigma); minimized over SPD Sigma at A^-1."""
    a = np.asarray(a, float)
    sigma = np.asarray(sigma, float)
    n = a.shape[0]
    if sigma.ndim == 1:
        trace = float(np.sum(np.diag(a) * sigma))
        logdet = float(np.sum(np.log(sigma)))
    else:
        trace = float(np.trace(a @ sigma))
        sign, logdet = np.linalg.slogdet(sigma)
        if sign <= 0:
            raise ValueError("sigma must be positive definite")
    return trace - n - logdet


def _check_spd(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("matrix must be symmetric")
    if np.min(np.linalg.eigvalsh(a)) <= 0:
        raise ValueError("matrix must be positive definite")
    return a


def trace_log_min(a: np.ndarray, sgd_steps: int, rng: Rng,
                  mode: str = "full", probes: int = 32,
                  lr: float = 0.03):
    """Minimize tr(A Sigma) - log det(e Sigma) with stochastic trace probes.

    The trace is only ever touched through quadratic probes v^T A v with
    v ~ N(0, Sigma); at convergence the value approximates log det A.
    ``mode`` selects a diagonal Sigma or a full SPD Sigma (Cholesky
    parameterization).  Returns (sigma_star, value) where the value is
    evaluated deterministically at the found Sigma.
    """
    a = _check_spd(a)
    n = a.shape[0]
    if mode not in ("full", "diagonal"):
        raise ValueError("mode must be 'full' or 'diagonal'")

    if mode == "diagonal":
        theta = np.zeros(n)  # Sigma = diag(exp(theta))
    else:
        theta = np.zeros(n * (n + 1) // 2)  # packed lower Cholesky
    tril_idx = np.tril_indices(n)
    diag_pos = np.where(tril_idx[0] == tril_idx[1])[0]

    def unpack(th):
        if mode == "diagonal":
            return np.sqrt(np.exp(th))  # acts as diagonal L
        L = np.zeros((n, n))
        L[tril_idx] = th
        L[np.diag_indices(n)] = np.exp(th[diag_pos])
        return L

    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    tail_start = max(1, int(0.8 * sgd_steps))
    tail_sum = np.zeros_like(theta)
    tail_n = 0

    for step in range(1, sgd_steps + 1):
        L = unpack(theta)
        epsilons = rng.normal((probes, n))
        if mode == "diagonal":
            v = epsilons * L[None, :]
            av = v @ a.T
            # d/dtheta_i [v^T A v] = (A v)_i v_i ; d/dtheta [-log det] = -1
            grad = np.mean(av * v, axis=0) - 1.0
        else:
            v = epsilons @ L.T
            av = v @ a.T
            gl = 2.0 * np.einsum("km,kn->mn", av, epsilons) / probes
            gl = np.tril(gl)
            gl[np.diag_indices(n)] *= np.diag(L)
            grad = gl[tril_idx]
            grad[diag_pos] -= 2.0
        step_lr = lr * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / sgd_steps))
        m1 = beta1 * m1 + (1 - beta1) * grad
        m2 = beta2 * m2 + (1 - beta2) * grad * grad
        mh = m1 / (1 - beta1 ** step)
        vh = m2 / (1 - beta2 ** step)
        theta = theta - step_lr * mh / (np.sqrt(vh) + eps_adam)
        if step >= tail_start:
            tail_sum += theta
            tail_n += 1

    theta = tail_sum / max(tail_n, 1)
    L = unpack(theta)
    sigma = np.exp(theta) if mode == "diagonal" else L @ L.T
    return sigma, trace_log_value(a, sigma)


# ---------------------------------------------------------------------------
# constant-variance penalty


@dataclass
class HessianStats:
    """Per-example diagonal information h = diag(prior^-2 + J^T J)."""

    hs: np.ndarray  # (N, n)

    def __post_init__(self):
        self.hs = np.atleast_2d(np.asarray(self.hs, dtype=float))
        if self.hs.shape[0] < 2:
            raise ValueError("need at least two examples for a variance")

    @property
    def mean(self) -> np.ndarray:
        return self.hs.mean(axis=0)

    @property
    def relative_variance(self) -> np.ndarray:
        mu = self.mean
        return self.hs.var(axis=0) / (mu * mu)


def constant_sigma_penalty(stats: HessianStats) -> float:
    """Expected bound loss from sharing one posterior variance.

    One quarter of the trace of the squared coefficient of variation of the
    per-example information; vanishes when the information is homogeneous
    across examples.
    """
    return 0.25 * float(np.sum(stats.relative_variance))


def penalty_remainder_bound(stats: HessianStats) -> float:
    """Upper bound on the cubic remainder of the quadratic penalty expansion.

    Per element, |0.5*(d - log(1+d)) - d^2/4| <= |d|^3 / (6 (1 - |d|)) for
    |d| < 1, with d the relative deviation of the information.
    """
    d = np.abs(stats.hs / stats.mean[None, :] - 1.0)
    if np.any(d >= 1.0):
        raise ValueError("expansion bound needs relative deviations < 1")
    return float(np.mean(np.sum(d ** 3 / (6.0 * (1.0 - d)), axis=1)))


def direct_mean_gap(stats: HessianStats) -> float:
    """Average bound-vs-evidence gap at the shared optimal variance.

    Evaluates the exact gap elementwise at sigma = 1/mean(h) and averages
    over examples; the quadratic penalty approximates this quantity.
    """
    sigma = 1.0 / stats.mean
    lam = stats.hs * sigma[None, :]
    return float(np.mean(np.sum(0.5 * (lam - 1.0 - np.log(lam)), axis=1)))


# ---------------------------------------------------------------------------
# stationarity and derivative identities


def summarize(values, flags: int = 0) -> dict:
    vals = np.asarray(values, dtype=float)
    return {
        "median": float(np.median(vals)) if vals.size else float("nan"),
        "p90": float(np.percentile(vals, 90)) if vals.size else float("nan"),
        "n": int(vals.size),
        "flags": int(flags),
    }


def stationarity_residuals(model, xs: np.ndarray, prior_var,
                           fd_step: float = 1e-4, shared_var=None) -> dict:
    """First-order optimality residuals of a trained model.

    For each example: the mean condition |mu - S^2 J^T (x - decode(mu))|
    relative to |mu|, and the precision condition
    |Sigma^-1 - (S^-2 + J^T J)|_F relative to |Sigma^-1|_F.  The decoder
    Jacobian comes from central finite differences so the check does not
    trust the tape.  For constant-variance models, pass ``shared_var`` to
    have the precision residual reported against the shared value (it is
    expected to be nonzero by construction, so report it, don't gate on
    it).  Returns a JSON-ready report keyed by metric name.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    s2 = np.asarray(prior_var, dtype=float)
    mean_res, prec_res = [], []
    skipped = 0
    for x in xs:
        mu, std = model.encode(x.reshape(1, -1))
        mu = np.asarray(mu, float).ravel()
        decode_mean = lambda z: np.asarray(  # noqa: E731
            model.decode(z.reshape(1, -1))[0], float).ravel()
        jac = fd_jacobian(decode_mean, mu, h=fd_step, scale_steps=True)
        nu = decode_mean(mu)
        denom = float(np.linalg.norm(mu))
        if denom < 1e-12:
            skipped += 1
            continue
        lhs = mu - s2 * (jac.T @ (x - nu))
        mean_res.append(float(np.linalg.norm(lhs)) / denom)
        if std is not None:
            var = np.maximum(np.asarray(std, float).ravel() ** 2, 1e-10)
        elif shared_var is not None:
            var = np.broadcast_to(np.asarray(shared_var, float), mu.shape)
        else:
            var = None
        if var is not None:
            prec = np.diag(1.0 / var)
            target = np.diag(1.0 / s2) + jac.T @ jac
            prec_res.append(
                float(np.linalg.norm(prec - target) / np.linalg.norm(prec)))
    report = {"posterior_mean_residual": summarize(mean_res, skipped)}
    if prec_res:
        report["posterior_precision_residual"] = summarize(prec_res)
    return report


def mc_gradient_identities(x, mu, sigma_var, decode_mean, n_samples: int,
                           rng: Rng, h: float = 1e-3) -> dict:
    """Monte-Carlo check of the expected-log-likelihood derivative identities.

    Uses common random numbers: the same standard-normal draws evaluate the
    expectation at symmetric perturbations of the posterior mean and of each
    posterior variance, giving a low-variance central difference.  Compared
    against -J^T (decode(mu) - x) and -0.5 diag(J^T J) per example (the
    population 1/N prefactor is dropped; these are per-example identities).
    ``decode_mean`` must accept both a single latent vector and a (k, n)
    batch of rows.  Returns per-coordinate differences with standard errors.
    """
    x = np.asarray(x, float)
    mu = np.asarray(mu, float)
    sigma_var = np.asarray(sigma_var, float)
    n = mu.size
    eps = rng.normal((n_samples, n))

    def batch_loglik(mean_vec, var_vec):
        z = mean_vec[None, :] + np.sqrt(var_vec)[None, :] * eps
        nu = np.asarray(decode_mean(z), float)
        r = x[None, :] - nu
        return -0.5 * np.sum(r * r, axis=1)

    jac = fd_jacobian(lambda z: decode_mean(z), mu, h=1e-5, scale_steps=True)
    nu0 = np.asarray(decode_mean(mu), float)
    analytic_mu = -(jac.T @ (nu0 - x))
    analytic_var = -0.5 * np.sum(jac * jac, axis=0)

    def crn_fd(param_shift):
        plus, minus = param_shift
        diff = (plus - minus) / (2.0 * h)
        return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_samples))

    mu_rows = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        est, se = crn_fd((batch_loglik(mu + e, sigma_var),
                          batch_loglik(mu - e, sigma_var)))
        mu_rows.append({"coord": i, "estimate": est,
                        "analytic": float(analytic_mu[i]), "se": se})
    var_rows = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        est, se = crn_fd((batch_loglik(mu, sigma_var + e),
                          batch_loglik(mu, sigma_var - e)))
        var_rows.append({"coord": i, "estimate": est,
                         "analytic": float(analytic_var[i]), "se": se})

    def ratios(rows):
        return [abs(r["estimate"] - r["analytic"]) / max(r["se"], 1e-300)
                for r in rows]

    return {
        "mean_grad": {"rows": mu_rows, "max_se_ratio": max(ratios(mu_rows))},
        "var_grad": {"rows": var_rows, "max_se_ratio": max(ratios(var_rows))},
        "n_samples": int(n_samples),
    }
