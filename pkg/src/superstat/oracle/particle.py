"""Bootstrap particle filter over the joint state ``(theta_t, eta)``.

``eta`` is static, so every particle carries its own prior draw of it and the
filter only reweights and resamples those values.  Large ensembles (and
optionally stratified prior draws of ``eta``) keep this pseudo-marginal
treatment usable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from ..generative import ModelSpec, PreconditionError, TimeSeries, transition_step
from ..posterior import PosteriorDraws
from ..stochastic import stratified_sample
from .wfpt import wfpt_log_density

log = logging.getLogger(__name__)

MIN_PARTICLES = 1000
DEGENERATE_ESS = 10.0


@dataclass
class ParticleEnsemble:
    particles: np.ndarray  # (S, d + d_eta)
    log_weights: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    @property
    def ess(self) -> float:
        return effective_sample_size(self.log_weights)


def effective_sample_size(log_weights: np.ndarray) -> float:
    lw = log_weights - logsumexp(log_weights)
    return float(np.exp(-logsumexp(2.0 * lw)))


def systematic_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` systematic draws from ``weights`` (must sum to 1)."""
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


def point_loglik(spec: ModelSpec, theta: np.ndarray, data: TimeSeries, t: int) -> np.ndarray:
    """``log p(x_t | theta_t)`` for each row of ``theta`` (0-based ``t``)."""
    obs = spec.observation
    if obs.kind == "poisson":
        k = float(data.counts[t])
        lam = theta[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = k * np.log(lam) - lam - gammaln(k + 1.0)
        if k == 0:
            out = np.where(lam == 0, 0.0, out)
        return out
    nd = obs.num_drifts
    cond = int(data.condition[t]) if data.condition is not None else 0
    return wfpt_log_density(
        theta[:, cond], theta[:, nd], theta[:, nd + 1], data.rt[t], data.choice[t]
    )


def _initial_eta(spec: ModelSpec, S: int, rng, stratified: bool) -> np.ndarray:
    if spec.fixed_eta is not None or not stratified:
        return spec.sample_eta(rng, S).reshape(S, spec.eta_dim)
    cols = [stratified_sample(dist, S, rng) for dist in spec.prior.eta]
    return np.stack(cols, axis=1) if cols else np.zeros((S, 0))


def particle_filter(
    spec: ModelSpec,
    data: TimeSeries,
    S: int,
    rng: np.random.Generator,
    stratified: bool = True,
    min_particles: int = MIN_PARTICLES,
) -> PosteriorDraws:
    """Filtering draws of ``(theta_t, eta)`` for ``t = 1..T``.

    Resamples systematically whenever the ESS drops below ``S/2``; the
    reported draws at each ``t`` are an extra systematic resample, so they are
    equally weighted.  A pre-resampling ESS below 10 is recorded as a
    degeneracy warning.
    """
    if S < min_particles:
        raise PreconditionError(f"particle filter needs S >= {min_particles}, got {S}")
    if spec.transition == "gp":
        raise PreconditionError("the particle filter needs a Markov transition; GP transitions are not supported")
    T = len(data)
    prior = spec.prior
    d, de = spec.theta_dim, spec.eta_dim
    theta0 = prior.sample_theta0(rng, S).reshape(S, d)
    eta = _initial_eta(spec, S, rng, stratified)
    order = max(1, spec.build_transition(theta0[0], eta[0]).order)
    hist = [theta0] * order

    out_theta = np.empty((T, S, d))
    out_eta = np.empty((T, S, de))
    ess_trace = np.empty(T)
    warnings: list[str] = []
    logw = np.zeros(S)
    for t in range(T):
        model = spec.build_transition(theta0, eta)
        theta = transition_step(model, hist, rng, t=t + 1, lower=prior.lo, upper=prior.hi)
        hist = (hist + [theta])[-order:]
        logw = logw + point_loglik(spec, theta, data, t)
        if not np.any(np.isfinite(logw)):
            warnings.append(f"t={t + 1}: all particle weights vanished; weights reset to uniform")
            logw = np.zeros(S)
        lw = logw - logsumexp(logw)
        w = np.exp(lw)
        ess = float(1.0 / np.sum(w * w))
        ess_trace[t] = ess
        if ess < DEGENERATE_ESS:
            warnings.append(f"t={t + 1}: weight collapse, ESS={ess:.1f}")
        pick = systematic_resample(w, S, rng)
        out_theta[t] = theta[pick]
        out_eta[t] = eta[pick]
        if ess < S / 2:
            idx = systematic_resample(w, S, rng)
            hist = [h[idx] for h in hist]
            theta0, eta = theta0[idx], eta[idx]
            logw = np.zeros(S)
    for msg in warnings:
        log.warning("particle filter: %s", msg)
    return PosteriorDraws(
        out_theta, out_eta, spec.theta_names, spec.eta_names, "particle", warnings, ess_trace
    )
