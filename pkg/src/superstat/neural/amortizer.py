"""Model-aware wrapper around the network: encodings, transforms and sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..generative import ModelSpec, PreconditionError, SimulatedBatch, TimeSeries
from ..posterior import PosteriorDraws
from .network import (
    HeadOutputs,
    NetworkConfig,
    NetworkWeights,
    init_weights,
    loss_and_grad,
    summarize,
    warp_sample,
)
from .transforms import Transform, eta_transform, theta_transform

DEFAULT_COUNT_SCALE = 5.0


def input_dim(spec: ModelSpec) -> int:
    obs = spec.observation
    if obs.kind == "poisson":
        return 1
    return 1 + (obs.num_drifts if obs.num_drifts > 1 else 0)


def encode_arrays(spec: ModelSpec, counts=None, rt=None, choice=None, condition=None, count_scale=DEFAULT_COUNT_SCALE):
    """Network inputs ``(B, T, D)`` from stacked observation arrays ``(B, T)``.

    Poisson: ``count / count_scale``.  DDM: signed response time
    ``rt * (2 choice - 1)``, followed by a one-hot condition code when there
    is more than one drift.
    """
    obs = spec.observation
    if obs.kind == "poisson":
        if counts is None:
            raise PreconditionError("Poisson model needs count data")
        return (np.asarray(counts, float) / count_scale)[..., None]
    if rt is None or choice is None:
        raise PreconditionError("DDM model needs rt and choice data")
    rt = np.asarray(rt, float)
    signed = rt * (2.0 * np.asarray(choice, float) - 1.0)
    if obs.num_drifts == 1:
        return signed[..., None]
    cond = np.zeros(rt.shape, np.int64) if condition is None else np.asarray(condition, np.int64)
    if np.any(cond < 0) or np.any(cond >= obs.num_drifts):
        raise PreconditionError(f"condition indices must lie in 0..{obs.num_drifts - 1}")
    onehot = np.eye(obs.num_drifts)[cond]
    return np.concatenate([signed[..., None], onehot], axis=-1)


@dataclass
class FilteringPosterior:
    """Per-step posterior of one series, in transformed space."""

    heads: HeadOutputs  # leading dim T
    theta_tf: Transform
    eta_tf: Transform
    theta_names: tuple[str, ...]
    eta_names: tuple[str, ...]

    @property
    def T(self) -> int:
        return self.heads.m.shape[0]

    def sample(self, S: int, rng: np.random.Generator, t_index=None) -> PosteriorDraws:
        """Ancestral draws: ``eta ~ q(eta | h_t)``, then ``theta_t ~ q(theta_t | h_t, eta)``."""
        h = self.heads
        idx = np.arange(self.T) if t_index is None else np.asarray(t_index)
        n = idx.size
        de, d = h.mu_eta.shape[-1], h.m.shape[-1]
        eps_e = rng.standard_normal((n, S, de))
        eps_t = rng.standard_normal((n, S, d))
        if h.warped:
            eps_e = warp_sample(eps_e, h.skew_eta[idx, None, :], h.log_tail_eta[idx, None, :])
            eps_t = warp_sample(eps_t, h.skew_theta[idx, None, :], h.log_tail_theta[idx, None, :])
        z_eta = h.mu_eta[idx, None, :] + eps_e @ h.L_eta[idx].swapaxes(-1, -2)
        mu_t = h.m[idx, None, :] + z_eta @ h.coupling[idx].swapaxes(-1, -2)
        z_theta = mu_t + eps_t @ h.L_theta[idx].swapaxes(-1, -2)
        theta = np.clip(self.theta_tf.inverse(z_theta), self.theta_tf.lo, self.theta_tf.hi)
        eta = self.eta_tf.inverse(z_eta)
        return PosteriorDraws(theta, eta, self.theta_names, self.eta_names, "neural")


@dataclass
class Amortizer:
    """A network bound to the model it was trained on."""

    spec: ModelSpec
    weights: NetworkWeights
    count_scale: float = DEFAULT_COUNT_SCALE
    train_config: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        spec: ModelSpec,
        rng: np.random.Generator,
        hidden: int = 128,
        head_hidden: int = 128,
        diag_scale: float = 1.0,
        count_scale: float = DEFAULT_COUNT_SCALE,
        warp: bool = False,
    ) -> "Amortizer":
        cfg = NetworkConfig(
            input_dim=input_dim(spec),
            theta_dim=spec.theta_dim,
            eta_dim=spec.eta_dim,
            hidden=hidden,
            head_hidden=head_hidden,
            diag_scale=diag_scale,
            warp=warp,
        )
        return cls(spec, init_weights(cfg, rng), count_scale)

    def __post_init__(self):
        self.theta_tf = theta_transform(self.spec)
        self.eta_tf = eta_transform(self.spec)
        cfg = self.weights.config
        if cfg.input_dim != input_dim(self.spec) or cfg.theta_dim != self.spec.theta_dim or cfg.eta_dim != self.spec.eta_dim:
            raise PreconditionError("network dimensions do not match the model specification")

    # -- data plumbing

    def encode_series(self, data: TimeSeries) -> np.ndarray:
        if data.kind != self.spec.observation.kind:
            raise PreconditionError(
                f"data of kind {data.kind!r} cannot be fed to a network trained on {self.spec.observation.kind!r}"
            )
        X = encode_arrays(self.spec, data.counts, data.rt, data.choice, data.condition, self.count_scale)
        return X[None]

    def encode_batch(self, batch: SimulatedBatch) -> np.ndarray:
        return encode_arrays(self.spec, batch.counts, batch.rt, batch.choice, batch.condition, self.count_scale)

    def targets(self, theta: np.ndarray, eta: np.ndarray, rng: np.random.Generator | None = None):
        """Transformed targets and the summed log-Jacobian per batch item.

        ``rng`` spreads parameters clipped onto a bound over its atom band;
        without it they sit at the band median.
        """
        z_theta = self.theta_tf.forward(theta, rng)
        z_eta = self.eta_tf.forward(eta, rng)
        T = theta.shape[1]
        log_jac = self.theta_tf.log_abs_det_jacobian(theta).sum(axis=1)
        if self.spec.eta_dim:
            log_jac = log_jac + T * self.eta_tf.log_abs_det_jacobian(eta)
        return z_theta, z_eta, log_jac

    # -- training objective

    def loss(self, batch: SimulatedBatch, need_grad: bool = True, rng: np.random.Generator | None = None):
        z_theta, z_eta, log_jac = self.targets(batch.theta, batch.eta, rng)
        return loss_and_grad(self.weights, self.encode_batch(batch), z_theta, z_eta, log_jac, need_grad)

    # -- inference

    def posterior(self, data: TimeSeries) -> FilteringPosterior:
        """Filtering posterior at every ``t`` from one forward pass."""
        heads = summarize(self.weights, self.encode_series(data))
        return FilteringPosterior(heads.index(0), self.theta_tf, self.eta_tf, self.spec.theta_names, self.spec.eta_names)

    def posterior_batch(self, X: np.ndarray, chunk: int = 64) -> list[FilteringPosterior]:
        out = []
        for start in range(0, X.shape[0], chunk):
            heads = summarize(self.weights, X[start : start + chunk])
            for i in range(heads.m.shape[0]):
                out.append(FilteringPosterior(heads.index(i), self.theta_tf, self.eta_tf, self.spec.theta_names, self.spec.eta_names))
        return out

    def infer(self, data: TimeSeries, S: int, rng: np.random.Generator) -> PosteriorDraws:
        return self.posterior(data).sample(S, rng)


def amortized_infer(amortizer: Amortizer, data: TimeSeries, S: int, rng: np.random.Generator) -> PosteriorDraws:
    """``S`` posterior draws of ``(theta_t, eta)`` for every ``t`` after one forward pass."""
    return amortizer.infer(data, S, rng)
