"""Two-level simulators: a high-level transition moves the low-level parameters,
a low-level observation model emits one data point per time step.

Time indexing follows the model definition: ``theta_0`` comes from the prior,
``theta_t = T(theta_{0:t-1}, eta, xi_t)`` and ``x_t = G(theta_t, z_t)`` for
``t = 1..T``.  Trajectories returned here hold ``theta_{1:T}``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from scipy import linalg

from .stochastic import ParameterDomainError, PriorSpec

DIFFUSION_CONSTANT = 1.0
START_FRACTION = 0.5


class PreconditionError(ValueError):
    """Raised when an operation is called outside its documented domain."""


class NumericalError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# transition models


@dataclass(frozen=True)
class RandomWalk:
    """Gaussian random walk with per-parameter step sd."""

    step_sd: np.ndarray

    def __post_init__(self):
        sd = np.asarray(self.step_sd, float)
        if np.any(sd < 0) or not np.all(np.isfinite(sd)):
            raise ParameterDomainError("random-walk step sds must be finite and >= 0")
        object.__setattr__(self, "step_sd", sd)

    order = 1

    def step(self, history, t, rng):
        prev = history[-1]
        return prev + self.step_sd * rng.standard_normal(np.shape(prev))


@dataclass(frozen=True)
class VAR:
    """Vector autoregression ``c + sum_k A_k theta_{t-k} + xi_t`` with scalar noise sd."""

    c: np.ndarray
    A: np.ndarray  # (p, d, d)
    sigma: float

    def __post_init__(self):
        A = np.asarray(self.A, float)
        if A.ndim == 2:
            A = A[None]
        if A.ndim != 3 or A.shape[0] < 1 or A.shape[1] != A.shape[2]:
            raise ParameterDomainError("VAR coefficients must have shape (p, d, d) with p >= 1")
        if self.sigma <= 0:
            raise ParameterDomainError("VAR noise sd must be > 0")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", np.asarray(self.c, float))

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def spectral_radius(self) -> float:
        p, d, _ = self.A.shape
        companion = np.zeros((p * d, p * d))
        companion[:d, :] = np.concatenate(list(self.A), axis=1)
        if p > 1:
            companion[d:, :-d] = np.eye((p - 1) * d)
        return float(np.max(np.abs(np.linalg.eigvals(companion))))

    def step(self, history, t, rng):
        p = self.order
        if len(history) < p:
            raise PreconditionError(f"VAR({p}) needs at least {p} past states, got {len(history)}")
        out = np.broadcast_to(self.c, np.shape(history[-1])).copy()
        for k in range(1, p + 1):
            out += np.asarray(history[-k]) @ self.A[k - 1].T
        return out + self.sigma * rng.standard_normal(out.shape)


@dataclass(frozen=True)
class GaussianProcess:
    """Per-parameter GP over integer time indices with a squared-exponential kernel."""

    mean: np.ndarray
    amplitude: np.ndarray
    length_scale: np.ndarray
    jitter: float = 1e-6

    def __post_init__(self):
        for name in ("mean", "amplitude", "length_scale"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        if np.any(self.amplitude <= 0) or np.any(self.length_scale <= 0):
            raise ParameterDomainError("GP amplitudes and length-scales must be > 0")

    order = 0

    def kernel(self, j: int, times_a: np.ndarray, times_b: np.ndarray) -> np.ndarray:
        d2 = (np.asarray(times_a, float)[:, None] - np.asarray(times_b, float)[None, :]) ** 2
        return self.amplitude[j] ** 2 * np.exp(-d2 / (2.0 * self.length_scale[j] ** 2))

    def step(self, history, t, rng):
        raise PreconditionError(
            "GP transitions act on whole trajectories; use gp_sample_trajectory or gp_forecast"
        )


@dataclass(frozen=True)
class StationaryVariability:
    """Memoryless per-step draws around a fixed center.

    Parameters flagged in ``uniform_mask`` are drawn from
    U(center - spread/2, center + spread/2), the rest from N(center, spread).
    """

    center: np.ndarray
    spread: np.ndarray
    uniform_mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "spread", np.asarray(self.spread, float))
        object.__setattr__(self, "uniform_mask", np.asarray(self.uniform_mask, bool))
        if np.any(self.spread < 0):
            raise ParameterDomainError("variability spreads must be >= 0")

    order = 0

    def step(self, history, t, rng):
        shape = np.shape(history[-1]) if len(history) else self.center.shape
        z = rng.standard_normal(shape)
        u = rng.uniform(-0.5, 0.5, shape)
        return self.center + self.spread * np.where(self.uniform_mask, u, z)


@dataclass(frozen=True)
class RegimeSwitch:
    """Constant parameters that are redrawn uniformly within bounds at fixed times."""

    jump_times: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        jt = tuple(int(j) for j in self.jump_times)
        if any(b <= a for a, b in zip(jt, jt[1:])):
            raise ParameterDomainError("jump times must be strictly increasing")
        if jt and jt[0] < 1:
            raise ParameterDomainError("jump times must be >= 1")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "lower", np.asarray(self.lower, float))
        object.__setattr__(self, "upper", np.asarray(self.upper, float))

    order = 1

    def step(self, history, t, rng):
        prev = np.asarray(history[-1])
        if t in self.jump_times:
            return rng.uniform(self.lower, self.upper, prev.shape)
        return prev.copy()


TransitionModel = RandomWalk | VAR | GaussianProcess | StationaryVariability | RegimeSwitch


def transition_step(
    model: TransitionModel,
    history: Sequence[np.ndarray],
    rng: np.random.Generator,
    t: int | None = None,
    lower=None,
    upper=None,
) -> np.ndarray:
    """Draw ``theta_t`` given ``theta_{0:t-1}`` (``history``); ``t`` defaults to ``len(history)``.

    Works elementwise over any leading batch dimensions of the history entries.
    The result is clipped to ``[lower, upper]`` when bounds are given.
    """
    if len(history) < max(1, model.order):
        raise PreconditionError(
            f"transition needs at least {max(1, model.order)} past states, got {len(history)}"
        )
    t = len(history) if t is None else t
    theta = model.step(history, t, rng)
    if lower is not None:
        theta = np.clip(theta, lower, upper)
    return theta


def gp_sample_trajectory(
    model: GaussianProcess, T: int, rng: np.random.Generator, lower=None, upper=None
) -> np.ndarray:
    """Draw ``theta_{1:T}`` (shape ``(T, d)``) from independent per-parameter GPs."""
    if T < 1:
        raise PreconditionError("T must be >= 1")
    times = np.arange(1, T + 1)
    d = model.mean.shape[0]
    out = np.empty((T, d))
    for j in range(d):
        K = model.kernel(j, times, times)
        K[np.diag_indices_from(K)] += model.jitter * model.amplitude[j] ** 2
        try:
            L = linalg.cholesky(K, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError(
                f"GP covariance for parameter {j} is not positive definite after jitter"
            ) from exc
        out[:, j] = model.mean[j] + L @ rng.standard_normal(T)
    if lower is not None:
        out = np.clip(out, lower, upper)
    return out


def gp_forecast(
    model: GaussianProcess,
    start: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    lower=None,
    upper=None,
) -> np.ndarray:
    """Continue a GP path from ``start`` for ``horizon`` steps.

    The continuation is a zero-mean GP pinned at 0 at offset 0, shifted by
    ``start``; ``start`` may carry leading batch dims, e.g. ``(S, d)``.
    """
    start = np.asarray(start, float)
    batch = start.shape[:-1]
    d = start.shape[-1]
    n = int(np.prod(batch)) if batch else 1
    offs = np.arange(horizon + 1)
    out = np.empty((n, horizon, d))
    for j in range(d):
        K = model.kernel(j, offs, offs)
        k0 = K[1:, 0]
        C = K[1:, 1:] - np.outer(k0, k0) / K[0, 0]
        C[np.diag_indices_from(C)] += model.jitter * model.amplitude[j] ** 2
        try:
            L = linalg.cholesky(C, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError("conditional GP covariance is not positive definite") from exc
        out[:, :, j] = rng.standard_normal((n, horizon)) @ L.T
    out = out.reshape(batch + (horizon, d)) + start[..., None, :]
    if lower is not None:
        out = np.clip(out, lower, upper)
    return out


# --------------------------------------------------------------------------
# observation models


@dataclass(frozen=True)
class PoissonCounts:
    kind = "poisson"

    def n_params(self) -> int:
        return 1

    def param_names(self) -> tuple[str, ...]:
        return ("lambda",)

    def to_dict(self) -> dict:
        return {"family": "poisson"}


@dataclass(frozen=True)
class DDM:
    """Diffusion decision model with unit diffusion constant and start at a/2.

    Low-level parameters are ``(v_1..v_k, a, tau)`` with ``k = num_drifts``.
    """

    num_drifts: int = 1
    dt: float = 0.001
    max_time: float = 10.0
    max_attempts: int = 10

    kind = "ddm"

    def __post_init__(self):
        if self.num_drifts < 1:
            raise ParameterDomainError("num_drifts must be >= 1")
        if self.dt <= 0 or self.max_time <= 0:
            raise ParameterDomainError("dt and max_time must be > 0")

    def n_params(self) -> int:
        return self.num_drifts + 2

    def param_names(self) -> tuple[str, ...]:
        drifts = ("v",) if self.num_drifts == 1 else tuple(f"v{i + 1}" for i in range(self.num_drifts))
        return drifts + ("a", "tau")

    def to_dict(self) -> dict:
        return {
            "family": "ddm",
            "num_drifts": self.num_drifts,
            "dt": self.dt,
            "max_time": self.max_time,
            "max_attempts": self.max_attempts,
        }


ObservationModel = PoissonCounts | DDM


def observation_from_dict(d: dict) -> ObservationModel:
    d = dict(d)
    family = d.pop("family")
    if family == "poisson":
        return PoissonCounts()
    if family == "ddm":
        return DDM(
            num_drifts=int(d.get("num_drifts", 1)),
            dt=float(d.get("dt", 0.001)),
            max_time=float(d.get("max_time", 10.0)),
            max_attempts=int(d.get("max_attempts", 10)),
        )
    raise ParameterDomainError(f"unknown observation family {family!r}")


def simulate_poisson(rate, rng: np.random.Generator):
    rate = np.asarray(rate, float)
    if np.any(rate < 0) or not np.all(np.isfinite(rate)):
        raise PreconditionError("Poisson rate must be finite and >= 0")
    return rng.poisson(rate)


@njit(cache=True)
def _ddm_chunk(v, a, ndt, dt, max_steps, max_attempts, z, first, first_attempt, rt, choice, censored):
    """Simulate trials ``first..`` consuming standard normals from ``z``.

    Each step uses at most two draws (increment plus a bridge-crossing
    uniform obtained as Phi(z)), so an attempt is only started when
    ``2 * max_steps`` draws remain.  Returns ``(trial, attempt)`` to resume at.
    """
    n = v.shape[0]
    nz = z.shape[0]
    sqdt = np.sqrt(dt)
    # beyond this product the bridge crossing probability is below exp(-40)
    near = 20.0 * dt
    j = 0
    i = first
    start_attempt = first_attempt
    while i < n:
        if nz - j < 2 * max_steps + 1:
            return i, start_attempt
        ai = a[i]
        if ai <= 0.0:
            # degenerate corridor: the start already sits on both boundaries
            rt[i] = ndt[i] + 0.5 * dt
            choice[i] = 1 if z[j] > 0.0 else 0
            j += 1
            i += 1
            continue
        done = False
        x = 0.5 * ai
        for attempt in range(start_attempt, max_attempts):
            if nz - j < 2 * max_steps:
                return i, attempt
            x = 0.5 * ai
            for k in range(max_steps):
                xn = x + v[i] * dt + sqdt * z[j]
                j += 1
                hit = -1
                if xn >= ai:
                    hit = 1
                elif xn <= 0.0:
                    hit = 0
                else:
                    du = (ai - x) * (ai - xn)
                    dl = x * xn
                    if du < near or dl < near:
                        # the continuous path may have touched a boundary between grid points
                        pu = np.exp(-2.0 * du / dt)
                        pl = np.exp(-2.0 * dl / dt)
                        u = 0.5 * math.erfc(-z[j] / np.sqrt(2.0))
                        j += 1
                        if u < pu:
                            hit = 1
                        elif u < pu + pl:
                            hit = 0
                if hit >= 0:
                    rt[i] = ndt[i] + (k + 0.5) * dt
                    choice[i] = hit
                    done = True
                    break
                x = xn
            if done:
                break
        if not done:
            censored[i] = True
            rt[i] = ndt[i] + max_steps * dt
            choice[i] = 1 if x >= 0.5 * ai else 0
        i += 1
        start_attempt = 0
    return i, 0


def simulate_ddm_trials(v, a, tau, obs: DDM, rng: np.random.Generator):
    """Vectorized DDM simulation: returns ``(rt, choice, censored)`` arrays.

    Euler-Maruyama steps of size ``obs.dt`` from ``a/2``; between grid points
    the Brownian-bridge crossing probability is checked so that absorption is
    not missed.  Censored trials (no absorption within ``max_time``) are
    retried with fresh noise ``max_attempts`` times, then reported at
    ``max_time`` with the nearer boundary.  Thresholds ``a <= 0`` (reachable
    through clipping at the lower bound) produce an immediate coin-flip
    response instead of an error.
    """
    v, a, tau = np.broadcast_arrays(*(np.asarray(x, float).ravel() for x in (v, a, tau)))
    v, a, tau = (np.ascontiguousarray(x) for x in (v, a, tau))
    n = v.shape[0]
    rt = np.empty(n)
    choice = np.empty(n, dtype=np.int64)
    censored = np.zeros(n, dtype=np.bool_)
    max_steps = int(round(obs.max_time / obs.dt))
    # size the noise buffer from the expected decision time (a/2v) tanh(va/2)
    with np.errstate(divide="ignore", invalid="ignore"):
        edt = np.where(np.abs(v * a) > 1e-8, a / (2.0 * v) * np.tanh(v * a / 2.0), a * a / 4.0)
    expected = float(np.sum(np.clip(np.nan_to_num(edt), 0.0, obs.max_time))) / obs.dt
    buf = int(min(1.2 * expected + 16 * n, 1 << 22)) + 2 * max_steps + 1
    i, attempt = 0, 0
    while i < n:
        z = rng.standard_normal(buf)
        i, attempt = _ddm_chunk(
            v, a, tau, float(obs.dt), max_steps, int(obs.max_attempts), z, i, attempt, rt, choice, censored
        )
    return rt, choice, censored


def simulate_ddm_trial(theta, obs: DDM, rng: np.random.Generator) -> tuple[float, int]:
    """One trial from ``theta = (v_active, a, tau)``; returns ``(rt, choice)``."""
    v, a, tau = (float(x) for x in theta)
    if a <= 0:
        raise PreconditionError(f"threshold must be > 0, got {a}")
    if tau < 0:
        raise PreconditionError(f"non-decision time must be >= 0, got {tau}")
    rt, choice, _ = simulate_ddm_trials([v], [a], [tau], obs, rng)
    return float(rt[0]), int(choice[0])


def condition_sequence(T: int, num_conditions: int, rng: np.random.Generator) -> np.ndarray:
    """Block-randomized condition indices: consecutive shuffled permutations of 0..k-1."""
    if num_conditions == 1:
        return np.zeros(T, dtype=np.int64)
    n_blocks = -(-T // num_conditions)
    blocks = [rng.permutation(num_conditions) for _ in range(n_blocks)]
    return np.concatenate(blocks)[:T].astype(np.int64)


# --------------------------------------------------------------------------
# data containers


@dataclass
class TimeSeries:
    """Observations ``x_{1:T}``; either ``counts`` or the DDM triple is set."""

    t: np.ndarray
    counts: np.ndarray | None = None
    rt: np.ndarray | None = None
    choice: np.ndarray | None = None
    condition: np.ndarray | None = None
    block: np.ndarray | None = None
    session: np.ndarray | None = None
    rows: np.ndarray | None = field(default=None, repr=False)

    @property
    def kind(self) -> str:
        return "poisson" if self.counts is not None else "ddm"

    def __len__(self) -> int:
        return int(len(self.t))

    def slice(self, start: int, stop: int) -> "TimeSeries":
        def cut(x):
            return None if x is None else x[start:stop]

        return TimeSeries(
            t=self.t[start:stop],
            counts=cut(self.counts),
            rt=cut(self.rt),
            choice=cut(self.choice),
            condition=cut(self.condition),
            block=cut(self.block),
            session=cut(self.session),
            rows=cut(self.rows),
        )

    def equals(self, other: "TimeSeries") -> bool:
        for name in ("t", "counts", "rt", "choice", "condition", "block", "session"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


@dataclass
class ParameterTrajectory:
    theta: np.ndarray  # (T, d)
    eta: np.ndarray  # (d_eta,)
    theta_names: tuple[str, ...]
    eta_names: tuple[str, ...]
    theta0: np.ndarray | None = None


# --------------------------------------------------------------------------
# model specification

TRANSITIONS = ("random_walk", "var", "gp", "stationary", "regime_switch")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative two-level model: observation family, transition family, priors.

    ``options`` carries family-specific constants (GP amplitudes, jump times,
    VAR coefficients).  ``fixed_eta`` pins the high-level parameters instead
    of drawing them from ``prior.eta`` (e.g. a static model is a random walk
    with ``fixed_eta = 0``).
    """

    observation: ObservationModel
    transition: str
    prior: PriorSpec
    options: dict = field(default_factory=dict)
    fixed_eta: tuple[float, ...] | None = None
    name: str = ""

    def __post_init__(self):
        if self.transition not in TRANSITIONS:
            raise ParameterDomainError(f"unknown transition family {self.transition!r}")
        d = self.observation.n_params()
        if len(self.prior.theta) != d:
            raise ParameterDomainError(
                f"{type(self.observation).__name__} needs {d} low-level priors, got {len(self.prior.theta)}"
            )
        if self.transition == "var":
            var = self._var_model()
            if var.spectral_radius() >= 1.0:
                raise ParameterDomainError("VAR coefficients are not stable (spectral radius >= 1)")
        if self.transition == "gp" and len(self.options.get("amplitude", ())) != d:
            raise ParameterDomainError("gp transition needs one amplitude per low-level parameter")
        if self.fixed_eta is not None and len(self.fixed_eta) != self.eta_dim:
            raise ParameterDomainError("fixed_eta length does not match eta priors")

    @property
    def theta_dim(self) -> int:
        return self.observation.n_params()

    @property
    def eta_dim(self) -> int:
        return len(self.prior.eta)

    @property
    def theta_names(self) -> tuple[str, ...]:
        return self.prior.theta_names

    @property
    def eta_names(self) -> tuple[str, ...]:
        return self.prior.eta_names

    def _var_model(self) -> VAR:
        o = self.options
        d = self.theta_dim
        return VAR(
            c=np.asarray(o.get("c", np.zeros(d)), float),
            A=np.asarray(o.get("A", np.zeros((1, d, d))), float),
            sigma=float(o.get("sigma", 0.1)),
        )

    def build_transition(self, theta0: np.ndarray, eta: np.ndarray) -> TransitionModel:
        kind = self.transition
        if kind == "random_walk":
            return RandomWalk(step_sd=eta)
        if kind == "var":
            return self._var_model()
        if kind == "gp":
            return GaussianProcess(
                mean=theta0,
                amplitude=np.asarray(self.options["amplitude"], float),
                length_scale=eta,
                jitter=float(self.options.get("jitter", 1e-6)),
            )
        if kind == "stationary":
            mask = self.options.get("uniform_mask")
            if mask is None:
                mask = [name == "tau" for name in self.theta_names]
            return StationaryVariability(center=theta0, spread=eta, uniform_mask=np.asarray(mask, bool))
        return RegimeSwitch(
            jump_times=tuple(self.options.get("jump_times", (100, 200, 300))),
            lower=self.prior.lo,
            upper=self.prior.hi,
        )

    def sample_eta(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        if self.fixed_eta is not None:
            eta = np.asarray(self.fixed_eta, float)
            return eta if size is None else np.tile(eta, (size, 1))
        return self.prior.sample_eta(rng, size)

    def to_dict(self) -> dict:
        def plain(x):
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, (list, tuple)):
                return [plain(y) for y in x]
            return x

        return {
            "name": self.name,
            "observation": self.observation.to_dict(),
            "transition": self.transition,
            "prior": self.prior.to_dict(),
            "options": {k: plain(v) for k, v in self.options.items()},
            "fixed_eta": None if self.fixed_eta is None else [float(x) for x in self.fixed_eta],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        fixed = d.get("fixed_eta")
        return cls(
            observation=observation_from_dict(d["observation"]),
            transition=d["transition"],
            prior=PriorSpec.from_dict(d["prior"]),
            options=dict(d.get("options", {})),
            fixed_eta=None if fixed is None else tuple(float(x) for x in fixed),
            name=d.get("name", ""),
        )

    def digest(self) -> str:
        """Stable hash of the specification, embedded in checkpoints."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# simulation


def simulate_trajectory(spec: ModelSpec, T: int, rng: np.random.Generator) -> ParameterTrajectory:
    if T < 1:
        raise PreconditionError("T must be >= 1")
    prior = spec.prior
    theta0 = prior.sample_theta0(rng)
    eta = spec.sample_eta(rng)
    model = spec.build_transition(theta0, eta)
    if spec.transition == "gp":
        theta = gp_sample_trajectory(model, T, rng, prior.lo, prior.hi)
    else:
        hist = [theta0]
        if spec.transition == "var":
            hist = [theta0] * model.order
        for t in range(1, T + 1):
            hist.append(transition_step(model, hist, rng, t=t, lower=prior.lo, upper=prior.hi))
        theta = np.asarray(hist[-T:])
    return ParameterTrajectory(
        theta=theta, eta=eta, theta_names=spec.theta_names, eta_names=spec.eta_names, theta0=theta0
    )


def simulate_observations(
    spec: ModelSpec, theta: np.ndarray, rng: np.random.Generator, conditions: np.ndarray | None = None
) -> TimeSeries:
    """Emit ``x_{1:T}`` given ``theta_{1:T}`` of shape ``(T, d)``."""
    T = theta.shape[0]
    t = np.arange(1, T + 1)
    obs = spec.observation
    if obs.kind == "poisson":
        return TimeSeries(t=t, counts=simulate_poisson(theta[:, 0], rng).astype(np.int64))
    k = obs.num_drifts
    cond = condition_sequence(T, k, rng) if conditions is None else np.asarray(conditions, np.int64)
    v = theta[np.arange(T), cond]
    rt, choice, _ = simulate_ddm_trials(v, theta[:, k], theta[:, k + 1], obs, rng)
    return TimeSeries(t=t, rt=rt, choice=choice.astype(np.int64), condition=cond)


def simulate_dataset(
    spec: ModelSpec, T: int, rng: np.random.Generator
) -> tuple[ParameterTrajectory, TimeSeries]:
    traj = simulate_trajectory(spec, T, rng)
    return traj, simulate_observations(spec, traj.theta, rng)


@dataclass
class SimulatedBatch:
    """``B`` simulated series stacked along the first axis."""

    theta: np.ndarray  # (B, T, d)
    eta: np.ndarray  # (B, d_eta)
    counts: np.ndarray | None = None  # (B, T)
    rt: np.ndarray | None = None
    choice: np.ndarray | None = None
    condition: np.ndarray | None = None

    def __len__(self) -> int:
        return self.theta.shape[0]

    def series(self, i: int) -> TimeSeries:
        T = self.theta.shape[1]
        t = np.arange(1, T + 1)
        if self.counts is not None:
            return TimeSeries(t=t, counts=self.counts[i])
        return TimeSeries(t=t, rt=self.rt[i], choice=self.choice[i], condition=self.condition[i])

    def subset(self, idx) -> "SimulatedBatch":
        def cut(x):
            return None if x is None else x[idx]

        return SimulatedBatch(
            theta=self.theta[idx],
            eta=self.eta[idx],
            counts=cut(self.counts),
            rt=cut(self.rt),
            choice=cut(self.choice),
            condition=cut(self.condition),
        )


def gp_sample_batch(
    model: GaussianProcess, T: int, rng: np.random.Generator, lower=None, upper=None
) -> np.ndarray:
    """GP paths for a batch: ``model`` fields carry a leading batch axis ``(B, d)``.

    Uses circulant embedding of the stationary kernel (exact whenever the
    embedding is positive semi-definite), falling back to
    :func:`gp_sample_trajectory` per item otherwise.  Returns ``(B, T, d)``.
    """
    mean = np.atleast_2d(model.mean)
    B, d = mean.shape
    amp = np.broadcast_to(model.amplitude, (B, d))
    ls = np.broadcast_to(model.length_scale, (B, d))
    out = np.empty((B, T, d))
    if T < 3:
        for b in range(B):
            out[b] = gp_sample_trajectory(GaussianProcess(mean[b], amp[b], ls[b], model.jitter), T, rng)
    else:
        m = 2 * (T - 1)
        lag = np.minimum(np.arange(m), m - np.arange(m)).astype(float)
        c = amp[..., None] ** 2 * np.exp(-(lag**2) / (2.0 * ls[..., None] ** 2))
        c[..., 0] += model.jitter * amp**2
        lam = np.fft.rfft(c, axis=-1).real
        ok = np.all(lam >= -1e-10 * lam.max(axis=-1, keepdims=True), axis=-1)
        lam = np.maximum(lam, 0.0)
        # real white noise through the spectral square root gives an exact draw
        z = np.fft.rfft(rng.standard_normal((B, d, m)), axis=-1)
        paths = np.fft.irfft(np.sqrt(lam) * z, n=m, axis=-1)[..., :T]
        out[:] = mean[:, None, :] + np.swapaxes(paths, 1, 2)
        for b, j in zip(*np.nonzero(~ok)):
            single = GaussianProcess(mean[b, j : j + 1], amp[b, j : j + 1], ls[b, j : j + 1], model.jitter)
            out[b, :, j] = gp_sample_trajectory(single, T, rng)[:, 0]
    if lower is not None:
        out = np.clip(out, lower, upper)
    return out


def simulate_parameter_batch(
    spec: ModelSpec, B: int, T: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``B`` parameter trajectories ``(B, T, d)`` with their ``eta`` ``(B, d_eta)``."""
    if T < 1:
        raise PreconditionError("T must be >= 1")
    prior = spec.prior
    theta0 = prior.sample_theta0(rng, B)
    eta = spec.sample_eta(rng, B).reshape(B, spec.eta_dim)
    model = spec.build_transition(theta0, eta)
    if spec.transition == "gp":
        return gp_sample_batch(model, T, rng, prior.lo, prior.hi), eta
    order = max(1, model.order)
    hist = [theta0] * order
    theta = np.empty((B, T, spec.theta_dim))
    for t in range(1, T + 1):
        step = transition_step(model, hist, rng, t=t, lower=prior.lo, upper=prior.hi)
        theta[:, t - 1] = step
        hist = (hist + [step])[-order:]
    return theta, eta


def simulate_batch(spec: ModelSpec, B: int, T: int, rng: np.random.Generator) -> SimulatedBatch:
    """Simulate ``B`` independent data sets of length ``T``, vectorized over the batch."""
    theta, eta = simulate_parameter_batch(spec, B, T, rng)
    obs = spec.observation
    if obs.kind == "poisson":
        counts = simulate_poisson(theta[..., 0], rng).astype(np.int64)
        return SimulatedBatch(theta=theta, eta=eta, counts=counts)
    k = obs.num_drifts
    cond = np.stack([condition_sequence(T, k, rng) for _ in range(B)])
    v = np.take_along_axis(theta[..., :k], cond[..., None], axis=-1)[..., 0]
    rt, choice, _ = simulate_ddm_trials(v, theta[..., k], theta[..., k + 1], obs, rng)
    return SimulatedBatch(
        theta=theta,
        eta=eta,
        rt=rt.reshape(B, T),
        choice=choice.reshape(B, T).astype(np.int64),
        condition=cond,
    )
