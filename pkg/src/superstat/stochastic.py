"""Random number streams and the small family of 1-D distributions used for priors.

Every distribution here is parameterized the way the model appendix writes it.
In particular ``Gamma(shape, scale)`` takes a *scale*, not a rate:
``Gamma(5.0, 1 / 1.3)`` has mean ``5.0 / 1.3``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

LOG_2PI = float(np.log(2.0 * np.pi))

DEFAULT_BIT_GENERATOR = "PCG64"


class ParameterDomainError(ValueError):
    """Raised when a distribution or prior is constructed with invalid parameters."""


def make_rng(seed: int | np.random.SeedSequence | None = None) -> np.random.Generator:
    """Create a PCG64 generator; equal seeds give bit-identical streams."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if seed is not None and (int(seed) < 0 or int(seed) >= 2**64):
        raise ParameterDomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams (no overlap with each other or the parent)."""
    return list(rng.spawn(n))


def numba_seed(rng: np.random.Generator) -> int:
    """Draw a 32-bit seed for jitted kernels that keep their own generator state."""
    return int(rng.integers(0, 2**32 - 1))


class Distribution:
    """Base class of the supported 1-D families."""

    lower: float = -np.inf
    upper: float = np.inf

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    def log_pdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def ppf(self, q):
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def var(self) -> float:
        raise NotImplementedError

    @property
    def support(self) -> tuple[float, float]:
        return (self.lower, self.upper)

    def to_dict(self) -> dict:
        out = {"family": type(self).__name__}
        out.update({k: float(v) for k, v in self.__dict__.items()})
        return out


def _positive(name: str, value: float) -> None:
    if not np.isfinite(value) or value <= 0:
        raise ParameterDomainError(f"{name} must be finite and > 0, got {value}")


def _outside(x, lo, hi):
    return (x < lo) | (x > hi)


@dataclass(frozen=True)
class Gamma(Distribution):
    shape: float
    scale: float

    def __post_init__(self):
        _positive("Gamma shape", self.shape)
        _positive("Gamma scale", self.scale)

    lower = 0.0

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, self.scale, size)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (
                (self.shape - 1.0) * np.log(x)
                - x / self.scale
                - special.gammaln(self.shape)
                - self.shape * np.log(self.scale)
            )
        out = np.where(x < 0, -np.inf, out)
        if self.shape == 1.0:
            out = np.where(x == 0, -np.log(self.scale), out)
        return out[()]

    def cdf(self, x):
        return special.gammainc(self.shape, np.maximum(np.asarray(x, float), 0.0) / self.scale)

    def ppf(self, q):
        return special.gammaincinv(self.shape, q) * self.scale

    @property
    def mean(self):
        return self.shape * self.scale

    @property
    def var(self):
        return self.shape * self.scale**2


@dataclass(frozen=True)
class Beta(Distribution):
    alpha: float
    beta: float

    def __post_init__(self):
        _positive("Beta alpha", self.alpha)
        _positive("Beta beta", self.beta)

    lower = 0.0
    upper = 1.0

    def sample(self, rng, size=None):
        return rng.beta(self.alpha, self.beta, size)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (
                special.xlogy(self.alpha - 1.0, x)
                + special.xlog1py(self.beta - 1.0, -x)
                - special.betaln(self.alpha, self.beta)
            )
        return np.where(_outside(x, 0.0, 1.0), -np.inf, out)[()]

    def cdf(self, x):
        return special.betainc(self.alpha, self.beta, np.clip(np.asarray(x, float), 0.0, 1.0))

    def ppf(self, q):
        return special.betaincinv(self.alpha, self.beta, q)

    @property
    def mean(self):
        return self.alpha / (self.alpha + self.beta)

    @property
    def var(self):
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s**2 * (s + 1.0))


@dataclass(frozen=True)
class Exponential(Distribution):
    rate: float

    def __post_init__(self):
        _positive("Exponential rate", self.rate)

    lower = 0.0

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x < 0, -np.inf, np.log(self.rate) - self.rate * x)[()]

    def cdf(self, x):
        return -np.expm1(-self.rate * np.maximum(np.asarray(x, float), 0.0))

    def ppf(self, q):
        return -np.log1p(-np.asarray(q, float)) / self.rate

    @property
    def mean(self):
        return 1.0 / self.rate

    @property
    def var(self):
        return 1.0 / self.rate**2


@dataclass(frozen=True)
class Uniform(Distribution):
    lower: float
    upper: float

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)) or not self.lower < self.upper:
            raise ParameterDomainError(f"Uniform needs lower < upper, got ({self.lower}, {self.upper})")

    def sample(self, rng, size=None):
        return rng.uniform(self.lower, self.upper, size)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(_outside(x, self.lower, self.upper), -np.inf, -np.log(self.upper - self.lower))[()]

    def cdf(self, x):
        return np.clip((np.asarray(x, float) - self.lower) / (self.upper - self.lower), 0.0, 1.0)

    def ppf(self, q):
        return self.lower + np.asarray(q, float) * (self.upper - self.lower)

    @property
    def mean(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def var(self):
        return (self.upper - self.lower) ** 2 / 12.0


@dataclass(frozen=True)
class Normal(Distribution):
    mean_: float = field(metadata={"alias": "mean"})
    sd: float

    def __post_init__(self):
        if not np.isfinite(self.mean_):
            raise ParameterDomainError(f"Normal mean must be finite, got {self.mean_}")
        _positive("Normal sd", self.sd)

    def sample(self, rng, size=None):
        return rng.normal(self.mean_, self.sd, size)

    def log_pdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mean_) / self.sd
        return (-0.5 * z * z - np.log(self.sd) - 0.5 * LOG_2PI)[()]

    def cdf(self, x):
        return special.ndtr((np.asarray(x, float) - self.mean_) / self.sd)

    def ppf(self, q):
        return self.mean_ + self.sd * special.ndtri(q)

    @property
    def mean(self):
        return self.mean_

    @property
    def var(self):
        return self.sd**2

    def to_dict(self):
        return {"family": "Normal", "mean": self.mean_, "sd": self.sd}


@dataclass(frozen=True)
class TruncatedNormal(Distribution):
    """Normal(mean, sd) restricted to [lower, upper]; sampled by inverse CDF."""

    mean_: float
    sd: float
    lower: float = 0.0
    upper: float = np.inf

    def __post_init__(self):
        _positive("TruncatedNormal sd", self.sd)
        if not self.lower < self.upper:
            raise ParameterDomainError(
                f"TruncatedNormal needs lower < upper, got ({self.lower}, {self.upper})"
            )

    @property
    def _ab(self):
        return (self.lower - self.mean_) / self.sd, (self.upper - self.mean_) / self.sd

    @property
    def _log_z(self):
        a, b = self._ab
        # Work on whichever tail keeps the mass away from 1 - tiny.
        if a > 0:
            return float(np.log(special.ndtr(-a) - special.ndtr(-b)))
        return float(np.log(special.ndtr(b) - special.ndtr(a)))

    def sample(self, rng, size=None):
        return self.ppf(rng.uniform(0.0, 1.0, size))

    def ppf(self, q):
        q = np.asarray(q, float)
        a, b = self._ab
        if a > 0:
            # Upper tail: invert the survival function for accuracy.
            sa, sb = special.ndtr(-a), special.ndtr(-b)
            z = -special.ndtri(sa - q * (sa - sb))
        else:
            fa, fb = special.ndtr(a), special.ndtr(b)
            z = special.ndtri(fa + q * (fb - fa))
        return np.clip(self.mean_ + self.sd * z, self.lower, self.upper)[()]

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean_) / self.sd
        out = -0.5 * z * z - np.log(self.sd) - 0.5 * LOG_2PI - self._log_z
        return np.where(_outside(x, self.lower, self.upper), -np.inf, out)[()]

    def cdf(self, x):
        a, b = self._ab
        z = (np.clip(np.asarray(x, float), self.lower, self.upper) - self.mean_) / self.sd
        fa = special.ndtr(a)
        return (special.ndtr(z) - fa) / np.exp(self._log_z)

    @property
    def mean(self):
        a, b = self._ab
        pa = np.exp(-0.5 * a * a - 0.5 * LOG_2PI) if np.isfinite(a) else 0.0
        pb = np.exp(-0.5 * b * b - 0.5 * LOG_2PI) if np.isfinite(b) else 0.0
        return self.mean_ + self.sd * (pa - pb) / np.exp(self._log_z)

    @property
    def var(self):
        a, b = self._ab
        z = np.exp(self._log_z)
        pa = np.exp(-0.5 * a * a - 0.5 * LOG_2PI) if np.isfinite(a) else 0.0
        pb = np.exp(-0.5 * b * b - 0.5 * LOG_2PI) if np.isfinite(b) else 0.0
        apa = a * pa if np.isfinite(a) else 0.0
        bpb = b * pb if np.isfinite(b) else 0.0
        return self.sd**2 * (1.0 + (apa - bpb) / z - ((pa - pb) / z) ** 2)

    def to_dict(self):
        return {
            "family": "TruncatedNormal",
            "mean": self.mean_,
            "sd": self.sd,
            "lower": self.lower,
            "upper": self.upper,
        }


FAMILIES = {
    "Gamma": Gamma,
    "Beta": Beta,
    "Exponential": Exponential,
    "Uniform": Uniform,
    "Normal": Normal,
    "TruncatedNormal": TruncatedNormal,
}


def distribution_from_dict(d: dict) -> Distribution:
    """Inverse of ``Distribution.to_dict``."""
    d = dict(d)
    family = d.pop("family")
    if family not in FAMILIES:
        raise ParameterDomainError(f"unknown distribution family {family!r}")
    if "mean" in d:
        d["mean_"] = d.pop("mean")
    d = {k: float(v) for k, v in d.items()}
    return FAMILIES[family](**d)


def sample(dist: Distribution, rng: np.random.Generator) -> float:
    return float(dist.sample(rng))


def log_pdf(dist: Distribution, x: float) -> float:
    return float(dist.log_pdf(x))


@dataclass(frozen=True)
class PriorSpec:
    """Priors for the initial low-level parameters and the static high-level ones.

    ``lower``/``upper`` are the clip bounds applied to every low-level
    parameter vector, including the initial draw.
    """

    theta: tuple[Distribution, ...]
    eta: tuple[Distribution, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    theta_names: tuple[str, ...] = ()
    eta_names: tuple[str, ...] = ()

    def __post_init__(self):
        d = len(self.theta)
        if len(self.lower) != d or len(self.upper) != d:
            raise ParameterDomainError(
                f"need one clip bound per low-level parameter ({d}), "
                f"got {len(self.lower)} lower / {len(self.upper)} upper"
            )
        if not np.all(np.asarray(self.lower) < np.asarray(self.upper)):
            raise ParameterDomainError("clip bounds must satisfy lower < upper elementwise")
        if self.theta_names and len(self.theta_names) != d:
            raise ParameterDomainError("theta_names length does not match theta priors")
        if self.eta_names and len(self.eta_names) != len(self.eta):
            raise ParameterDomainError("eta_names length does not match eta priors")
        if not self.theta_names:
            object.__setattr__(self, "theta_names", tuple(f"theta{i}" for i in range(d)))
        if not self.eta_names:
            object.__setattr__(self, "eta_names", tuple(f"eta{i}" for i in range(len(self.eta))))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    def clip(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lo, self.hi)

    def sample_theta0(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = () if size is None else (size,)
        draws = np.stack([np.asarray(p.sample(rng, shape), float) for p in self.theta], axis=-1)
        return self.clip(draws)

    def sample_eta(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = () if size is None else (size,)
        if not self.eta:
            return np.zeros(shape + (0,))
        return np.stack([np.asarray(p.sample(rng, shape), float) for p in self.eta], axis=-1)

    def to_dict(self) -> dict:
        return {
            "theta": [p.to_dict() for p in self.theta],
            "eta": [p.to_dict() for p in self.eta],
            "lower": list(map(float, self.lower)),
            "upper": list(map(float, self.upper)),
            "theta_names": list(self.theta_names),
            "eta_names": list(self.eta_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        return cls(
            theta=tuple(distribution_from_dict(p) for p in d["theta"]),
            eta=tuple(distribution_from_dict(p) for p in d.get("eta", [])),
            lower=tuple(float(x) for x in d["lower"]),
            upper=tuple(float(x) for x in d["upper"]),
            theta_names=tuple(d.get("theta_names", ())),
            eta_names=tuple(d.get("eta_names", ())),
        )


def sample_prior(spec: PriorSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(theta_0, eta)``; theta_0 is clipped into the bounds, never rejected."""
    return spec.sample_theta0(rng), spec.sample_eta(rng)


def stratified_sample(dist: Distribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws with one uniform per stratum, pushed through the inverse CDF, shuffled."""
    u = (np.arange(n) + rng.uniform(size=n)) / n
    return rng.permutation(np.asarray(dist.ppf(u), float))


def as_vector(x: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))
