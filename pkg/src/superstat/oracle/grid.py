"""Grid approximation of the joint filtering posterior for one low-level and one
high-level parameter (random-walk transition).

The joint mass lives on an ``n_theta x n_eta`` lattice.  Each step blurs every
``eta`` column with a Gaussian of sd ``eta`` (clip semantics: mass pushed past
an end of the theta axis piles up on that end point), multiplies by the
point-wise likelihood and renormalizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import fft
from scipy.special import gammaln, logsumexp

from ..stochastic import Distribution

LikelihoodFn = Callable[[np.ndarray, object], np.ndarray]


class DegenerateUpdateError(ArithmeticError):
    """The likelihood removed all posterior mass from the grid."""


@dataclass
class Grid2D:
    axis_theta: np.ndarray
    axis_eta: np.ndarray
    log_mass: np.ndarray  # (n_theta, n_eta)

    def __post_init__(self):
        if self.log_mass.shape != (self.axis_theta.size, self.axis_eta.size):
            raise ValueError("log_mass shape does not match the axes")
        for ax in (self.axis_theta, self.axis_eta):
            if ax.size > 1 and not np.all(np.diff(ax) > 0):
                raise ValueError("grid axes must be strictly increasing")

    @property
    def mass(self) -> np.ndarray:
        return np.exp(self.log_mass)

    def normalized(self) -> "Grid2D":
        return Grid2D(self.axis_theta, self.axis_eta, self.log_mass - logsumexp(self.log_mass))


def make_grid(
    theta_range: tuple[float, float],
    n_theta: int,
    eta_range: tuple[float, float],
    n_eta: int,
    theta_prior: Distribution,
    eta_prior: Distribution,
) -> Grid2D:
    """Equally spaced lattice with prior mass at the grid points."""
    th = np.linspace(*theta_range, n_theta)
    et = np.linspace(*eta_range, n_eta) if n_eta > 1 else np.array([float(eta_range[0])])
    lm = np.asarray(theta_prior.log_pdf(th))[:, None] + np.asarray(eta_prior.log_pdf(et))[None, :]
    if not np.any(np.isfinite(lm)):
        raise DegenerateUpdateError("prior has no mass on the grid")
    return Grid2D(th, et, lm).normalized()


def point_mass_grid(theta_axis, eta_axis, i: int, j: int) -> Grid2D:
    lm = np.full((len(theta_axis), len(eta_axis)), -np.inf)
    lm[i, j] = 0.0
    return Grid2D(np.asarray(theta_axis, float), np.asarray(eta_axis, float), lm)


def poisson_loglik(theta: np.ndarray, count) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = count * np.log(theta) - theta - gammaln(count + 1.0)
    if count == 0:
        out = np.where(theta == 0, 0.0, out)
    return out


class RandomWalkBlur:
    """Per-column Gaussian blur with sd ``eta_j``, truncated at 6 sd, via FFT.

    Kernels are sampled at the grid spacing and renormalized; blurred mass
    that lands outside the theta axis is folded onto the end points.
    """

    def __init__(self, axis_theta: np.ndarray, axis_eta: np.ndarray, truncate: float = 6.0):
        n = axis_theta.size
        dx = axis_theta[1] - axis_theta[0] if n > 1 else 1.0
        sds = np.asarray(axis_eta, float)
        if np.any(sds < 0):
            raise ValueError("random-walk sds on the grid must be >= 0")
        half = int(np.ceil(truncate * sds.max() / dx)) if sds.max() > 0 else 0
        offs = np.arange(-half, half + 1) * dx
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.exp(-0.5 * (offs[:, None] / sds[None, :]) ** 2)
        k[:, sds == 0] = 0.0
        k[half, sds == 0] = 1.0
        # drop taps outside each column's own truncation radius
        k[np.abs(offs)[:, None] > truncate * sds[None, :] + 0.5 * dx] = 0.0
        k /= k.sum(axis=0, keepdims=True)
        self.n = n
        self.half = half
        self.kernels = k
        self.nfft = fft.next_fast_len(n + 2 * half, real=True)
        self._kf = fft.rfft(k, self.nfft, axis=0)

    def __call__(self, mass: np.ndarray) -> np.ndarray:
        if self.half == 0:
            return mass.copy()
        n, h = self.n, self.half
        full = fft.irfft(fft.rfft(mass, self.nfft, axis=0) * self._kf, self.nfft, axis=0)
        full = np.maximum(full[: n + 2 * h], 0.0)
        out = full[h : h + n].copy()
        out[0] += full[:h].sum(axis=0)
        out[-1] += full[h + n :].sum(axis=0)
        return out


def grid_filter_step(
    grid: Grid2D,
    x_t,
    lik: LikelihoodFn,
    trans: RandomWalkBlur | None = None,
) -> Grid2D:
    """One predict-update step of the joint filtering posterior."""
    shift = np.max(grid.log_mass)
    mass = np.exp(grid.log_mass - shift)
    if trans is not None:
        mass = trans(mass)
    loglik = np.asarray(lik(grid.axis_theta, x_t), float)
    with np.errstate(divide="ignore"):
        log_post = np.log(mass) + loglik[:, None]
    total = logsumexp(log_post)
    if not np.isfinite(total):
        raise DegenerateUpdateError(f"posterior mass vanished after observing {x_t!r}")
    return Grid2D(grid.axis_theta, grid.axis_eta, log_post - total)


@dataclass
class Marginal:
    mean: float
    sd: float


def grid_marginals(grid: Grid2D) -> tuple[Marginal, Marginal]:
    """Moments of the theta and eta marginals (row and column sums)."""
    p = np.exp(grid.log_mass - logsumexp(grid.log_mass))
    out = []
    for axis, values in ((1, grid.axis_theta), (0, grid.axis_eta)):
        m = p.sum(axis=axis)
        mu = float(np.dot(m, values))
        var = float(np.dot(m, (values - mu) ** 2))
        out.append(Marginal(mu, float(np.sqrt(max(var, 0.0)))))
    return out[0], out[1]


@dataclass
class GridFilterResult:
    theta_mean: np.ndarray
    theta_sd: np.ndarray
    eta_mean: np.ndarray
    eta_sd: np.ndarray
    final: Grid2D


def grid_filter(grid: Grid2D, data, lik: LikelihoodFn, blur: bool = True) -> GridFilterResult:
    """Run the filter over ``data``; ``grid`` is the prior on ``(theta_0, eta)``."""
    trans = RandomWalkBlur(grid.axis_theta, grid.axis_eta) if blur else None
    T = len(data)
    out = np.zeros((4, T))
    for t, x in enumerate(data):
        grid = grid_filter_step(grid, x, lik, trans)
        th, et = grid_marginals(grid)
        out[:, t] = (th.mean, th.sd, et.mean, et.sd)
    return GridFilterResult(*out, final=grid)
