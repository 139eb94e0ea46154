"""Wiener first-passage-time density of the DDM (unit diffusion constant).

Uses the two classic series for the standardized lower-boundary density
(Navarro & Fuss, 2009): the small-time expansion for ``t / a**2 < 1`` and
the large-time expansion otherwise.  Both are truncated far beyond double
precision in their respective regimes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_TIME_TERMS = 10  # k = -10..10
LARGE_TIME_TERMS = 30  # k = 1..30
SWITCH = 1.0

_K_SMALL = np.arange(-SMALL_TIME_TERMS, SMALL_TIME_TERMS + 1, dtype=float)
_K_LARGE = np.arange(1, LARGE_TIME_TERMS + 1, dtype=float)


@dataclass(frozen=True)
class WfptParams:
    v: float
    a: float
    tau: float
    w: float = 0.5

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"threshold must be > 0, got {self.a}")
        if self.tau < 0:
            raise ValueError(f"non-decision time must be >= 0, got {self.tau}")
        if not 0 < self.w < 1:
            raise ValueError(f"relative start must lie in (0, 1), got {self.w}")


def _log_standard_density(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """log f(u | v=0, a=1, w) for the lower boundary; ``u > 0``."""
    out = np.empty_like(u)
    small = u < SWITCH
    if np.any(small):
        us, ws = u[small], w[small]
        r = ws[:, None] + 2.0 * _K_SMALL[None, :]
        expo = -(r * r - (ws * ws)[:, None]) / (2.0 * us[:, None])
        series = np.sum(r * np.exp(expo), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[small] = -0.5 * np.log(2.0 * np.pi * us**3) - ws * ws / (2.0 * us) + np.log(series)
    large = ~small
    if np.any(large):
        ul, wl = u[large], w[large]
        k = _K_LARGE[None, :]
        expo = -(k * k - 1.0) * np.pi**2 * ul[:, None] / 2.0
        series = np.sum(k * np.sin(k * np.pi * wl[:, None]) * np.exp(expo), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[large] = np.log(np.pi) - np.pi**2 * ul / 2.0 + np.log(series)
    return out


def wfpt_log_density(v, a, tau, rt, choice, w=0.5) -> np.ndarray:
    """Log density of ``(rt, choice)``; ``choice = 1`` is absorption at the upper boundary ``a``.

    All arguments broadcast.  Returns ``-inf`` for ``rt <= tau`` or ``a <= 0``.
    """
    v, a, tau, rt, choice, w = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (v, a, tau, rt, choice, w))
    )
    shape = v.shape
    v, a, tau, rt, choice, w = (x.ravel() for x in (v, a, tau, rt, choice, w))
    out = np.full(v.shape, -np.inf)
    ok = (rt > tau) & (a > 0)
    if np.any(ok):
        upper = choice[ok] > 0.5
        # upper-boundary density is the lower-boundary density of the mirrored process
        vv = np.where(upper, -v[ok], v[ok])
        ww = np.where(upper, 1.0 - w[ok], w[ok])
        aa = a[ok]
        t = rt[ok] - tau[ok]
        u = t / (aa * aa)
        out[ok] = -2.0 * np.log(aa) - vv * aa * ww - 0.5 * vv * vv * t + _log_standard_density(u, ww)
    return out.reshape(shape)[()]


def wfpt_density(v, a, tau, rt, choice, w=0.5):
    return np.exp(wfpt_log_density(v, a, tau, rt, choice, w))


def log_density(params: WfptParams, rt, choice):
    return wfpt_log_density(params.v, params.a, params.tau, rt, choice, params.w)


def choice_probability(v, a, w=0.5):
    """Probability of absorbing at the upper boundary (closed form)."""
    v = np.asarray(v, float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        p = np.where(np.abs(v) < 1e-12, w, np.expm1(-2.0 * v * a * w) / np.expm1(-2.0 * v * a))
    return p[()]


def rt_cdf(v, a, tau, rt, choice, w=0.5):
    """Defective CDF P(RT <= rt, choice) by quadrature of the density."""
    from scipy import integrate

    if rt <= tau:
        return 0.0
    f = lambda s: float(wfpt_density(v, a, tau, s, choice, w))  # noqa: E731
    val, _ = integrate.quad(f, tau, rt, limit=200, epsabs=1e-12, epsrel=1e-10)
    return val
