"""Elementwise maps between bounded parameter spaces and the real line."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri

from ..generative import ModelSpec
from ..stochastic import Distribution, distribution_from_dict

SQUEEZE = 1e-4
PROBIT_NODES = 4001
# quantile mass reserved at each clipped bound of a low-level parameter
ATOM_BAND = 0.02
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _probit_table(dist: Distribution, lo: float, hi: float, atom: float):
    """Nodes ``(z_k, x_k)`` of the interior map and the log of its density constant.

    With ``atom > 0`` the quantile bands ``(0, atom)`` and ``(1 - atom, 1)`` are
    reserved for the clipped point masses at ``lo`` and ``hi``; the interior is
    the prior truncated to ``[lo, hi]`` spread over the remaining quantiles.
    """
    f_lo = float(dist.cdf(lo)) if np.isfinite(lo) else 0.0
    f_hi = float(dist.cdf(hi)) if np.isfinite(hi) else 1.0
    edge = max(atom, 1e-12)
    z = np.linspace(ndtri(edge), -ndtri(edge), PROBIT_NODES)
    u = np.clip((ndtr(z) - atom) / (1.0 - 2.0 * atom), 0.0, 1.0)
    x = np.clip(np.asarray(dist.ppf(f_lo + u * (f_hi - f_lo)), float), lo, hi)
    if atom > 0:
        x[0], x[-1] = lo, hi
    keep = np.concatenate([[True], np.diff(x) > 0])
    return z[keep], x[keep], float(np.log(f_hi - f_lo) - np.log1p(-2.0 * atom))


@dataclass(frozen=True)
class Transform:
    """Per-dimension bijections; ``kind[i]`` is ``"probit"``, ``"logit"``, ``"log"`` or ``"identity"``.

    ``probit`` maps through the prior: ``z = Phi^{-1}(F(x))`` with ``F`` the
    prior CDF truncated to ``[lo, hi]``, so the prior itself becomes a standard
    normal and weakly identified posteriors stay close to Gaussian.  It is
    evaluated by linear interpolation in a fine monotone table, which keeps the
    forward and inverse maps exact inverses of each other on the interior.
    When ``atom > 0``, values clipped onto ``lo`` or ``hi`` map into the outer
    quantile bands (uniformly at random given an ``rng``, else the band
    median) and the inverse sends both bands back to the bound.
    ``logit`` maps ``(lo, hi)`` and ``log`` maps ``(lo, inf)`` to the real line; values on the boundary
    (produced by clipping) are pulled ``SQUEEZE`` of the range inside first.
    """

    kind: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray
    dists: tuple = ()
    atom: float = 0.0
    _tables: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for i, k in enumerate(self.kind):
            if k == "probit":
                self._tables[i] = _probit_table(self.dists[i], float(self.lo[i]), float(self.hi[i]), self.atom)

    @property
    def dim(self) -> int:
        return len(self.kind)

    def _masks(self):
        k = np.asarray(self.kind)
        return k == "logit", k == "log"

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x, float)
        is_logit, is_log = self._masks()
        z = x.copy()
        if is_logit.any():
            lo, hi = self.lo[is_logit], self.hi[is_logit]
            u = np.clip((x[..., is_logit] - lo) / (hi - lo), SQUEEZE, 1.0 - SQUEEZE)
            z[..., is_logit] = logit(u)
        if is_log.any():
            z[..., is_log] = np.log(np.maximum(x[..., is_log] - self.lo[is_log], 1e-300))
        for i, (zk, xk, _) in self._tables.items():
            z[..., i] = np.interp(x[..., i], xk, zk)
            if self.atom > 0:
                for side, at in ((-1.0, x[..., i] <= xk[0]), (1.0, x[..., i] >= xk[-1])):
                    n = int(at.sum())
                    if n:
                        q = rng.uniform(0.0, self.atom, n) if rng is not None else np.full(n, 0.5 * self.atom)
                        z[..., i][at] = -side * ndtri(q)
        return z

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, float)
        is_logit, is_log = self._masks()
        x = z.copy()
        if is_logit.any():
            lo, hi = self.lo[is_logit], self.hi[is_logit]
            x[..., is_logit] = lo + (hi - lo) * expit(z[..., is_logit])
        if is_log.any():
            x[..., is_log] = self.lo[is_log] + np.exp(z[..., is_log])
        for i, (zk, xk, _) in self._tables.items():
            x[..., i] = np.interp(z[..., i], zk, xk)
        return x

    def log_abs_det_jacobian(self, x: np.ndarray) -> np.ndarray:
        """``sum_i log |dz_i/dx_i|`` over the last axis."""
        x = np.asarray(x, float)
        is_logit, is_log = self._masks()
        out = np.zeros(x.shape[:-1])
        if is_logit.any():
            lo, hi = self.lo[is_logit], self.hi[is_logit]
            u = np.clip((x[..., is_logit] - lo) / (hi - lo), SQUEEZE, 1.0 - SQUEEZE)
            out -= np.sum(np.log(u) + np.log1p(-u) + np.log(hi - lo), axis=-1)
        if is_log.any():
            out -= np.sum(np.log(np.maximum(x[..., is_log] - self.lo[is_log], 1e-300)), axis=-1)
        for i, (zk, xk, log_mass) in self._tables.items():
            # dz/dx = f(x) / (mass * phi(z)) inside; point masses on a bound add nothing
            xi = np.clip(x[..., i], xk[0], xk[-1])
            inner = (xi > xk[0]) & (xi < xk[-1]) if self.atom > 0 else np.ones(xi.shape, bool)
            zi = np.interp(xi, xk, zk)
            with np.errstate(divide="ignore"):
                lf = np.asarray(self.dists[i].log_pdf(xi), float)
            out += np.where(inner, np.maximum(lf, -700.0) - log_mass + 0.5 * zi * zi + _LOG_SQRT_2PI, 0.0)
        return out

    def to_dict(self) -> dict:
        d = {"kind": list(self.kind), "lo": self.lo.tolist(), "hi": self.hi.tolist()}
        if self.dists:
            d["dists"] = [None if x is None else x.to_dict() for x in self.dists]
            d["atom"] = self.atom
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Transform":
        dists = tuple(None if x is None else distribution_from_dict(x) for x in d.get("dists", ()))
        return cls(tuple(d["kind"]), np.asarray(d["lo"], float), np.asarray(d["hi"], float), dists, d.get("atom", 0.0))


def _support_transform(dists) -> Transform:
    kinds, lo, hi = [], [], []
    for dist in dists:
        a, b = dist.support
        if np.isfinite(a) and np.isfinite(b):
            kinds.append("logit")
        elif np.isfinite(a):
            kinds.append("log")
        else:
            kinds.append("identity")
        lo.append(a if np.isfinite(a) else 0.0)
        hi.append(b if np.isfinite(b) else 0.0)
    return Transform(tuple(kinds), np.asarray(lo, float), np.asarray(hi, float))


def prior_probit_transform(dists, lo, hi, atom: float = 0.0) -> Transform:
    return Transform(("probit",) * len(dists), np.asarray(lo, float), np.asarray(hi, float), tuple(dists), atom)


def theta_transform(spec: ModelSpec) -> Transform:
    """Probit through the initial-state prior truncated to the parameter bounds.

    Low-level parameters are clipped into their bounds by the simulator, so
    both bounds carry point masses and get atom bands.
    """
    return prior_probit_transform(spec.prior.theta, spec.prior.lo, spec.prior.hi, ATOM_BAND)


def eta_transform(spec: ModelSpec) -> Transform:
    """Probit through the hyperprior on its support."""
    if not spec.prior.eta:
        return _support_transform(())
    sup = np.array([d.support for d in spec.prior.eta], float)
    return prior_probit_transform(spec.prior.eta, sup[:, 0], sup[:, 1])
