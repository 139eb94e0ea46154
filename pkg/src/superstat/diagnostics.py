"""Validation battery: SBC with simultaneous ECDF bands, recovery metrics,
MMD, posterior re-simulation with multi-horizon forecasts, smoothing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .generative import (
    GaussianProcess,
    ModelSpec,
    PreconditionError,
    TimeSeries,
    gp_forecast,
    simulate_batch,
    simulate_ddm_trials,
    simulate_parameter_batch,
    simulate_poisson,
    transition_step,
)
from .oracle.wfpt import wfpt_log_density
from .posterior import PosteriorDraws

# --------------------------------------------------------------------------
# smoothing


def sma(series: Sequence[float], period: int) -> np.ndarray:
    """Trailing simple moving average; the first ``period - 1`` values average the available prefix."""
    if period < 1:
        raise PreconditionError("period must be >= 1")
    x = np.asarray(series, float)
    if x.size == 0:
        return x.copy()
    c = np.cumsum(np.insert(x, 0, 0.0, axis=-1), axis=-1)
    n = x.shape[-1]
    idx = np.arange(1, n + 1)
    lo = np.maximum(idx - period, 0)
    return (c[..., idx] - c[..., lo]) / (idx - lo)


# --------------------------------------------------------------------------
# SBC


@dataclass
class SbcResult:
    """Fractional ranks and ECDF-difference curves per checkpoint and parameter."""

    names: tuple[str, ...]
    checkpoints: tuple[int, ...]
    ranks: np.ndarray  # (n_checkpoints, n_params, n_sims)
    z: np.ndarray  # evaluation grid in (0, 1)
    ecdf_diff: np.ndarray  # (n_checkpoints, n_params, len(z))
    band: np.ndarray  # half-width of the simultaneous band at z
    level: float = 0.95

    @property
    def inside(self) -> np.ndarray:
        """``(n_checkpoints, n_params)``: curve stays within the band everywhere."""
        return np.all(np.abs(self.ecdf_diff) <= self.band, axis=-1)

    def chi2_pvalues(self, bins: int = 20) -> np.ndarray:
        counts = np.stack(
            [np.histogram(r, bins=bins, range=(0.0, 1.0))[0] for r in self.ranks.reshape(-1, self.ranks.shape[-1])]
        )
        p = stats.chisquare(counts, axis=-1).pvalue
        return p.reshape(self.ranks.shape[:2])

    def rows(self):
        for i, t in enumerate(self.checkpoints):
            for j, name in enumerate(self.names):
                for k, z in enumerate(self.z):
                    # the evaluation point z rides in the metric name to keep the six-column layout
                    yield (f"ecdf_diff@z={z:.4f}", name, t, float(self.ecdf_diff[i, j, k]),
                           float(-self.band[k]), float(self.band[k]))


_BAND_CACHE: dict = {}


def ecdf_band(n: int, z: np.ndarray, level: float = 0.95, n_rep: int = 10_000, seed: int = 20_240_101) -> np.ndarray:
    """Half-widths of simultaneous bands for ``ECDF(z) - z`` of ``n`` uniforms.

    The band is ``c * sqrt(z (1 - z) / n)`` with ``c`` the ``level`` quantile
    of the maximal standardized deviation over ``z`` among ``n_rep`` Monte
    Carlo uniform samples of size ``n``.
    """
    key = (n, tuple(np.round(z, 12)), level, n_rep, seed)
    if key not in _BAND_CACHE:
        rng = np.random.default_rng(seed)
        sd = np.sqrt(z * (1.0 - z) / n)
        stat = np.empty(n_rep)
        for start in range(0, n_rep, 500):
            u = np.sort(rng.random((min(500, n_rep - start), n)), axis=1)
            F = np.stack([np.searchsorted(row, z, side="right") for row in u]) / n
            stat[start : start + len(u)] = np.max(np.abs(F - z) / sd, axis=1)
        _BAND_CACHE[key] = float(np.quantile(stat, level)) * sd
    return _BAND_CACHE[key]


def fractional_ranks(truth: np.ndarray, draws: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomized fractional rank of ``truth (..., )`` among ``draws (..., L)``.

    With ``k`` draws below the truth, returns ``(k + u) / (L + 1)`` with
    ``u ~ U(0, 1)``, which is exactly uniform for a calibrated posterior.
    Exact ties are broken by a ``1e-9`` jitter.
    """
    L = draws.shape[-1]
    jitter = 1e-9 * rng.standard_normal(draws.shape)
    k = np.sum(draws + jitter < truth[..., None], axis=-1)
    return (k + rng.random(k.shape)) / (L + 1)


def sbc_from_ranks(ranks: np.ndarray, names, checkpoints, level: float = 0.95, n_grid: int = 99) -> SbcResult:
    n = ranks.shape[-1]
    z = np.arange(1, n_grid + 1) / (n_grid + 1)
    F = (ranks[..., None] <= z).mean(axis=-2)
    return SbcResult(tuple(names), tuple(checkpoints), ranks, z, F - z, ecdf_band(n, z, level), level)


def sbc_ranks_from_draws(truth: np.ndarray, draws: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``truth (n_sims, n_ck, P)`` and ``draws (n_sims, n_ck, L, P)`` to ranks ``(n_ck, P, n_sims)``."""
    r = fractional_ranks(np.moveaxis(truth, 0, -1), np.moveaxis(draws, (0, 2), (-2, -1)), rng)
    return r


def run_sbc(
    spec: ModelSpec,
    sampler,
    n_sims: int,
    n_draws: int,
    checkpoints: Sequence[int],
    rng: np.random.Generator,
    level: float = 0.95,
) -> SbcResult:
    """Simulation-based calibration of ``sampler`` at the given 1-based times.

    ``sampler`` is a trained amortizer (anything with ``encode_batch`` and
    ``posterior_batch``) or a callable ``(batch, t_index, n_draws, rng) ->
    (theta (n_sims, n_ck, L, d), eta (n_sims, n_ck, L, d_eta))``.
    """
    checkpoints = tuple(int(t) for t in checkpoints)
    T = max(checkpoints)
    if min(checkpoints) < 1:
        raise PreconditionError("checkpoints are 1-based times")
    batch = simulate_batch(spec, n_sims, T, rng)
    t_index = np.asarray(checkpoints) - 1
    if callable(sampler) and not hasattr(sampler, "posterior_batch"):
        th_draws, eta_draws = sampler(batch, t_index, n_draws, rng)
    else:
        posts = sampler.posterior_batch(sampler.encode_batch(batch))
        th_draws = np.empty((n_sims, len(t_index), n_draws, spec.theta_dim))
        eta_draws = np.empty((n_sims, len(t_index), n_draws, spec.eta_dim))
        for i, post in enumerate(posts):
            d = post.sample(n_draws, rng, t_index)
            th_draws[i], eta_draws[i] = d.theta, d.eta
    truth = np.concatenate(
        [batch.theta[:, t_index], np.broadcast_to(batch.eta[:, None, :], (n_sims, len(t_index), spec.eta_dim))],
        axis=-1,
    )
    draws = np.concatenate([th_draws, eta_draws], axis=-1)
    ranks = sbc_ranks_from_draws(truth, draws, rng)
    return sbc_from_ranks(ranks, spec.theta_names + spec.eta_names, checkpoints, level)


def prior_sampler(spec: ModelSpec, shift_sd: float = 0.0) -> Callable:
    """Control sampler that ignores the data and draws from the prior marginals.

    ``shift_sd`` moves every draw by that many prior sds (miscalibration control).
    """

    def sample(batch, t_index, n_draws, rng):
        n = len(batch)
        T = int(np.max(t_index)) + 1
        theta, eta = simulate_parameter_batch(spec, n * n_draws, T, rng)
        th = theta[:, t_index].reshape(n, n_draws, len(t_index), -1).swapaxes(1, 2)
        et = np.broadcast_to(eta.reshape(n, n_draws, 1, -1), (n, n_draws, len(t_index), spec.eta_dim)).swapaxes(1, 2)
        if shift_sd:
            th = th + shift_sd * th.std(axis=2, keepdims=True)
            et = et + shift_sd * et.std(axis=2, keepdims=True)
        return th, et

    return sample


# --------------------------------------------------------------------------
# recovery


@dataclass
class RecoveryReport:
    names: tuple[str, ...]
    mae: np.ndarray  # (T, d) median absolute error across data sets
    mad: np.ndarray  # (T, d) median absolute deviation of the absolute errors
    post_sd: np.ndarray  # (T, d) median posterior sd
    checkpoints: tuple[int, ...]
    truth_at: np.ndarray  # (n_sets, n_ck, d)
    estimate_at: np.ndarray

    def correlation(self) -> np.ndarray:
        """Truth-vs-estimate Pearson correlation per checkpoint and parameter."""
        out = np.empty(self.truth_at.shape[1:])
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                a, b = self.truth_at[:, i, j], self.estimate_at[:, i, j]
                out[i, j] = np.corrcoef(a, b)[0, 1] if a.std() > 0 and b.std() > 0 else np.nan
        return out

    def rows(self):
        T = self.mae.shape[0]
        for j, name in enumerate(self.names):
            for t in range(T):
                m, s = float(self.mae[t, j]), float(self.mad[t, j])
                yield ("mae", name, t + 1, m, m - s, m + s)
                yield ("posterior_sd", name, t + 1, float(self.post_sd[t, j]), "", "")


def recovery_metrics(truth, means, sds, names, checkpoints=(25, 50, 99, 199, 299, 399)) -> RecoveryReport:
    """Recovery summaries from ``(n_sets, T, d)`` truth, posterior means and sds."""
    truth, means, sds = (np.asarray(x, float) for x in (truth, means, sds))
    err = np.abs(means - truth)
    mae = np.median(err, axis=0)
    mad = np.median(np.abs(err - mae), axis=0)
    T = truth.shape[1]
    ck = tuple(int(t) for t in checkpoints)
    if any(not 1 <= t <= T for t in ck):
        raise PreconditionError(f"checkpoints must lie in 1..{T}, got {ck}")
    idx = np.asarray(ck, int) - 1
    return RecoveryReport(tuple(names), mae, mad, np.median(sds, axis=0), ck, truth[:, idx], means[:, idx])


def recovery_study(
    scenarios: dict[str, ModelSpec],
    amortizer,
    n_per_scenario: int,
    T: int,
    rng: np.random.Generator,
    n_draws: int = 500,
    checkpoints=(25, 50, 99, 199, 299, 399),
) -> dict[str, RecoveryReport]:
    """Fit every scenario's simulated data sets with one amortizer (low-level parameters only)."""
    out = {}
    for name, spec in scenarios.items():
        batch = simulate_batch(spec, n_per_scenario, T, rng)
        posts = amortizer.posterior_batch(amortizer.encode_batch(batch))
        means = np.empty(batch.theta.shape)
        sds = np.empty(batch.theta.shape)
        for i, post in enumerate(posts):
            d = post.sample(n_draws, rng)
            means[i] = d.theta.mean(axis=1)
            sds[i] = d.theta.std(axis=1, ddof=1)
        out[name] = recovery_metrics(batch.theta, means, sds, spec.theta_names, checkpoints)
    return out


# --------------------------------------------------------------------------
# MMD


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, float)
    return x[:, None] if x.ndim == 1 else x


def _sqdist(a, b):
    return np.maximum(np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T, 0.0)


def median_bandwidth(pooled: np.ndarray, max_points: int = 2000) -> float:
    x = _as_2d(pooled)
    if len(x) > max_points:
        x = x[np.linspace(0, len(x) - 1, max_points).astype(int)]
    d2 = _sqdist(x, x)[np.triu_indices(len(x), 1)]
    med = float(np.sqrt(np.median(d2))) if d2.size else 1.0
    return med if med > 0 else 1.0


def _mmd2_from_kernel(K: np.ndarray, n: int) -> float:
    m = K.shape[0] - n
    Kxx, Kyy, Kxy = K[:n, :n], K[n:, n:], K[:n, n:]
    sxx = (Kxx.sum() - np.trace(Kxx)) / (n * (n - 1))
    syy = (Kyy.sum() - np.trace(Kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * Kxy.mean())


def mmd2_unbiased(a, b, bandwidth: float | str = "median") -> float:
    a, b = _as_2d(a), _as_2d(b)
    if len(a) < 2 or len(b) < 2:
        raise PreconditionError("MMD needs at least two points per sample")
    pooled = np.vstack([a, b])
    bw = median_bandwidth(pooled) if bandwidth == "median" else float(bandwidth)
    K = np.exp(-_sqdist(pooled, pooled) / (2.0 * bw * bw))
    return _mmd2_from_kernel(K, len(a))


def mmd(a, b, bandwidth: float | str = "median") -> float:
    """Gaussian-kernel MMD, reported as ``sqrt(max(0, unbiased MMD^2))``."""
    return float(np.sqrt(max(0.0, mmd2_unbiased(a, b, bandwidth))))


@dataclass
class PermutationTest:
    statistic: float  # unbiased MMD^2
    null: np.ndarray
    p_value: float

    def null_quantile(self, q: float) -> float:
        return float(np.quantile(self.null, q))


def mmd_permutation_test(a, b, rng: np.random.Generator, n_perm: int = 200, bandwidth="median") -> PermutationTest:
    a, b = _as_2d(a), _as_2d(b)
    pooled = np.vstack([a, b])
    bw = median_bandwidth(pooled) if bandwidth == "median" else float(bandwidth)
    K = np.exp(-_sqdist(pooled, pooled) / (2.0 * bw * bw))
    n = len(a)
    stat = _mmd2_from_kernel(K, n)
    null = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(len(pooled))
        null[i] = _mmd2_from_kernel(K[np.ix_(p, p)], n)
    return PermutationTest(stat, null, float((1 + np.sum(null >= stat)) / (1 + n_perm)))


# --------------------------------------------------------------------------
# posterior re-simulation and multi-horizon prediction


@dataclass
class PredictionBundle:
    t_split: int
    fit_paths: np.ndarray  # (S, t_split) simulated observable
    forecast_paths: np.ndarray  # (S, T - t_split)
    observed: np.ndarray  # (T,) observable of the data
    period: int = 5
    fit_theta: np.ndarray | None = None  # (S, t_split, d)
    forecast_theta: np.ndarray | None = None  # (S, T - t_split, d)
    extra: dict = field(default_factory=dict)

    @property
    def paths(self) -> np.ndarray:
        return np.concatenate([self.fit_paths, self.forecast_paths], axis=1)

    def summary(self, level: float = 0.95, smooth: bool = False):
        """Per-``t`` (median, lower, upper) of the simulated observable."""
        x = sma(self.paths, self.period) if smooth else self.paths
        a = (1.0 - level) / 2.0
        lo, med, hi = np.quantile(x, [a, 0.5, 1.0 - a], axis=0)
        return med, lo, hi

    def observed_view(self, smooth: bool = False) -> np.ndarray:
        return sma(self.observed, self.period) if smooth else self.observed

    def forecast_coverage(self, level: float = 0.95, smooth: bool = True) -> float:
        """Share of held-out observations inside the per-``t`` forecast interval."""
        _, lo, hi = self.summary(level, smooth)
        y = self.observed_view(smooth)
        s = slice(self.t_split, len(y))
        return float(np.mean((y[s] >= lo[s]) & (y[s] <= hi[s])))

    def rows(self, level: float = 0.95):
        for smooth in (False, True):
            med, lo, hi = self.summary(level, smooth)
            y = self.observed_view(smooth)
            tag = "sma" if smooth else "raw"
            for t in range(len(y)):
                seg = "fit" if t < self.t_split else "forecast"
                yield (f"{seg}_{tag}", "observable", t + 1, float(med[t]), float(lo[t]), float(hi[t]))
                yield (f"observed_{tag}", "observable", t + 1, float(y[t]), "", "")


def observable(data: TimeSeries) -> np.ndarray:
    """The scalar series that predictions are compared on: counts or response times."""
    return np.asarray(data.counts if data.kind == "poisson" else data.rt, float)


def _simulate_obs(spec: ModelSpec, theta: np.ndarray, conditions, rng) -> np.ndarray:
    """Observable for parameter paths ``(S, n, d)``; conditions ``(n,)`` are shared."""
    obs = spec.observation
    if obs.kind == "poisson":
        return simulate_poisson(theta[..., 0], rng).astype(float)
    k = obs.num_drifts
    S, n, _ = theta.shape
    cond = np.zeros(n, np.int64) if conditions is None else np.asarray(conditions, np.int64)
    v = theta[:, np.arange(n), cond]
    rt, _, _ = simulate_ddm_trials(v, theta[..., k], theta[..., k + 1], obs, rng)
    return rt.reshape(S, n)


def continue_paths(spec: ModelSpec, theta_last: np.ndarray, eta: np.ndarray, start_t: int, horizon: int, rng) -> np.ndarray:
    """Roll the transition model forward from ``theta_last (S, d)`` for ``horizon`` steps."""
    S, d = theta_last.shape
    prior = spec.prior
    if horizon <= 0:
        return np.empty((S, 0, d))
    if spec.transition == "gp":
        amp = np.asarray(spec.options["amplitude"], float)
        out = np.empty((S, horizon, d))
        for s in range(S):
            model = GaussianProcess(theta_last[s], amp, eta[s], float(spec.options.get("jitter", 1e-6)))
            out[s] = gp_forecast(model, theta_last[s], horizon, rng, prior.lo, prior.hi)
        return out
    model = spec.build_transition(theta_last, eta)
    hist = [theta_last] * max(1, model.order)
    out = np.empty((S, horizon, d))
    for h in range(horizon):
        step = transition_step(model, hist, rng, t=start_t + h + 1, lower=prior.lo, upper=prior.hi)
        out[:, h] = step
        hist = (hist + [step])[-len(hist):]
    return out


def resimulate_and_forecast(
    spec: ModelSpec,
    draws: PosteriorDraws,
    data: TimeSeries,
    t_split: int,
    S: int,
    rng: np.random.Generator,
    period: int = 5,
) -> PredictionBundle:
    """Posterior re-simulation on ``1..t_split`` and forecasts on ``t_split+1..T``.

    Fit segment: at each ``t`` a random posterior draw of ``theta_t`` per path.
    Forecast: paths start from draws of ``(theta_{t_split}, eta)`` and follow the
    transition model.  Known design variables (DDM conditions) are reused.
    """
    T = len(data)
    if not 1 <= t_split <= T:
        raise PreconditionError(f"t_split must lie in 1..{T}, got {t_split}")
    if draws.T < t_split:
        raise PreconditionError("posterior draws must cover 1..t_split")
    cond = data.condition if data.kind == "ddm" else None
    pick = rng.integers(0, draws.S, size=(S, t_split))
    fit_theta = draws.theta[np.arange(t_split)[None, :], pick]
    fit = _simulate_obs(spec, fit_theta, None if cond is None else cond[:t_split], rng)
    last = rng.integers(0, draws.S, size=S)
    th_last = draws.theta[t_split - 1, last]
    eta_last = draws.eta[t_split - 1, last]
    fc_theta = continue_paths(spec, th_last, eta_last, t_split, T - t_split, rng)
    fc = _simulate_obs(spec, fc_theta, None if cond is None else cond[t_split:], rng) if T > t_split else np.empty((S, 0))
    return PredictionBundle(t_split, fit, fc, observable(data), period, fit_theta, fc_theta)


# --------------------------------------------------------------------------
# static reference model


@dataclass
class StaticFit:
    theta: np.ndarray  # (v_1..v_k, a, tau)
    log_likelihood: float
    success: bool


def fit_static_ddm(data: TimeSeries, num_drifts: int, lower=None, upper=None) -> StaticFit:
    """Maximum-likelihood constant-parameter DDM (one drift per condition)."""
    rt = np.asarray(data.rt, float)
    choice = np.asarray(data.choice, float)
    cond = np.zeros(len(rt), int) if data.condition is None else np.asarray(data.condition, int)
    k = num_drifts
    lower = np.r_[[0.0] * k, 0.05, 0.0] if lower is None else np.asarray(lower, float)
    upper = np.r_[[6.0] * k, 4.0, 2.0] if upper is None else np.asarray(upper, float)
    tau_max = max(0.0, float(rt.min()) - 1e-4)
    upper = upper.copy()
    upper[k + 1] = min(upper[k + 1], tau_max)
    lower = np.minimum(lower, upper)

    def nll(p):
        ll = wfpt_log_density(p[:k][cond], p[k], p[k + 1], rt, choice)
        s = float(np.sum(ll))
        return -s if np.isfinite(s) else 1e12

    start = np.r_[[1.0] * k, 1.5, 0.5 * upper[k + 1]]
    start = np.clip(start, lower, upper)
    res = optimize.minimize(nll, start, method="L-BFGS-B", bounds=list(zip(lower, upper)))
    return StaticFit(np.asarray(res.x), -float(res.fun), bool(res.success))


def simulate_static(spec: ModelSpec, theta: np.ndarray, data: TimeSeries, S: int, rng) -> np.ndarray:
    """``S`` re-simulations of the observable under constant ``theta`` with the data's design."""
    n = len(data)
    path = np.broadcast_to(np.asarray(theta, float), (S, n, len(theta)))
    return _simulate_obs(spec, np.array(path), data.condition, rng)


# --------------------------------------------------------------------------
# reports


REPORT_HEADER = ("metric", "parameter", "time", "value", "lo", "hi")


def write_report_csv(path: str | Path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow(r)
    return path


def write_summary_json(path: str | Path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable), encoding="utf-8")
    return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")
