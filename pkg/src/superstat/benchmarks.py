"""Benchmark pipelines shared by the command line and the acceptance suite.

Every function returns a plain dict with the raw numbers, a ``checks`` mapping
of named boolean properties and CSV-ready ``rows``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import presets
from .generative import ModelSpec, TimeSeries, simulate_batch
from .neural.amortizer import Amortizer
from .neural.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .neural.training import TrainingConfig, train
from .oracle.grid import grid_filter, make_grid, poisson_loglik
from .oracle.particle import particle_filter
from .stochastic import Beta, Exponential

log = logging.getLogger(__name__)

COAL_FIRST_YEAR = 1852


# --------------------------------------------------------------------------
# trained networks


@dataclass(frozen=True)
class Recipe:
    """A model plus the training run that produces its network."""

    spec_factory: str
    training: TrainingConfig
    seed: int

    def spec(self) -> ModelSpec:
        return presets.preset(self.spec_factory)

    def key(self) -> str:
        blob = json.dumps(
            {"spec": self.spec().to_dict(), "training": self.training.to_dict(), "seed": self.seed,
             "format": FORMAT_VERSION},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


RECIPES = {
    "coal-mining": Recipe(
        "coal-mining",
        TrainingConfig(epochs=10, iterations_per_epoch=8000, batch_size=8, series_length=111,
                       initial_lr=1e-3, hidden=64, head_hidden=64),
        seed=1,
    ),
    "random-walk-ddm": Recipe(
        "random-walk-ddm",
        TrainingConfig(epochs=10, iterations_per_epoch=3000, batch_size=8, series_length=400,
                       initial_lr=1e-3, hidden=64, head_hidden=64),
        seed=2,
    ),
    "gp-ddm": Recipe(
        "gp-ddm",
        TrainingConfig(epochs=10, iterations_per_epoch=1200, batch_size=8, series_length=400,
                       initial_lr=1e-3, hidden=64, head_hidden=64),
        seed=3,
    ),
}


def cache_dir() -> Path:
    return Path(os.environ.get("SUPERSTAT_CACHE", Path.home() / ".cache" / "superstat"))


def trained_network(name: str, directory: str | Path | None = None, recipe: Recipe | None = None) -> Amortizer:
    """Load the network for ``name`` from the cache, training it on a miss.

    Cache files are keyed by a hash of the model, the training configuration
    and the seed, so changing any of them triggers retraining.
    """
    recipe = recipe or RECIPES[name]
    directory = Path(directory) if directory is not None else cache_dir()
    path = directory / f"{name}-{recipe.key()}.bin"
    spec = recipe.spec()
    if path.exists():
        return load_checkpoint(path, expect_spec=spec)
    log.info("training %s network (%d steps), cache miss at %s", name, recipe.training.total_steps, path)
    res = train(spec, recipe.training, np.random.default_rng(recipe.seed))
    log.info("trained %s in %.0f s, final validation loss %.3f", name, res.seconds, res.validation[-1][1])
    save_checkpoint(res.amortizer, path)
    stats = {"seconds": res.seconds, "validation": [list(v) for v in res.validation], "steps": len(res.losses)}
    path.with_suffix(".json").write_text(json.dumps(stats, indent=1), encoding="utf-8")
    return res.amortizer


def training_stats(name: str, directory: str | Path | None = None, recipe: Recipe | None = None) -> dict | None:
    """Wall time and validation curve recorded when the cached network was trained."""
    recipe = recipe or RECIPES[name]
    directory = Path(directory) if directory is not None else cache_dir()
    path = directory / f"{name}-{recipe.key()}.json"
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else None


# --------------------------------------------------------------------------
# coal mining


def coal_mining_data() -> TimeSeries:
    """Annual counts of coal-mining disasters in Britain, 1852-1962 (t=1 is 1852)."""
    text = resources.files("superstat").joinpath("data/coal_mining.csv").read_text(encoding="utf-8")
    arr = np.loadtxt(text.splitlines(), delimiter=",", skiprows=1, dtype=np.int64)
    return TimeSeries(t=arr[:, 0], counts=arr[:, 1])


def coal_grid(data: TimeSeries, n_theta: int = 4000, n_eta: int = 201):
    grid = make_grid((0.0, 15.0), n_theta, (0.0, 1.0), n_eta, Exponential(0.5), Beta(1.0, 25.0))
    return grid_filter(grid, np.asarray(data.counts), poisson_loglik)


def coal_benchmark(amortizer: Amortizer | None, data: TimeSeries | None = None, S: int = 4000,
                   rng: np.random.Generator | None = None, run_grid: bool = True) -> dict:
    data = coal_mining_data() if data is None else data
    rng = rng or np.random.default_rng(0)
    years = COAL_FIRST_YEAR + np.arange(len(data))
    i1880, i1900 = int(np.nonzero(years == 1880)[0][0]), int(np.nonzero(years == 1900)[0][0])
    out: dict = {"years": years, "checks": {}, "rows": []}
    if run_grid:
        t0 = time.perf_counter()
        g = coal_grid(data)
        out["grid_seconds"] = time.perf_counter() - t0
        out["grid_mean"], out["grid_sd"] = g.theta_mean, g.theta_sd
        out["checks"]["grid_declines_1880_1900"] = bool(g.theta_mean[i1900] < g.theta_mean[i1880])
        out["checks"]["grid_under_2_minutes"] = out["grid_seconds"] < 120.0
        out["rows"] += [("posterior_mean", "lambda_grid", int(y), float(m), float(m - s), float(m + s))
                        for y, m, s in zip(years, g.theta_mean, g.theta_sd)]
    if amortizer is not None:
        t0 = time.perf_counter()
        post = amortizer.infer(data, S, rng)
        out["neural_seconds"] = time.perf_counter() - t0
        m, s = post.mean()[:, 0], post.sd()[:, 0]
        out["neural_mean"], out["neural_sd"] = m, s
        out["checks"]["neural_declines_1880_1900"] = bool(m[i1900] < m[i1880])
        out["checks"]["neural_under_1_second"] = out["neural_seconds"] < 1.0
        out["rows"] += [("posterior_mean", "lambda_neural", int(y), float(a), float(a - b), float(a + b))
                        for y, a, b in zip(years, m, s)]
    if run_grid and amortizer is not None:
        out["mean_abs_diff"] = float(np.mean(np.abs(out["grid_mean"] - out["neural_mean"])))
        out["checks"]["mean_abs_diff_below_0.15"] = out["mean_abs_diff"] < 0.15
    return out


# --------------------------------------------------------------------------
# static DDM


def static_ddm_benchmark(amortizer: Amortizer | None, n: int = 100, T: int = 100, S: int = 4000,
                         rng: np.random.Generator | None = None, run_particle: bool = True) -> dict:
    """Static-DDM data fitted by the random-walk DDM with both engines.

    Checks per engine and low-level parameter: MAE(T) < MAE(25) < MAE(5)
    and median posterior sd at ``T`` below that at ``t=5``.
    """
    rng = rng or np.random.default_rng(0)
    data_spec = presets.static_ddm()
    fit_spec = presets.random_walk_ddm()
    batch = simulate_batch(data_spec, n, T, rng)
    truth = batch.theta
    engines = {}
    if run_particle:
        means, sds = np.empty(truth.shape), np.empty(truth.shape)
        t0 = time.perf_counter()
        for i in range(n):
            d = particle_filter(fit_spec, batch.series(i), S, rng)
            means[i], sds[i] = d.theta.mean(axis=1), d.theta.std(axis=1, ddof=1)
        engines["particle"] = (means, sds, time.perf_counter() - t0)
    if amortizer is not None:
        means, sds = np.empty(truth.shape), np.empty(truth.shape)
        t0 = time.perf_counter()
        for i, post in enumerate(amortizer.posterior_batch(amortizer.encode_batch(batch))):
            d = post.sample(1000, rng)
            means[i], sds[i] = d.theta.mean(axis=1), d.theta.std(axis=1, ddof=1)
        engines["neural"] = (means, sds, time.perf_counter() - t0)
    out: dict = {"checks": {}, "rows": [], "engines": {}}
    names = fit_spec.theta_names
    for eng, (means, sds, secs) in engines.items():
        rep = dg.recovery_metrics(truth, means, sds, names, checkpoints=(5, 25, T))
        out["engines"][eng] = {"mae": rep.mae, "post_sd": rep.post_sd, "seconds": secs}
        for j, p in enumerate(names):
            mae = rep.mae[:, j]
            out["checks"][f"{eng}_{p}_mae_decreasing"] = bool(mae[T - 1] < mae[24] < mae[4])
            out["checks"][f"{eng}_{p}_sd_contracts"] = bool(rep.post_sd[T - 1, j] < rep.post_sd[4, j])
        out["rows"] += [(f"{eng}_{m}", p, t, v, lo, hi) for m, p, t, v, lo, hi in rep.rows()]
    return out


# --------------------------------------------------------------------------
# four-scenario recovery


def regime_peaks(mae: np.ndarray, jumps, before: int = 10, after: int = 5, decay_lag: int = 50) -> list[dict]:
    """Jump response of a 1-D MAE curve (index ``t-1`` holds time ``t``)."""
    res = []
    for j in jumps:
        pre = float(mae[j - 2])
        window = mae[j - 1 : j - 1 + after + 1]
        peak = float(window.max())
        local = float(mae[max(0, j - 1 - before) : j - 1 + after + 1].max())
        later = float(mae[min(len(mae) - 1, j - 1 + decay_lag)])
        res.append({"jump": j, "pre": pre, "peak": peak, "later": later,
                    "local_max": peak >= local, "ratio": peak / pre if pre > 0 else np.inf,
                    "decays": later < peak})
    return res


def recovery_benchmark(amortizer: Amortizer, n: int = 50, T: int = 400,
                       rng: np.random.Generator | None = None) -> dict:
    rng = rng or np.random.default_rng(0)
    scenarios = presets.recovery_scenarios()
    ck = tuple(t for t in (5, 25, 50, 99, 199, 299, 399) if t <= T)
    reports = dg.recovery_study(scenarios, amortizer, n, T, rng, checkpoints=ck)
    out: dict = {"reports": reports, "checks": {}, "rows": []}
    names = scenarios["static"].theta_names
    st = reports["static"]
    for j, p in enumerate(names):
        m = st.mae[:, j]
        out["checks"][f"static_{p}_converges"] = bool(m[T - 1] < m[24] < m[4])
    jumps = tuple(j for j in scenarios["regime_switch"].options["jump_times"] if j + 50 <= T)
    out["regime_peaks"] = {}
    for j, p in enumerate(names):
        peaks = regime_peaks(reports["regime_switch"].mae[:, j], jumps)
        out["regime_peaks"][p] = peaks
        for pk in peaks:
            out["checks"][f"regime_{p}_t{pk['jump']}_peak"] = bool(pk["local_max"] and pk["ratio"] >= 2.0 and pk["decays"])
    corr = reports["random_walk"].correlation()
    i5, i99 = ck.index(5), ck.index(99)
    out["correlation"] = corr
    for j, p in enumerate(names):
        out["checks"][f"random_walk_{p}_corr_t99_ge_t5"] = bool(corr[i99, j] >= corr[i5, j])
    for name, rep in reports.items():
        out["rows"] += [(f"{name}_{m}", p, t, v, lo, hi) for m, p, t, v, lo, hi in rep.rows()]
    return out


# --------------------------------------------------------------------------
# SBC


def sbc_benchmark(amortizer: Amortizer, n_sims: int = 500, n_draws: int = 100, checkpoints=(100, 250, 400),
                  rng: np.random.Generator | None = None) -> dict:
    rng = rng or np.random.default_rng(0)
    spec = amortizer.spec
    net = dg.run_sbc(spec, amortizer, n_sims, n_draws, checkpoints, rng)
    prior = dg.run_sbc(spec, dg.prior_sampler(spec), n_sims, n_draws, checkpoints, rng)
    biased = dg.run_sbc(spec, dg.prior_sampler(spec, shift_sd=1.0), n_sims, n_draws, checkpoints, rng)
    P = len(net.names)
    out: dict = {"network": net, "prior": prior, "biased": biased, "checks": {}, "rows": []}
    for i, t in enumerate(net.checkpoints):
        out["checks"][f"network_t{t}_at_least_{P - 1}_of_{P}_inside"] = int(net.inside[i].sum()) >= P - 1
        out["checks"][f"prior_control_t{t}_all_inside"] = bool(prior.inside[i].all())
    out["checks"]["biased_control_fails"] = not bool(biased.inside.all())
    out["checks"]["prior_control_chi2_uniform"] = bool(np.all(prior.chi2_pvalues() > 1e-3))
    for tag, res in (("network", net), ("prior", prior), ("biased", biased)):
        out["rows"] += [(f"{tag}_{m}", p, t, v, lo, hi) for m, p, t, v, lo, hi in res.rows()]
    return out


# --------------------------------------------------------------------------
# speed


def speed_benchmark(amortizer: Amortizer, T: int = 100, S: int = 4000, rng: np.random.Generator | None = None,
                    repeats: int = 5) -> dict:
    """Neural forward pass (full per-t posterior) and ``S`` draws vs the particle filter.

    The particle reference uses the random-walk DDM on a series simulated
    from the amortizer's own model.
    """
    rng = rng or np.random.default_rng(0)
    spec = amortizer.spec
    data = simulate_batch(spec, 1, T, rng).series(0)
    amortizer.posterior(data)  # warm-up
    fwd = min(_timed(lambda: amortizer.posterior(data)) for _ in range(repeats))
    draws = min(_timed(lambda: amortizer.infer(data, S, rng)) for _ in range(repeats))
    pf_spec = presets.random_walk_ddm(spec.observation.num_drifts) if spec.transition == "gp" else spec
    pf = min(_timed(lambda: particle_filter(pf_spec, data, S, rng)) for _ in range(2))
    out = {"forward_seconds": fwd, "draws_seconds": draws, "particle_seconds": pf,
           "speedup_forward": pf / fwd, "speedup_with_draws": pf / draws}
    out["checks"] = {"neural_100x_faster": out["speedup_forward"] >= 100.0}
    out["rows"] = [("seconds", k, T, v, "", "") for k, v in out.items() if k.endswith("seconds")]
    return out


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# --------------------------------------------------------------------------
# GP-DDM forecasting and MMD


def forecast_benchmark(amortizer: Amortizer, n_series: int = 8, T: int = 400, split: float = 0.78,
                       S: int = 2000, rng: np.random.Generator | None = None, period: int = 5,
                       mmd_points: int = 2000) -> dict:
    """Re-simulation and multi-horizon forecasts on synthetic GP-DDM participants.

    Coverage is pooled over all held-out smoothed RTs of ``n_series``
    participants.  MMD compares each participant's empirical RT distribution
    with RTs re-simulated from the filtering posterior over all ``T`` trials
    and with RTs from a static maximum-likelihood DDM fit; the values are
    averaged over participants.
    """
    rng = rng or np.random.default_rng(0)
    spec = amortizer.spec
    t_split = int(round(split * T))
    batch = simulate_batch(spec, n_series, T, rng)
    posts = amortizer.posterior_batch(amortizer.encode_batch(batch))
    inside, total = 0, 0
    mmd_dyn, mmd_static = [], []
    rows = []
    for i, post in enumerate(posts):
        data = batch.series(i)
        draws = post.sample(1000, rng)
        bundle = dg.resimulate_and_forecast(spec, draws, data, t_split, S, rng, period)
        _, lo, hi = bundle.summary(0.95, smooth=True)
        y = bundle.observed_view(smooth=True)
        s = slice(t_split, T)
        inside += int(np.sum((y[s] >= lo[s]) & (y[s] <= hi[s])))
        total += T - t_split
        if i == 0:
            rows += list(bundle.rows())
        n_paths = max(1, mmd_points // T)
        dyn = dg.resimulate_and_forecast(spec, draws, data, T, n_paths, rng, period).fit_paths.ravel()
        fit = dg.fit_static_ddm(data, spec.observation.num_drifts)
        static = dg.simulate_static(spec, fit.theta, data, n_paths, rng).ravel()
        mmd_dyn.append(dg.mmd(data.rt, dyn))
        mmd_static.append(dg.mmd(data.rt, static))
    cov = inside / total
    out = {"coverage": cov, "mmd_dynamic": float(np.mean(mmd_dyn)), "mmd_static": float(np.mean(mmd_static)),
           "mmd_dynamic_each": mmd_dyn, "mmd_static_each": mmd_static, "t_split": t_split}
    rows += [("mmd", "dynamic", T, out["mmd_dynamic"], float(np.min(mmd_dyn)), float(np.max(mmd_dyn))),
             ("mmd", "static", T, out["mmd_static"], float(np.min(mmd_static)), float(np.max(mmd_static))),
             ("coverage", "forecast_sma", T, cov, "", "")]
    out["rows"] = rows
    out["checks"] = {"forecast_coverage_at_least_95pct": cov >= 0.95,
                     "mmd_dynamic_below_static": out["mmd_dynamic"] < out["mmd_static"]}
    return out
