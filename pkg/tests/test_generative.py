import numpy as np
import pytest
from scipy import stats

from superstat import presets
from superstat.generative import (
    DDM,
    VAR,
    GaussianProcess,
    ModelSpec,
    NumericalError,
    ParameterDomainError,
    PreconditionError,
    RandomWalk,
    RegimeSwitch,
    StationaryVariability,
    condition_sequence,
    gp_forecast,
    gp_sample_batch,
    gp_sample_trajectory,
    simulate_batch,
    simulate_dataset,
    simulate_ddm_trial,
    simulate_ddm_trials,
    simulate_parameter_batch,
    simulate_poisson,
    transition_step,
)
from superstat.stochastic import Gamma, PriorSpec

LO, HI = np.array([0.0, 0.0, 0.0]), np.array([6.0, 4.0, 2.0])


# -- transitions


def test_random_walk_zero_noise_identity(rng):
    prev = np.array([2.0, 1.5, 0.3])
    out = transition_step(RandomWalk(np.zeros(3)), [prev], rng)
    assert np.array_equal(out, prev)


def test_random_walk_step_sd(rng):
    prev = np.full((100_000, 3), 3.0)
    out = transition_step(RandomWalk(np.full(3, 0.1)), [prev], rng)
    sd = (out - prev).std(axis=0)
    assert np.allclose(sd, 0.1, atol=4 * 0.1 / np.sqrt(2 * 100_000))


def test_random_walk_increments_are_standard_normal(rng):
    sd = np.array([0.05, 0.2, 0.7])
    prev = rng.uniform(1, 2, (100_000 // 3 + 1, 3))
    z = ((RandomWalk(sd).step([prev], 1, rng) - prev) / sd).ravel()[:100_000]
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_regime_switch(rng):
    model = RegimeSwitch((100, 200, 300), LO, HI)
    th98 = np.array([2.0, 1.0, 0.3])
    th99 = transition_step(model, [th98], rng, t=99)
    assert np.array_equal(th99, th98)
    jumps = np.stack([model.step([np.tile(th98, (50_000, 1))], 100, rng)])[0]
    assert np.all(jumps >= LO) and np.all(jumps <= HI)
    assert np.allclose(jumps.mean(axis=0), (LO + HI) / 2, atol=0.03 * HI)


def test_regime_switch_validation():
    with pytest.raises(ParameterDomainError):
        RegimeSwitch((200, 100), LO, HI)


def test_stationary_is_serially_independent(rng):
    model = StationaryVariability(np.array([2.0, 1.5, 0.5]), np.array([0.1, 0.1, 0.1]), np.array([False, False, True]))
    path = np.array([model.step([None], t, rng) for t in range(10_000)])
    for j in range(3):
        x = path[:, j] - path[:, j].mean()
        r1 = np.sum(x[1:] * x[:-1]) / np.sum(x * x)
        assert abs(r1) < 4 / np.sqrt(10_000)


def test_var_needs_history(rng):
    model = VAR(np.zeros(2), np.stack([0.5 * np.eye(2), 0.1 * np.eye(2)]), 0.1)
    with pytest.raises(PreconditionError):
        transition_step(model, [np.zeros(2)], rng)
    out = transition_step(model, [np.ones(2), np.ones(2)], rng)
    assert out.shape == (2,)


def test_unstable_var_rejected():
    prior = PriorSpec((Gamma(2, 1),) * 3, (), tuple(LO), tuple(HI))
    with pytest.raises(ParameterDomainError):
        ModelSpec(DDM(), "var", prior, options={"A": [[[1.1, 0, 0], [0, 0.5, 0], [0, 0, 0.5]]], "sigma": 0.1})


# -- GP


def test_gp_kernel_variance():
    gp = GaussianProcess(np.zeros(1), np.array([0.15]), np.array([3.0]))
    t = np.arange(1, 6)
    assert np.allclose(np.diag(gp.kernel(0, t, t)), 0.0225)


def test_gp_long_length_scale_is_flat(rng):
    gp = GaussianProcess(np.array([1.0]), np.array([0.15]), np.array([1e6]))
    path = gp_sample_trajectory(gp, 200, rng)
    assert np.max(np.abs(path - path[0])) < 1e-3


@pytest.mark.parametrize("sampler", ["cholesky", "batch"])
def test_gp_lag_covariance(rng, sampler):
    amp, ls = 0.15, 2.0
    n, T = 2000, 30
    if sampler == "cholesky":
        gp = GaussianProcess(np.zeros(1), np.array([amp]), np.array([ls]))
        paths = np.stack([gp_sample_trajectory(gp, T, rng)[:, 0] for _ in range(n)])
    else:
        gp = GaussianProcess(np.zeros((n, 1)), np.full((n, 1), amp), np.full((n, 1), ls))
        paths = gp_sample_batch(gp, T, rng)[..., 0]
    for lag in range(6):
        prod = paths[:, 10] * paths[:, 10 + lag]
        target = amp**2 * np.exp(-(lag**2) / (2 * ls**2))
        assert abs(prod.mean() - target) < 3 * prod.std() / np.sqrt(n) + 1e-4
    corr = np.corrcoef(paths[:, 5], paths[:, 6])[0, 1]
    assert abs(corr - np.exp(-1 / 8)) < 0.03


def test_gp_non_pd_raises(rng):
    gp = GaussianProcess(np.zeros(1), np.array([1.0]), np.array([50.0]), jitter=0.0)
    with pytest.raises(NumericalError):
        gp_sample_trajectory(gp, 400, rng)


def test_gp_forecast_starts_at_pinned_value(rng):
    gp = GaussianProcess(np.zeros(2), np.array([0.15, 0.1]), np.array([5.0, 5.0]))
    start = np.array([[1.0, 2.0]] * 500)
    fc = gp_forecast(gp, start, 20, rng)
    assert fc.shape == (500, 20, 2)
    # one step ahead stays close, far horizon spreads towards the kernel amplitude
    assert fc[:, 0].std(axis=0).max() < fc[:, -1].std(axis=0).min() * 0.5 + 0.1


# -- observations


def test_poisson_examples(rng):
    assert simulate_poisson(0.0, rng) == 0
    x = simulate_poisson(np.full(1_000_000, 4.0), rng)
    assert abs(x.mean() - 4) < 0.008
    big = simulate_poisson(np.full(1000, 15.0), rng)
    assert np.all(np.isfinite(big)) and big.max() < 100
    with pytest.raises(PreconditionError):
        simulate_poisson(-1.0, rng)


def test_ddm_drift_dominated(rng):
    obs = DDM()
    rt, ch, _ = simulate_ddm_trials(np.full(2000, 50.0), np.full(2000, 2.0), np.full(2000, 0.3), obs, rng)
    assert ch.mean() > 0.999
    assert abs(np.median(rt) - (0.3 + 2.0 / (2 * 50))) < 0.01


def test_ddm_symmetric_without_drift(rng):
    n = 100_000
    _, ch, _ = simulate_ddm_trials(np.zeros(n), np.full(n, 2.0), np.zeros(n), DDM(), rng)
    assert abs(ch.mean() - 0.5) < 0.005


def test_ddm_choice_probability_matches_closed_form(rng):
    n = 100_000
    _, ch, _ = simulate_ddm_trials(np.full(n, 2.0), np.full(n, 1.5), np.full(n, 0.3), DDM(), rng)
    p = 1 / (1 + np.exp(-2.0 * 1.5))
    assert abs(ch.mean() - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_ddm_rt_exceeds_tau(rng):
    tau = rng.uniform(0, 1, 5000)
    rt, _, _ = simulate_ddm_trials(rng.uniform(0, 4, 5000), rng.uniform(0.3, 3, 5000), tau, DDM(), rng)
    assert np.all(rt > tau)


def test_ddm_trial_errors(rng):
    with pytest.raises(PreconditionError):
        simulate_ddm_trial((1.0, 0.0, 0.3), DDM(), rng)
    rt, ch = simulate_ddm_trial((1.0, 1.0, 0.3), DDM(), rng)
    assert rt > 0.3 and ch in (0, 1)


def test_ddm_censoring(rng):
    obs = DDM(max_time=0.05, max_attempts=2)
    rt, _, cens = simulate_ddm_trials(np.zeros(200), np.full(200, 4.0), np.zeros(200), obs, rng)
    assert cens.any() and np.all(rt[cens] == pytest.approx(0.05))


def test_condition_sequence_is_block_balanced(rng):
    c = condition_sequence(400, 4, rng)
    for b in range(100):
        assert sorted(c[4 * b : 4 * b + 4]) == [0, 1, 2, 3]


# -- datasets


def test_static_scenario_is_constant(rng):
    traj, data = simulate_dataset(presets.static_ddm(), 50, rng)
    assert np.all(traj.theta == traj.theta[0]) and len(data) == 50


@pytest.mark.parametrize("name", sorted(presets.PRESETS))
def test_trajectories_respect_bounds(name, rng):
    spec = presets.preset(name)
    theta, eta = simulate_parameter_batch(spec, 20, 400, rng)
    assert np.all(theta >= spec.prior.lo) and np.all(theta <= spec.prior.hi)
    assert eta.shape == (20, spec.eta_dim)


def test_gp_ddm_long_series_within_bounds(rng):
    spec = presets.gp_ddm()
    traj, data = simulate_dataset(spec, 3200, rng)
    assert traj.theta.shape == (3200, 6)
    assert np.all(traj.theta >= spec.prior.lo) and np.all(traj.theta <= spec.prior.hi)
    assert set(np.unique(data.condition)) == {0, 1, 2, 3}


def test_same_seed_same_dataset():
    spec = presets.random_walk_ddm()
    a = simulate_dataset(spec, 30, np.random.default_rng(5))[1]
    b = simulate_dataset(spec, 30, np.random.default_rng(5))[1]
    assert a.equals(b)


def test_batch_matches_observation_kinds(rng):
    b = simulate_batch(presets.coal_mining(), 4, 20, rng)
    assert b.counts.shape == (4, 20) and b.series(0).kind == "poisson"
    b = simulate_batch(presets.gp_ddm(), 3, 40, rng)
    assert b.rt.shape == (3, 40) and b.series(2).kind == "ddm"
    assert len(b.subset([0, 2])) == 2


def test_spec_round_trip():
    for name in presets.PRESETS:
        spec = presets.preset(name)
        again = ModelSpec.from_dict(spec.to_dict())
        assert again.digest() == spec.digest()
