import numpy as np
import pytest
from scipy import integrate, stats

from superstat import presets
from superstat.benchmarks import coal_grid, coal_mining_data
from superstat.generative import PreconditionError, TimeSeries, simulate_dataset
from superstat.oracle.grid import (
    DegenerateUpdateError,
    Grid2D,
    RandomWalkBlur,
    grid_filter,
    grid_filter_step,
    grid_marginals,
    make_grid,
    point_mass_grid,
    poisson_loglik,
)
from superstat.oracle.particle import effective_sample_size, particle_filter, systematic_resample
from superstat.oracle.wfpt import WfptParams, choice_probability, log_density, wfpt_density, wfpt_log_density
from superstat.stochastic import Beta, Exponential, Gamma, Uniform

# -- wfpt


def test_wfpt_outside_support():
    assert wfpt_log_density(1.0, 1.0, 0.3, 0.3, 1) == -np.inf
    assert wfpt_log_density(1.0, 1.0, 0.3, 0.1, 0) == -np.inf


@pytest.mark.parametrize("v,a,tau", [(2.0, 1.5, 0.3), (0.0, 1.0, 0.2), (-1.0, 2.0, 0.1), (4.0, 0.8, 0.5), (0.5, 3.0, 0.0)])
def test_wfpt_choice_mass_matches_closed_form(v, a, tau):
    for choice, p in ((1, choice_probability(v, a)), (0, 1 - choice_probability(v, a))):
        f = lambda t: float(wfpt_density(v, a, tau, t, choice))  # noqa: E731
        mass = integrate.quad(f, tau, tau + 1.0, limit=200)[0] + integrate.quad(f, tau + 1.0, np.inf, limit=200)[0]
        assert abs(mass - p) < 1e-6


def test_wfpt_large_and_small_time_series_agree():
    # across the switch between expansions the density stays smooth: second differences are O(h^2)
    h = 1e-3
    for v, a in ((1.0, 2.0), (0.0, 1.0), (3.0, 1.0)):
        for u in (0.5, 1.0, 2.0):
            t = 0.3 + a * a * u + np.array([-h, 0.0, h])
            d = wfpt_density(v, a, 0.3, t, 1)
            assert abs(d[0] - 2 * d[1] + d[2]) < 1e-4 * d[1]


def test_wfpt_symmetry():
    # flipping drift sign swaps the two boundaries
    assert wfpt_log_density(1.3, 1.7, 0.2, 0.9, 1) == pytest.approx(wfpt_log_density(-1.3, 1.7, 0.2, 0.9, 0), rel=1e-12)


def test_wfpt_params_validation():
    with pytest.raises(ValueError):
        WfptParams(1.0, 0.0, 0.3)
    with pytest.raises(ValueError):
        WfptParams(1.0, 1.0, -0.1)
    p = WfptParams(1.0, 1.0, 0.3)
    assert log_density(p, 0.8, 1) == pytest.approx(wfpt_log_density(1.0, 1.0, 0.3, 0.8, 1))


# -- grid


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid2D(np.array([0.0, 1.0]), np.array([0.0]), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        Grid2D(np.array([1.0, 0.0]), np.array([0.0]), np.zeros((2, 1)))


def test_grid_is_normalized():
    g = make_grid((0, 15), 500, (0, 1), 21, Exponential(0.5), Beta(1, 25))
    assert np.exp(g.log_mass).sum() == pytest.approx(1.0)


def test_uninformative_update_on_zero_sd_slice_is_identity():
    g = make_grid((0, 15), 400, (0, 1), 11, Exponential(0.5), Beta(1, 25))
    flat = lambda th, x: np.zeros_like(th)  # noqa: E731
    g1 = grid_filter_step(g, 0, flat, RandomWalkBlur(g.axis_theta, g.axis_eta))
    p0 = np.exp(g.log_mass)[:, 0] / np.exp(g.log_mass)[:, 0].sum()
    p1 = np.exp(g1.log_mass)[:, 0] / np.exp(g1.log_mass)[:, 0].sum()
    assert np.allclose(p0, p1, atol=1e-12)


def test_blur_preserves_mass_and_matches_direct_convolution():
    ax = np.linspace(0, 15, 300)
    eta = np.array([0.0, 0.05, 0.3, 1.0])
    blur = RandomWalkBlur(ax, eta)
    rng = np.random.default_rng(0)
    m = rng.random((300, 4))
    out = blur(m)
    assert np.allclose(out.sum(axis=0), m.sum(axis=0))
    assert np.allclose(out[:, 0], m[:, 0])
    # direct convolution away from the edges
    k = blur.kernels[:, 2]
    direct = np.convolve(m[:, 2], k, mode="same")
    assert np.allclose(out[50:250, 2], direct[50:250], atol=1e-10)


def test_single_poisson_observation_matches_quadrature():
    g = make_grid((0, 15), 4000, (0, 1), 5, Exponential(0.5), Beta(1, 25))
    th, _ = grid_marginals(grid_filter_step(g, 3, poisson_loglik, None))
    f = lambda lam: np.exp(-0.5 * lam) * stats.poisson.pmf(3, lam)  # noqa: E731
    Z = integrate.quad(f, 0, 15)[0]
    mean = integrate.quad(lambda lam: lam * f(lam), 0, 15)[0] / Z
    assert abs(th.mean - mean) < 1e-4


def test_conjugate_poisson_gamma_sequence():
    a, b = 2.0, 1.0  # Gamma(shape, scale)
    g = make_grid((0, 20), 4000, (0, 1), 1, Gamma(a, b), Uniform(0, 1))
    data = [3, 5, 2, 4, 6, 1]
    r = grid_filter(g, data, poisson_loglik, blur=False)
    shape = a + np.cumsum(data)
    rate = 1 / b + np.arange(1, len(data) + 1)
    assert np.allclose(r.theta_mean, shape / rate, atol=1e-4)
    assert np.allclose(r.theta_sd, np.sqrt(shape) / rate, atol=1e-4)


def test_point_mass_marginals():
    g = point_mass_grid(np.linspace(0, 15, 100), np.linspace(0, 1, 11), 40, 3)
    th, et = grid_marginals(g)
    assert th.mean == pytest.approx(g.axis_theta[40]) and th.sd == 0
    assert et.mean == pytest.approx(0.3) and et.sd == 0


def test_product_grid_marginals():
    th_ax, et_ax = np.linspace(0, 1, 50), np.linspace(0, 1, 40)
    p = np.outer(np.full(50, 1 / 50), np.full(40, 1 / 40))
    th, et = grid_marginals(Grid2D(th_ax, et_ax, np.log(p)))
    assert th.mean == pytest.approx(th_ax.mean()) and th.sd == pytest.approx(th_ax.std())
    assert et.mean == pytest.approx(et_ax.mean())


def test_degenerate_update():
    g = make_grid((0, 15), 50, (0, 1), 3, Exponential(0.5), Beta(1, 25))
    with pytest.raises(DegenerateUpdateError):
        grid_filter_step(g, 0, lambda th, x: np.full_like(th, -np.inf), None)


def test_coal_grid_declines_1880_to_1900():
    data = coal_mining_data()
    r = coal_grid(data, n_eta=101)
    years = 1852 + np.arange(len(data))
    assert r.theta_mean[years == 1900][0] < r.theta_mean[years == 1880][0]


# -- particle filter


def test_resampling_helpers(rng):
    w = np.array([0.0, 0.5, 0.5, 0.0])
    idx = systematic_resample(w, 1000, rng)
    assert set(np.unique(idx)) == {1, 2}
    assert abs(np.mean(idx == 1) - 0.5) <= 0.001 + 1 / 1000
    assert effective_sample_size(np.zeros(10)) == pytest.approx(10.0)
    assert effective_sample_size(np.array([0.0, -np.inf, -np.inf])) == pytest.approx(1.0)


def test_particle_filter_preconditions(rng):
    data = coal_mining_data()
    with pytest.raises(PreconditionError):
        particle_filter(presets.coal_mining(), data, 500, rng)
    with pytest.raises(PreconditionError):
        particle_filter(presets.gp_ddm(), simulate_dataset(presets.gp_ddm(), 5, rng)[1], 1000, rng)


def test_particle_filter_static_consistency(rng):
    traj, data = simulate_dataset(presets.static_ddm(), 100, rng)
    d = particle_filter(presets.static_ddm(), data, 2000, rng)
    m, s = d.mean()[-1, :3], d.sd()[-1, :3]
    assert np.all(np.abs(m - traj.theta[0]) < 3 * s)


def test_particle_filter_matches_grid_on_coal():
    data = coal_mining_data()
    r = coal_grid(data, n_eta=101)
    d = particle_filter(presets.coal_mining(), data, 100_000, np.random.default_rng(1))
    assert np.max(np.abs(d.mean()[:, 0] - r.theta_mean)) < 0.05
    # final-step sd agrees within 5% relative
    assert abs(d.sd()[-1, 0] - r.theta_sd[-1]) < 0.05 * r.theta_sd[-1]


def test_particle_filter_draws_in_bounds_and_deterministic():
    spec = presets.random_walk_ddm()
    _, data = simulate_dataset(spec, 30, np.random.default_rng(0))
    a = particle_filter(spec, data, 1000, np.random.default_rng(3))
    b = particle_filter(spec, data, 1000, np.random.default_rng(3))
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.eta, b.eta)
    assert np.all(a.theta >= spec.prior.lo) and np.all(a.theta <= spec.prior.hi)


def test_particle_mc_error_shrinks_with_sqrt_s():
    spec = presets.coal_mining()
    data = TimeSeries(t=np.arange(1, 21), counts=coal_mining_data().counts[:20])
    est = {S: [particle_filter(spec, data, S, np.random.default_rng(100 * S + r)).mean()[-1, 0] for r in range(20)]
           for S in (1000, 4000)}
    ratio = np.std(est[1000], ddof=1) / np.std(est[4000], ddof=1)
    assert 1.3 < ratio < 3.2  # sqrt(4) = 2 up to the sampling error of 20 replicates


def test_particle_filter_weight_collapse_warning():
    spec = presets.coal_mining()
    data = TimeSeries(t=np.arange(1, 4), counts=np.array([2, 80, 1]))
    d = particle_filter(spec, data, 1000, np.random.default_rng(0))
    assert any("ESS" in w for w in d.warnings)
