import json

import numpy as np
import pytest

from superstat import presets
from superstat.diagnostics import (
    PredictionBundle,
    ecdf_band,
    fit_static_ddm,
    fractional_ranks,
    mmd,
    mmd2_unbiased,
    mmd_permutation_test,
    prior_sampler,
    recovery_metrics,
    resimulate_and_forecast,
    run_sbc,
    sbc_from_ranks,
    sma,
    write_report_csv,
    write_summary_json,
)
from superstat.generative import PreconditionError, simulate_dataset
from superstat.posterior import PosteriorDraws

# -- sma


def test_sma_hand_computed():
    assert np.allclose(sma([1, 2, 3, 4, 5, 6], 5), [1, 1.5, 2, 2.5, 3, 4])


def test_sma_identity_and_constant(rng):
    x = rng.normal(size=50)
    assert np.allclose(sma(x, 1), x)
    assert np.allclose(sma(np.full(20, 3.7), 5), 3.7)


def test_sma_edge_cases():
    assert sma([], 5).size == 0
    with pytest.raises(PreconditionError):
        sma([1.0], 0)


def test_sma_applies_along_last_axis(rng):
    x = rng.normal(size=(3, 30))
    assert np.allclose(sma(x, 4)[1], sma(x[1], 4))


# -- MMD


def test_mmd_identical_samples_is_zero(rng):
    a = rng.normal(size=300)
    assert mmd(a, a) == 0.0
    assert mmd2_unbiased(a, a) <= 0.0


def test_mmd_symmetric(rng):
    a, b = rng.normal(size=200), rng.normal(0.5, 1, size=250)
    assert mmd(a, b) == pytest.approx(mmd(b, a), rel=1e-12)


def test_mmd_null_below_95_quantile():
    rng = np.random.default_rng(7)
    test = mmd_permutation_test(rng.normal(size=1000), rng.normal(size=1000), rng, n_perm=200)
    assert test.statistic < test.null_quantile(0.95)


def test_mmd_shift_exceeds_99_quantile():
    rng = np.random.default_rng(8)
    test = mmd_permutation_test(rng.normal(size=1000), rng.normal(1, 1, size=1000), rng, n_perm=200)
    assert test.statistic > test.null_quantile(0.99)
    assert test.p_value < 0.01


def test_mmd_requires_data():
    with pytest.raises(PreconditionError):
        mmd([], [1.0, 2.0])


# -- SBC


def test_fractional_ranks_in_unit_interval(rng):
    truth = rng.normal(size=(4, 100))
    draws = rng.normal(size=(4, 100, 50))
    r = fractional_ranks(truth, draws, rng)
    assert r.shape == (4, 100) and np.all((r > 0) & (r < 1))


def test_ecdf_band_symmetric_and_positive():
    z = np.arange(1, 100) / 100
    band = ecdf_band(500, z)
    assert band.shape == z.shape and np.all(band > 0)
    # widest in the middle where the binomial variance peaks
    assert band[49] > band[0]


def test_uniform_ranks_inside_band(rng):
    res = sbc_from_ranks(rng.uniform(size=(1, 3, 500)), ("a", "b", "c"), (10,))
    assert res.inside.all()


def test_sbc_prior_control_calibrated():
    spec = presets.random_walk_ddm()
    rng = np.random.default_rng(21)
    res = run_sbc(spec, prior_sampler(spec), 500, 100, (20, 50), rng)
    assert res.ranks.shape == (2, 6, 500)
    assert np.all((res.ranks >= 0) & (res.ranks <= 1))
    assert res.inside.sum(axis=1).min() == 6
    assert np.all(res.chi2_pvalues() > 1e-3)


def test_sbc_biased_control_detected():
    spec = presets.random_walk_ddm()
    rng = np.random.default_rng(22)
    res = run_sbc(spec, prior_sampler(spec, shift_sd=1.0), 500, 100, (20, 50), rng)
    assert res.inside.sum(axis=1).max() < 5


def test_sbc_rows_long_format(rng):
    res = sbc_from_ranks(rng.uniform(size=(1, 1, 100)), ("a",), (5,))
    rows = list(res.rows())
    assert all(len(r) == 6 for r in rows)


# -- recovery


def test_recovery_exact_estimates_give_zero_error(rng):
    truth = rng.normal(size=(10, 40, 3))
    rep = recovery_metrics(truth, truth.copy(), np.zeros_like(truth), ("a", "b", "c"), (5, 25))
    assert np.all(rep.mae == 0) and np.all(rep.mad == 0)
    assert np.allclose(rep.correlation(), 1.0)


def test_recovery_checkpoints_validated(rng):
    truth = rng.normal(size=(5, 10, 1))
    with pytest.raises(PreconditionError):
        recovery_metrics(truth, truth, truth, ("a",), (11,))


# -- prediction


def _draws(theta, eta, S):
    T, d = theta.shape
    return PosteriorDraws(
        np.broadcast_to(theta[:, None], (T, S, d)).copy(),
        np.broadcast_to(eta[None, None], (T, S, eta.size)).copy(),
        tuple(f"p{i}" for i in range(d)),
        tuple(f"e{i}" for i in range(eta.size)),
    )


def test_forecast_rejects_bad_split(rng):
    spec = presets.random_walk_ddm()
    data = simulate_dataset(spec, 20, rng)[1]
    d = _draws(np.tile([1.0, 2.0, 0.3], (20, 1)), np.zeros(3), 10)
    for bad in (0, 21):
        with pytest.raises(PreconditionError):
            resimulate_and_forecast(spec, d, data, bad, 10, rng)


def test_single_draw_zero_eta_gives_zero_width_parameter_band(rng):
    spec = presets.random_walk_ddm()
    traj, data = simulate_dataset(spec, 60, rng)
    d = _draws(traj.theta, np.zeros(3), 1)
    b = resimulate_and_forecast(spec, d, data, 40, 300, rng)
    assert np.ptp(b.fit_theta, axis=0).max() == 0
    assert np.ptp(b.forecast_theta, axis=0).max() == 0
    _, lo, hi = b.summary()
    assert np.all(hi - lo > 0)  # observation noise remains


def test_poisson_forecast_shapes_and_nesting(rng):
    spec = presets.coal_mining()
    traj, data = simulate_dataset(spec, 50, rng)
    d = _draws(traj.theta, traj.eta, 20)
    b = resimulate_and_forecast(spec, d, data, 30, 500, rng)
    assert b.fit_paths.shape == (500, 30) and b.forecast_paths.shape == (500, 20)
    for smooth in (False, True):
        m95, lo95, hi95 = b.summary(0.95, smooth)
        _, lo50, hi50 = b.summary(0.5, smooth)
        assert np.all(lo95 <= m95) and np.all(m95 <= hi95)
        assert np.all(lo95 <= lo50) and np.all(hi50 <= hi95)
    assert 0 <= b.forecast_coverage() <= 1


def test_gp_forecast_runs(rng):
    spec = presets.gp_ddm()
    traj, data = simulate_dataset(spec, 30, rng)
    d = _draws(traj.theta, traj.eta, 5)
    b = resimulate_and_forecast(spec, d, data, 20, 50, rng)
    th = b.forecast_theta
    assert np.all(th >= spec.prior.lo) and np.all(th <= spec.prior.hi)


def test_static_fit_recovers_parameters():
    spec = presets.stationary_ddm()
    rng = np.random.default_rng(3)
    from superstat.generative import ParameterTrajectory, simulate_observations

    theta = np.tile([1.5, 1.2, 0.4], (3000, 1))
    data = simulate_observations(spec, theta, rng)
    fit = fit_static_ddm(data, 1)
    assert fit.success
    assert np.allclose(fit.theta, [1.5, 1.2, 0.4], atol=0.08)


# -- reports


def test_report_writers(tmp_path):
    p = write_report_csv(tmp_path / "r.csv", [("mae", "v", 1, 0.5, "", "")])
    assert p.read_text().splitlines()[0] == "metric,parameter,time,value,lo,hi"
    j = write_summary_json(tmp_path / "s.json", {"checks": {"x": np.bool_(True)}, "v": np.float64(1.5)})
    assert json.loads(j.read_text()) == {"checks": {"x": True}, "v": 1.5}
