"""Ready-made model specifications for the benchmark and simulation studies.

All Gamma priors are (shape, scale).
"""

from __future__ import annotations

from .generative import DDM, ModelSpec, PoissonCounts
from .stochastic import Beta, Exponential, Gamma, PriorSpec, TruncatedNormal, Uniform

DDM_LOWER = (0.0, 0.0, 0.0)
DDM_UPPER = (6.0, 4.0, 2.0)
REGIME_JUMPS = (100, 200, 300)


def _ddm_theta_priors(num_drifts: int = 1, drift=Gamma(5.0, 1 / 1.3)):
    return (drift,) * num_drifts + (Gamma(4.0, 1 / 3), Gamma(1.5, 1 / 5))


def coal_mining() -> ModelSpec:
    prior = PriorSpec(
        theta=(Exponential(0.5),),
        eta=(Beta(1.0, 25.0),),
        lower=(0.0,),
        upper=(15.0,),
        theta_names=("lambda",),
        eta_names=("sigma",),
    )
    return ModelSpec(PoissonCounts(), "random_walk", prior, name="coal-mining")


def random_walk_ddm(num_drifts: int = 1) -> ModelSpec:
    """Non-stationary DDM: every parameter follows a clipped Gaussian random walk."""
    obs = DDM(num_drifts=num_drifts)
    names = obs.param_names()
    prior = PriorSpec(
        theta=_ddm_theta_priors(num_drifts),
        eta=(Beta(1.0, 25.0),) * len(names),
        lower=(0.0,) * num_drifts + DDM_LOWER[1:],
        upper=(6.0,) * num_drifts + DDM_UPPER[1:],
        theta_names=names,
        eta_names=tuple(f"s_{n}" for n in names),
    )
    return ModelSpec(obs, "random_walk", prior, name="random-walk-ddm")


def static_ddm() -> ModelSpec:
    """Constant parameters: the random-walk DDM with all step sds pinned to 0."""
    base = random_walk_ddm()
    return ModelSpec(base.observation, "random_walk", base.prior, fixed_eta=(0.0, 0.0, 0.0), name="static-ddm")


def stationary_ddm() -> ModelSpec:
    """Memoryless trial-to-trial variability around a constant center."""
    base = random_walk_ddm()
    spread = TruncatedNormal(0.0, 0.1, 0.0, float("inf"))
    prior = PriorSpec(
        theta=base.prior.theta,
        eta=(spread,) * 3,
        lower=DDM_LOWER,
        upper=DDM_UPPER,
        theta_names=base.prior.theta_names,
        eta_names=("v_s", "a_s", "tau_s"),
    )
    return ModelSpec(
        base.observation, "stationary", prior, options={"uniform_mask": [False, False, True]}, name="stationary-ddm"
    )


def regime_switch_ddm(jump_times=REGIME_JUMPS) -> ModelSpec:
    base = random_walk_ddm()
    prior = PriorSpec(
        theta=base.prior.theta,
        eta=(),
        lower=DDM_LOWER,
        upper=DDM_UPPER,
        theta_names=base.prior.theta_names,
    )
    return ModelSpec(
        base.observation,
        "regime_switch",
        prior,
        options={"jump_times": list(jump_times)},
        name="regime-switch-ddm",
    )


def gp_ddm(num_drifts: int = 4) -> ModelSpec:
    """DDM whose parameters follow independent GPs around their prior-drawn means."""
    obs = DDM(num_drifts=num_drifts)
    names = obs.param_names()
    prior = PriorSpec(
        theta=_ddm_theta_priors(num_drifts, Gamma(2.5, 1 / 1.5)),
        eta=(Uniform(0.1, 10.0),) * len(names),
        lower=(0.0,) * num_drifts + DDM_LOWER[1:],
        upper=(6.0,) * num_drifts + DDM_UPPER[1:],
        theta_names=names,
        eta_names=tuple(f"l_{n}" for n in names),
    )
    amplitude = [0.15] * num_drifts + [0.1, 0.05]
    return ModelSpec(obs, "gp", prior, options={"amplitude": amplitude}, name="gp-ddm")


def recovery_scenarios() -> dict[str, ModelSpec]:
    return {
        "static": static_ddm(),
        "stationary": stationary_ddm(),
        "random_walk": random_walk_ddm(),
        "regime_switch": regime_switch_ddm(),
    }


PRESETS = {
    "coal-mining": coal_mining,
    "static-ddm": static_ddm,
    "random-walk-ddm": random_walk_ddm,
    "stationary-ddm": stationary_ddm,
    "regime-switch-ddm": regime_switch_ddm,
    "gp-ddm": gp_ddm,
}


def preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
