"""Command line: simulate, train, infer, sbc, recover, benchmark, forecast.

Exit codes: 0 when every enabled property passes, 1 on a property failure
(the report path is printed), 2 on usage or input errors.
"""

from __future__ import annotations

import os

# thread count must be fixed before numpy / numba load their runtimes
_THREADS = os.environ.get("SUPERSTAT_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import benchmarks as bm  # noqa: E402
from . import diagnostics as dg  # noqa: E402
from . import io  # noqa: E402
from . import presets  # noqa: E402
from .generative import PreconditionError, simulate_dataset  # noqa: E402
from .neural.checkpoint import CheckpointError, load_checkpoint, save_checkpoint  # noqa: E402
from .neural.training import TrainingDiverged, train  # noqa: E402
from .oracle.grid import grid_filter, make_grid, poisson_loglik  # noqa: E402
from .oracle.particle import particle_filter  # noqa: E402
from .posterior import PosteriorDraws  # noqa: E402

log = logging.getLogger("superstat")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _config(args) -> io.ExperimentConfig:
    if getattr(args, "config", None):
        cfg = io.load_config(args.config)
    else:
        model = presets.preset(args.preset) if getattr(args, "preset", None) else presets.random_walk_ddm()
        cfg = io.ExperimentConfig(model=model)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _artifacts(args, cfg: io.ExperimentConfig | None = None) -> io.RunArtifacts:
    run = io.RunArtifacts(args.out)
    run.open_log(None if cfg is None else cfg.seed)
    if cfg is not None:
        run.write_snapshot(cfg)
    return run


def _finish(run: io.RunArtifacts, name: str, result: dict) -> int:
    checks = {k: bool(v) for k, v in result.get("checks", {}).items()}
    csv_path = dg.write_report_csv(run.path(f"{name}.csv"), result.get("rows", []))
    summary = {k: v for k, v in result.items() if k not in ("rows", "checks") and _plain(v)}
    summary["checks"] = checks
    summary["passed"] = all(checks.values())
    json_path = dg.write_summary_json(run.path(f"{name}.json"), summary)
    for k, v in checks.items():
        print(f"{'PASS' if v else 'FAIL'}  {k}")
    run.close_log()
    if not summary["passed"]:
        print(f"property failure, see {json_path} and {csv_path}", file=sys.stderr)
        return EXIT_FAIL
    print(f"report: {json_path}")
    return EXIT_OK


def _plain(v) -> bool:
    return isinstance(v, (int, float, str, bool, list, dict, np.ndarray, np.floating, np.integer))


def _network(args, spec_name: str | None = None):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    if spec_name is None:
        raise UsageError("--checkpoint is required")
    return bm.trained_network(spec_name)


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    run = _artifacts(args, cfg)
    rng = np.random.default_rng(cfg.seed)
    T = args.length or cfg.series_length
    for i in range(args.count):
        traj, data = simulate_dataset(cfg.model, T, rng)
        suffix = "" if args.count == 1 else f"_{i + 1:03d}"
        io.save_dataset(data, run.path(f"data{suffix}.csv"))
        io.save_trajectory(traj, run.path(f"trajectory{suffix}.csv"))
    log.info("simulated %d series of length %d", args.count, T)
    run.close_log()
    print(f"wrote {args.count} dataset(s) to {run.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    run = _artifacts(args, cfg)
    rng = np.random.default_rng(cfg.seed)
    ck = run.path("network.bin")
    try:
        res = train(cfg.model, cfg.training, rng, checkpoint_path=ck, progress_every=args.progress)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        print(f"{exc}; last finite weights saved to {exc.checkpoint}", file=sys.stderr)
        run.close_log()
        return EXIT_FAIL
    save_checkpoint(res.amortizer, ck)
    dg.write_report_csv(run.path("losses.csv"), (("loss", "train", i + 1, float(v), "", "") for i, v in enumerate(res.losses)))
    log.info("training finished in %.1f s", res.seconds)
    result = {
        "seconds": res.seconds,
        "validation": [list(v) for v in res.validation],
        "rows": [("loss", "validation", int(s), float(v), "", "") for s, v in res.validation],
        "checks": {"finite_validation_loss": bool(np.isfinite(res.validation[-1][1])) if res.validation else True},
    }
    print(f"checkpoint: {ck}")
    return _finish(run, "training", result)


def cmd_infer(args) -> int:
    data = io.load_dataset(args.data)
    rng = np.random.default_rng(args.seed or 0)
    run = _artifacts(args)
    if args.engine == "neural":
        if not args.checkpoint:
            raise UsageError("--engine neural needs --checkpoint")
        amortizer = load_checkpoint(args.checkpoint)
        draws = amortizer.infer(data, args.draws, rng)
    else:
        spec = presets.preset(args.preset) if args.preset else (
            presets.coal_mining() if data.kind == "poisson" else presets.random_walk_ddm()
        )
        if args.engine == "particle":
            draws = particle_filter(spec, data, args.draws, rng)
        else:
            draws = _grid_draws(spec, data, args.draws, rng)
    path = io.save_posterior(draws, run.path("posterior.csv"))
    log.info("%s inference on %s: %d draws per t", args.engine, args.data, draws.S)
    run.close_log()
    print(f"posterior: {path}")
    return EXIT_OK


def _grid_draws(spec, data, S, rng) -> PosteriorDraws:
    if data.kind != "poisson" or spec.theta_dim != 1 or spec.eta_dim != 1:
        raise UsageError("the grid engine supports only the one-rate Poisson model")
    lo, hi = spec.prior.lo[0], spec.prior.hi[0]
    g = make_grid((lo, hi), 4000, (0.0, 1.0), 201, spec.prior.theta[0], spec.prior.eta[0])
    T = len(data)
    theta = np.empty((T, S, 1))
    eta = np.empty((T, S, 1))
    from .oracle.grid import RandomWalkBlur, grid_filter_step

    blur = RandomWalkBlur(g.axis_theta, g.axis_eta)
    for t, x in enumerate(data.counts):
        g = grid_filter_step(g, x, poisson_loglik, blur)
        m = g.mass.ravel()
        pick = rng.choice(m.size, size=S, p=m / m.sum())
        i, j = np.unravel_index(pick, g.mass.shape)
        theta[t, :, 0], eta[t, :, 0] = g.axis_theta[i], g.axis_eta[j]
    return PosteriorDraws(theta, eta, spec.theta_names, spec.eta_names, "grid")


def cmd_sbc(args) -> int:
    amortizer = _network(args, "random-walk-ddm")
    run = _artifacts(args)
    res = bm.sbc_benchmark(amortizer, args.sims, args.draws, tuple(args.checkpoints), np.random.default_rng(args.seed))
    return _finish(run, "sbc", res)


def cmd_recover(args) -> int:
    amortizer = _network(args, "random-walk-ddm")
    run = _artifacts(args)
    res = bm.recovery_benchmark(amortizer, args.datasets, args.length, np.random.default_rng(args.seed))
    res.pop("reports")
    return _finish(run, "recovery", res)


def cmd_forecast(args) -> int:
    amortizer = _network(args, "gp-ddm")
    run = _artifacts(args)
    rng = np.random.default_rng(args.seed)
    if args.data:
        data = io.load_dataset(args.data)
        T = len(data)
        t_split = int(round(args.split * T))
        draws = amortizer.infer(data, 1000, rng)
        bundle = dg.resimulate_and_forecast(amortizer.spec, draws, data, t_split, args.paths, rng)
        cov = bundle.forecast_coverage(0.95, smooth=True)
        res = {"coverage": cov, "t_split": t_split, "rows": list(bundle.rows()),
               "checks": {"forecast_coverage_at_least_95pct": cov >= 0.95}}
    else:
        res = bm.forecast_benchmark(amortizer, args.series, args.length, args.split, args.paths, rng)
        res.pop("mmd_dynamic_each"), res.pop("mmd_static_each")
    return _finish(run, "forecast", res)


def cmd_benchmark(args) -> int:
    run = _artifacts(args)
    rng = np.random.default_rng(args.seed)
    if args.which == "coal-mining":
        use_grid = args.grid or not args.neural
        use_neural = args.neural or not args.grid
        amortizer = _network(args, "coal-mining") if use_neural else None
        res = bm.coal_benchmark(amortizer, rng=rng, run_grid=use_grid)
        for k in ("grid_mean", "neural_mean"):
            if k in res:
                print(f"{k}: " + " ".join(f"{x:.2f}" for x in res[k]))
        if "mean_abs_diff" in res:
            print(f"mean |grid - neural| = {res['mean_abs_diff']:.4f}")
        return _finish(run, "coal_mining", res)
    if args.which == "static-ddm":
        amortizer = _network(args, "random-walk-ddm")
        res = bm.static_ddm_benchmark(amortizer, args.series, args.length, args.particles, rng)
        res["engines"] = {k: {"seconds": v["seconds"]} for k, v in res["engines"].items()}
        return _finish(run, "static_ddm", res)
    # lexical: synthetic GP-DDM clone of a long lexical-decision session
    amortizer = _network(args, "gp-ddm")
    res = bm.forecast_benchmark(amortizer, n_series=1, T=args.length or 3200, split=0.78, S=args.particles // 4, rng=rng)
    res.pop("mmd_dynamic_each"), res.pop("mmd_static_each")
    res["synthetic"] = True
    return _finish(run, "lexical_synthetic", res)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="superstat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        if out:
            sp.add_argument("--out", required=True, type=Path, help="output directory")

    sp = sub.add_parser("simulate", help="simulate datasets and their parameter trajectories")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--preset", choices=sorted(presets.PRESETS))
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--length", type=int, help="series length (default from config)")
    common(sp)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("train", help="train a network; writes network.bin")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--preset", choices=sorted(presets.PRESETS))
    sp.add_argument("--progress", type=int, default=0, help="log the running loss every N steps")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="filtering posterior draws for a dataset")
    sp.add_argument("--engine", choices=io.ENGINES, default="neural")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--draws", type=int, default=4000)
    sp.add_argument("--preset", choices=sorted(presets.PRESETS), help="model for the grid and particle engines")
    common(sp)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("sbc", help="simulation-based calibration")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--sims", type=int, default=500)
    sp.add_argument("--draws", type=int, default=100)
    sp.add_argument("--checkpoints", type=int, nargs="+", default=[100, 250, 400])
    common(sp)
    sp.set_defaults(fn=cmd_sbc)

    sp = sub.add_parser("recover", help="four-scenario parameter recovery")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--datasets", type=int, default=50)
    sp.add_argument("--length", type=int, default=400)
    common(sp)
    sp.set_defaults(fn=cmd_recover)

    sp = sub.add_parser("benchmark", help="reproduce a benchmark study")
    sp.add_argument("which", choices=("coal-mining", "static-ddm", "lexical"))
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--grid", action="store_true", help="coal-mining: run the grid filter")
    sp.add_argument("--neural", action="store_true", help="coal-mining: run the network")
    sp.add_argument("--series", type=int, default=100)
    sp.add_argument("--length", type=int, default=None)
    sp.add_argument("--particles", type=int, default=4000)
    common(sp)
    sp.set_defaults(fn=cmd_benchmark)

    sp = sub.add_parser("forecast", help="posterior re-simulation and multi-horizon forecast")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--data", type=Path, help="DDM dataset; synthetic GP-DDM participants when omitted")
    sp.add_argument("--split", type=float, default=0.78, help="fraction of trials used for fitting")
    sp.add_argument("--paths", type=int, default=2000)
    sp.add_argument("--series", type=int, default=8)
    sp.add_argument("--length", type=int, default=400)
    common(sp)
    sp.set_defaults(fn=cmd_forecast)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "benchmark" and args.which == "static-ddm" and args.length is None:
        args.length = 100
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, PreconditionError, CheckpointError, io.DataFormatError, FileNotFoundError, KeyError) as exc:
        print(f"superstat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
