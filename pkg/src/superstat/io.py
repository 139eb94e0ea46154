"""Data files, experiment configuration and run artifacts.

CSV dialect everywhere: comma separator, "." decimal point, UTF-8, header row
required.  Times are 1-based trial indices; response times are in seconds.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import presets
from .generative import ModelSpec, ParameterTrajectory, PreconditionError, TimeSeries
from .neural.training import TrainingConfig
from .posterior import PosteriorDraws

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

POISSON_COLUMNS = ("t", "count")
DDM_COLUMNS = ("t", "rt_seconds", "choice", "condition")
OPTIONAL_COLUMNS = ("block", "session")
ENGINES = ("grid", "particle", "neural")


class DataFormatError(ValueError):
    """Malformed data file; the message cites the file, line and field."""


# --------------------------------------------------------------------------
# datasets


def _detect_schema(header: list[str]) -> str:
    if tuple(header[:2]) == POISSON_COLUMNS:
        return "poisson"
    if tuple(header[:4]) == DDM_COLUMNS:
        return "ddm"
    raise DataFormatError(
        f"header {header} matches no schema; expected {','.join(POISSON_COLUMNS)} "
        f"or {','.join(DDM_COLUMNS)}[,block][,session]"
    )


def load_dataset(path: str | Path, schema: str | None = None) -> TimeSeries:
    """Read and validate a dataset CSV.

    ``schema`` is ``"poisson"``, ``"ddm"`` or ``None`` (inferred from the
    header).  A header that does not match the requested schema is an error.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: file is empty (a header row is required)") from None
        found = _detect_schema(header)
        if schema is not None and schema != found:
            raise DataFormatError(f"{path}: expected the {schema} schema but the header is {header}")
        base = POISSON_COLUMNS if found == "poisson" else DDM_COLUMNS
        extra = header[len(base) :]
        if found == "poisson" and extra or any(c not in OPTIONAL_COLUMNS for c in extra) or len(set(extra)) < len(extra):
            raise DataFormatError(f"{path}: unexpected columns {extra}")
        columns = list(base) + extra
        values = {c: [] for c in columns}
        lines = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise DataFormatError(f"{path}, line {line}: expected {len(columns)} fields, found {len(row)}")
            for name, raw in zip(columns, row):
                values[name].append(_parse_field(path, line, name, raw.strip()))
            lines.append(line)
    if not lines:
        raise DataFormatError(f"{path}: no observations (empty series)")
    t = np.asarray(values["t"], np.int64)
    rows = np.asarray(lines, np.int64)
    if t[0] != 1 or np.any(np.diff(t) != 1):
        bad = 0 if t[0] != 1 else int(np.nonzero(np.diff(t) != 1)[0][0]) + 1
        raise DataFormatError(
            f"{path}, line {rows[bad]}: t must increase by 1 starting at 1 (found t={t[bad]})"
        )
    if found == "poisson":
        return TimeSeries(t=t, counts=np.asarray(values["count"], np.int64), rows=rows)
    opt = {c: np.asarray(values[c], np.int64) if c in values else None for c in OPTIONAL_COLUMNS}
    return TimeSeries(
        t=t,
        rt=np.asarray(values["rt_seconds"], float),
        choice=np.asarray(values["choice"], np.int64),
        condition=np.asarray(values["condition"], np.int64),
        rows=rows,
        **opt,
    )


def _parse_field(path, line, name, raw):
    def fail(why):
        raise DataFormatError(f"{path}, line {line}, field {name!r}: {why} (got {raw!r})")

    if name == "rt_seconds":
        try:
            x = float(raw)
        except ValueError:
            fail("not a number")
        if not np.isfinite(x) or x <= 0:
            fail("response time must be finite and > 0")
        return x
    try:
        x = int(raw)
    except ValueError:
        fail("not an integer")
    if name == "choice" and x not in (0, 1):
        fail("choice must be 0 or 1")
    if name in ("count", "condition", "block", "session") and x < 0:
        fail("must be >= 0")
    return x


def save_dataset(data: TimeSeries, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if data.kind == "poisson":
        columns = {"t": data.t, "count": data.counts}
    else:
        cond = np.zeros(len(data), np.int64) if data.condition is None else data.condition
        columns = {"t": data.t, "rt_seconds": data.rt, "choice": data.choice, "condition": cond}
        for name in OPTIONAL_COLUMNS:
            if getattr(data, name) is not None:
                columns[name] = getattr(data, name)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for i in range(len(data)):
            w.writerow([_fmt(columns[c][i]) for c in columns])
    return path


def _fmt(x) -> str:
    if isinstance(x, (np.integer, int)):
        return str(int(x))
    return repr(float(x))  # shortest round-trip representation


def save_trajectory(traj: ParameterTrajectory, path: str | Path) -> Path:
    """Wide CSV ``t,<theta names>``; ``eta`` goes into a sibling JSON file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t",) + tuple(traj.theta_names))
        for i, row in enumerate(traj.theta):
            w.writerow([i + 1] + [_fmt(x) for x in row])
    path.with_suffix(".eta.json").write_text(
        json.dumps(dict(zip(traj.eta_names, map(float, traj.eta))), indent=2), encoding="utf-8"
    )
    return path


def load_trajectory(path: str | Path) -> tuple[np.ndarray, tuple[str, ...]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in r] for r in reader if r]
    arr = np.asarray(rows, float)
    return arr[:, 1:], tuple(header[1:])


def save_posterior(draws: PosteriorDraws, path: str | Path) -> Path:
    """Long CSV ``t,parameter,draw_index,value`` (draw_index is 0-based)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joint = draws.joint()
    T, S, P = joint.shape
    t = np.repeat(np.arange(1, T + 1), P * S)
    p = np.tile(np.repeat(np.arange(P), S), T)
    s = np.tile(np.arange(S), T * P)
    vals = np.moveaxis(joint, 2, 1).reshape(-1)
    names = np.asarray(draws.names, dtype=object)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,parameter,draw_index,value\n")
        fh.writelines(f"{a},{names[b]},{c},{v!r}\n" for a, b, c, v in zip(t.tolist(), p.tolist(), s.tolist(), vals.tolist()))
    return path


def load_posterior(path: str | Path, theta_names, eta_names=(), engine: str = "") -> PosteriorDraws:
    names = tuple(theta_names) + tuple(eta_names)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["t", "parameter", "draw_index", "value"]:
            raise DataFormatError(f"{path}: not a posterior CSV (header {header})")
        rows = list(reader)
    t = np.asarray([int(r[0]) for r in rows])
    idx = {n: i for i, n in enumerate(names)}
    try:
        p = np.asarray([idx[r[1]] for r in rows])
    except KeyError as exc:
        raise DataFormatError(f"{path}: unknown parameter {exc.args[0]!r}") from None
    s = np.asarray([int(r[2]) for r in rows])
    v = np.asarray([float(r[3]) for r in rows])
    joint = np.empty((t.max(), s.max() + 1, len(names)))
    joint[t - 1, s, p] = v
    k = len(theta_names)
    return PosteriorDraws(joint[..., :k], joint[..., k:], tuple(theta_names), tuple(eta_names), engine)


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    model: ModelSpec
    training: TrainingConfig = field(default_factory=TrainingConfig)
    engine: str = "neural"
    draws: int = 4000
    checkpoints: tuple[int, ...] = (25, 50, 99)
    series_length: int = 100
    seed: int = 0
    data: Path | None = None
    checkpoint: Path | None = None
    diagnostics: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise PreconditionError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.engine == "grid" and not (
            self.model.observation.kind == "poisson" and self.model.theta_dim == 1 and self.model.eta_dim == 1
        ):
            raise PreconditionError("the grid engine supports only the Poisson model with one rate and one step sd")
        if self.engine == "particle" and self.model.transition == "gp":
            raise PreconditionError("the particle engine does not support the gp transition")
        for name in ("data", "checkpoint"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"config references missing {name} file: {p}")
        if self.draws < 1 or self.series_length < 1:
            raise PreconditionError("draws and series_length must be >= 1")

    def snapshot(self) -> dict:
        """Fully resolved configuration: replaying it with the same seed reproduces the run."""
        return {
            "seed": self.seed,
            "model": {"spec": self.model.to_dict()},
            "training": self.training.to_dict(),
            "inference": {"engine": self.engine, "draws": self.draws, "checkpoints": list(self.checkpoints)},
            "simulation": {"series_length": self.series_length},
            "data": None if self.data is None else str(self.data),
            "checkpoint": None if self.checkpoint is None else str(self.checkpoint),
            "diagnostics": self.diagnostics,
        }


def model_from_config(section: dict) -> ModelSpec:
    """``[model]`` holds either ``preset`` (plus ``num_drifts`` for DDM presets) or a full ``spec`` table."""
    if "spec" in section:
        return ModelSpec.from_dict(section["spec"])
    if "preset" not in section:
        raise PreconditionError("[model] needs either 'preset' or 'spec'")
    unknown = set(section) - {"preset", "num_drifts"}
    if unknown:
        raise PreconditionError(f"unknown [model] keys: {sorted(unknown)}")
    name = section["preset"]
    if "num_drifts" in section:
        if name not in ("random-walk-ddm", "gp-ddm"):
            raise PreconditionError(f"preset {name!r} does not take num_drifts")
        return presets.PRESETS[name](int(section["num_drifts"]))
    return presets.preset(name)


def config_from_dict(d: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    known = {"seed", "model", "training", "inference", "simulation", "data", "checkpoint", "diagnostics"}
    unknown = set(d) - known
    if unknown:
        raise PreconditionError(f"unknown config sections: {sorted(unknown)}")
    base = Path(base_dir)
    inf = dict(d.get("inference", {}))
    sim = dict(d.get("simulation", {}))
    bad = (set(inf) - {"engine", "draws", "checkpoints"}) | (set(sim) - {"series_length"})
    if bad:
        raise PreconditionError(f"unknown config keys: {sorted(bad)}")

    def resolve(p):
        return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

    return ExperimentConfig(
        model=model_from_config(d.get("model", {})),
        training=TrainingConfig.from_dict(d.get("training", {})),
        engine=inf.get("engine", "neural"),
        draws=int(inf.get("draws", 4000)),
        checkpoints=tuple(int(x) for x in inf.get("checkpoints", (25, 50, 99))),
        series_length=int(sim.get("series_length", 100)),
        seed=int(d.get("seed", 0)),
        data=resolve(d.get("data")),
        checkpoint=resolve(d.get("checkpoint")),
        diagnostics=dict(d.get("diagnostics", {})),
        source=d,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a TOML experiment config (a JSON snapshot is accepted too)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    return config_from_dict(d, path.parent)


# --------------------------------------------------------------------------
# run artifacts


@dataclass
class RunArtifacts:
    """Single-owner output directory of one run."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def write_snapshot(self, config: ExperimentConfig) -> Path:
        p = self.path("config.json")
        p.write_text(json.dumps(config.snapshot(), indent=2, sort_keys=True), encoding="utf-8")
        return p

    def open_log(self, seed: int | None = None) -> logging.Logger:
        """Attach a file handler (``run.log``) to the package logger and record versions."""
        import numba
        import scipy

        logger = logging.getLogger("superstat")
        logger.setLevel(logging.INFO)
        target = str(self.path("run.log"))
        if not any(getattr(h, "baseFilename", None) == target for h in logger.handlers):
            h = logging.FileHandler(target, encoding="utf-8")
            h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
            logger.addHandler(h)
        from . import __version__

        logger.info(
            "superstat %s, python %s, numpy %s, scipy %s, numba %s, seed %s",
            __version__, platform.python_version(), np.__version__, scipy.__version__, numba.__version__, seed,
        )
        return logger

    def close_log(self) -> None:
        logger = logging.getLogger("superstat")
        target = str(self.path("run.log"))
        for h in list(logger.handlers):
            if getattr(h, "baseFilename", None) == target:
                logger.removeHandler(h)
                h.close()
