"""Run configuration: TOML file -> nested dataclasses, plus CSV and theta I/O."""

from __future__ import annotations

import csv
import importlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .model import Dataset, GaussianSwitchingModel, RegimeSwitchingModel

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

FAMILIES = ("gaussian", "tvtp")


@dataclass
class ModelSection:
    family: str = "gaussian"
    K: int = 2
    ar_lags: int = 0
    p: Optional[int] = None  # derived from ar_lags; checked when given
    switching_variance: bool = True
    tvtp_covariates: int = 0
    initial: str = "uniform"  # uniform | ergodic | user
    nu: Optional[list] = None  # probabilities of presample tuples when initial = "user"
    factory: Optional[str] = None  # "module:callable" building a custom model


@dataclass
class AlgorithmSection:
    name: str = "hybrid"
    B: float = 1000.0
    order: int = 2
    chunk: int = 256


@dataclass
class DataSection:
    csv: Optional[str] = None
    presample: Optional[list] = None  # Y_0, Y_{-1}, ..., most recent first


@dataclass
class TaskSection:
    seed: int = 0
    n: Optional[int] = None
    theta: Optional[object] = None  # list (unconstrained) or table {mu, variance, P, phi}
    theta_file: Optional[str] = None
    theta0: Optional[object] = None
    theta0_file: Optional[str] = None
    method: str = "newton"
    multistart: int = 0
    grad_tol: float = 1e-6
    tol: float = 1e-8
    max_iter: int = 200
    nu_mode: str = "fixed"
    step: float = 1e-5
    tolerances: dict = field(default_factory=dict)
    sizes: list = field(default_factory=list)
    repeats: int = 5
    warmup: int = 1
    trace_memory: bool = True


@dataclass
class OutputSection:
    path: Optional[str] = None  # JSON report; stdout when absent
    csv: Optional[str] = None  # simulate: data file, bench: table
    sidecar: Optional[str] = None  # simulate: theta/seed/path JSON


SECTIONS = {
    "model": ModelSection,
    "algorithm": AlgorithmSection,
    "data": DataSection,
    "task": TaskSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    algorithm: AlgorithmSection = field(default_factory=AlgorithmSection)
    data: DataSection = field(default_factory=DataSection)
    task: TaskSection = field(default_factory=TaskSection)
    output: OutputSection = field(default_factory=OutputSection)
    base_dir: str = "."

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        return json.loads(json.dumps(out, default=_jsonable))

    def path(self, value: Optional[str]) -> Optional[str]:
        if value is None:
            return None
        return value if os.path.isabs(value) else os.path.normpath(os.path.join(self.base_dir, value))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return cls(**raw)


def config_from_dict(raw: dict, base_dir: str = ".") -> RunConfig:
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown section(s): {', '.join(unknown)}")
    parts = {name: _section(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    cfg = RunConfig(**parts, base_dir=base_dir)
    validate(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return config_from_dict(raw, os.path.dirname(os.path.abspath(path)))


def validate(cfg: RunConfig) -> None:
    m, a, t = cfg.model, cfg.algorithm, cfg.task
    if m.factory is None and m.family not in FAMILIES:
        raise ConfigurationError(f"model.family must be one of {FAMILIES}")
    if m.K < 1:
        raise ConfigurationError("model.K must be at least 1")
    if m.ar_lags < 0 or m.tvtp_covariates < 0:
        raise ConfigurationError("model.ar_lags and model.tvtp_covariates must be non-negative")
    if m.p is not None and m.factory is None and m.p != max(1, m.ar_lags):
        raise ConfigurationError(f"model.p = {m.p} does not match ar_lags (p = {max(1, m.ar_lags)})")
    if m.initial not in ("uniform", "ergodic", "user"):
        raise ConfigurationError("model.initial must be uniform, ergodic or user")
    if m.initial == "user" and m.nu is None:
        raise ConfigurationError("model.initial = 'user' needs model.nu")
    if a.name not in ("unscaled", "scaled", "hybrid"):
        raise ConfigurationError("algorithm.name must be unscaled, scaled or hybrid")
    if not a.B >= 1:
        raise ConfigurationError("algorithm.B must be at least 1")
    if a.order not in (0, 1, 2):
        raise ConfigurationError("algorithm.order must be 0, 1 or 2")
    if a.chunk < 1:
        raise ConfigurationError("algorithm.chunk must be positive")
    if t.n is not None and t.n < 1:
        raise ConfigurationError(f"task.n must be at least 1, got {t.n}")
    if t.method not in ("em", "newton"):
        raise ConfigurationError("task.method must be em or newton")
    if t.nu_mode not in ("fixed", "ergodic"):
        raise ConfigurationError("task.nu_mode must be fixed or ergodic")
    for name in ("grad_tol", "tol", "step"):
        if not getattr(t, name) > 0:
            raise ConfigurationError(f"task.{name} must be positive")
    if t.max_iter < 0 or t.multistart < 0 or t.repeats < 1 or t.warmup < 0:
        raise ConfigurationError("task.max_iter, multistart, warmup must be >= 0 and repeats >= 1")


def build_model(section: ModelSection) -> RegimeSwitchingModel:
    if section.factory is not None:
        mod_name, _, attr = section.factory.partition(":")
        try:
            factory = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigurationError(f"cannot load model factory {section.factory!r}: {exc}") from None
        return factory(section)
    covariates = section.tvtp_covariates if section.family == "tvtp" else None
    if section.family == "tvtp" and section.K < 2:
        raise ConfigurationError("time-varying transitions need K >= 2")
    return GaussianSwitchingModel(section.K, section.switching_variance, section.ar_lags, covariates)


def initial_spec(section: ModelSection):
    """What to pass as ``nu`` to the numerical routines."""
    return section.nu if section.initial == "user" else section.initial


# -- theta ------------------------------------------------------------------


def resolve_theta(model, spec, label="theta") -> np.ndarray:
    """Unconstrained vector from a list or from natural parameters."""
    if isinstance(spec, dict):
        # for time-varying transitions P sets the intercepts and slopes start at zero
        if not isinstance(model, GaussianSwitchingModel):
            raise ConfigurationError(f"{label} as a table needs a built-in Gaussian model")
        unknown = sorted(set(spec) - {"mu", "variance", "P", "phi"})
        if unknown:
            raise ConfigurationError(f"unknown key(s) in {label}: {', '.join(unknown)}")
        try:
            return model.pack(
                np.asarray(spec["mu"], dtype=float),
                np.asarray(spec["variance"], dtype=float),
                np.asarray(spec.get("P", [[1.0]]), dtype=float),
                np.asarray(spec.get("phi", []), dtype=float),
            )
        except KeyError as exc:
            raise ConfigurationError(f"{label} is missing {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ConfigurationError(f"{label}: {exc}") from None
    theta = np.asarray(spec, dtype=float).ravel()
    if theta.size != model.d:
        raise ConfigurationError(f"{label} has {theta.size} entries, model needs {model.d}")
    return theta


def read_theta_file(path: str) -> list:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"theta file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    for key in ("theta", "theta_hat"):
        if key in doc:
            return doc[key]
    raise ConfigurationError(f"{path}: no 'theta' or 'theta_hat' entry")


def task_theta(cfg: RunConfig, model, which="theta") -> Optional[np.ndarray]:
    spec = getattr(cfg.task, which)
    path = getattr(cfg.task, which + "_file")
    if spec is not None and path is not None:
        raise ConfigurationError(f"give task.{which} or task.{which}_file, not both")
    if path is not None:
        spec = read_theta_file(cfg.path(path))
    return None if spec is None else resolve_theta(model, spec, f"task.{which}")


# -- CSV --------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(path: str, data: Dataset) -> None:
    header = ["y"] + [f"x{j + 1}" for j in range(data.m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            w.writerow([_fmt(data.y[i])] + [_fmt(v) for v in data.x[i]])


def read_csv(path: str, presample, p: int) -> Dataset:
    """Read ``y,x1..xm``; the presample block comes from the config, not the file."""
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise ConfigurationError(f"data file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigurationError(f"{path}:1: empty file")
        header = [h.strip() for h in header]
        expected = ["y"] + [f"x{j + 1}" for j in range(len(header) - 1)]
        if header != expected:
            raise ConfigurationError(f"{path}:1: header must be {','.join(expected)}, got {','.join(header)}")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigurationError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise ConfigurationError(f"{path}:{line}: non-numeric value") from None
            if not all(math.isfinite(v) for v in vals):
                raise ConfigurationError(f"{path}:{line}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ConfigurationError(f"{path}: no observations")
    arr = np.asarray(rows)
    if presample is None:
        raise ConfigurationError(f"data.presample must list {p} presample value(s)")
    y0 = np.asarray(presample, dtype=float).ravel()
    if y0.size != p:
        raise ConfigurationError(f"data.presample has {y0.size} value(s), model needs {p}")
    return Dataset(arr[:, 0], y0, arr[:, 1:])
