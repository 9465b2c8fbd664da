"""Experiment configuration and seeded end-to-end runs.

A configuration is an INI file; every key is optional and falls back to the
defaults below.  Command-line overrides win over the file.
"""

from __future__ import annotations

import configparser
import io
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .analysis import RunReport, sampled_errors
from .knwidth import MODES, KnwConfig, PipelineConfig, PipelineResult, regularized_pipeline
from .models import ACTIVATIONS, BIAS_INITS, MHPinnModel, PiDonModel
from .problems import PDES, LossWeights, TaskBatch, TaskFamily, sample_tasks

ARCHITECTURES = ("mh_pinn", "pi_don")

# seed stream ids; appending a new one never shifts the others
STREAM_INIT, STREAM_TASKS, STREAM_AGENTS = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending field."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


def seed_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


# INI section of every field
_SECTIONS = {
    "experiment": ("problem", "architecture", "activation", "regularize", "seed", "n_tasks"),
    "network": ("width", "depth", "bias_init", "first_layer_omega"),
    "training": ("adam_epochs", "lbfgs_iters", "lr"),
    "metric": ("epochs_bi", "epochs_tri_warmup", "mode", "normalize_by_forcing", "unit_ball", "lr_c", "lr_w2"),
    "loss": ("lambda_r", "lambda_b", "lambda_k"),
    "family": ("n_modes", "coeff_low", "coeff_high", "lambda_pde", "n_points", "n_sensors"),
    "output": ("out", "threads"),
}


@dataclass
class ExperimentConfig:
    """Resolved experiment settings.

    ``n_points`` / ``n_sensors`` of 0 mean the problem default (512 points
    and 50 sensors in 1D, a 51x51 grid and 11x11 sensors in 2D).
    ``first_layer_omega`` of 0 disables first-layer frequency scaling.
    """

    problem: str = "poisson1d"
    architecture: str = "mh_pinn"
    activation: str = "sine"
    regularize: bool = False
    seed: int = 0
    n_tasks: int = 20
    width: int = 20
    depth: int = 2
    bias_init: str = "zeros"
    first_layer_omega: float = 0.0
    adam_epochs: int = 1000
    lbfgs_iters: int = 5000
    lr: float = 1e-3
    epochs_bi: int = 5000
    epochs_tri_warmup: int = 1000
    mode: str = "absolute"
    normalize_by_forcing: bool = False
    unit_ball: bool = False
    lr_c: float = 1e-3
    lr_w2: float = 1e-3
    lambda_r: float = 1.0
    lambda_b: float = 10.0
    lambda_k: float = 10.0
    n_modes: int = 5
    coeff_low: float = 0.0
    coeff_high: float = 1.0
    lambda_pde: float = 0.1
    n_points: int = 0
    n_sensors: int = 0
    out: str = "out"
    threads: int = 1

    def validate(self) -> "ExperimentConfig":
        bad = []
        choices = {"problem": PDES, "architecture": ARCHITECTURES, "activation": ACTIVATIONS,
                   "mode": MODES, "bias_init": BIAS_INITS}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                bad.append(f"{name}: {getattr(self, name)!r} not in {allowed}")
        for name in ("n_tasks", "width", "depth", "epochs_bi", "epochs_tri_warmup", "n_modes", "threads"):
            if getattr(self, name) < 1:
                bad.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        for name in ("adam_epochs", "lbfgs_iters", "n_points", "n_sensors"):
            if getattr(self, name) < 0:
                bad.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        for name in ("n_points", "n_sensors"):
            if 0 < getattr(self, name) < 2:
                bad.append(f"{name}: need at least 2 points, got {getattr(self, name)}")
        for name in ("lr", "lr_c", "lr_w2"):
            if not getattr(self, name) > 0:
                bad.append(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("lambda_r", "lambda_b", "lambda_k", "first_layer_omega"):
            if getattr(self, name) < 0:
                bad.append(f"{name}: must be non-negative, got {getattr(self, name)}")
        if not self.coeff_low < self.coeff_high:
            bad.append(f"coeff_low/coeff_high: need low < high, got {self.coeff_low}, {self.coeff_high}")
        if bad:
            raise ConfigError(bad)
        return self

    # -- construction -----------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        """Build from string or typed values, coercing to each field's type."""
        kwargs, bad = {}, []
        kinds = {f.name: type(f.default) for f in fields(cls)}
        for key, raw in values.items():
            if key not in kinds:
                bad.append(f"{key}: unknown setting")
                continue
            try:
                kwargs[key] = _coerce(raw, kinds[key])
            except ValueError:
                bad.append(f"{key}: cannot parse {raw!r} as {kinds[key].__name__}")
        if bad:
            raise ConfigError(bad)
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        """Defaults, then the INI file at ``path``, then ``overrides``."""
        values = {}
        if path is not None:
            values.update(read_ini(path))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values).validate()

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, names in _SECTIONS.items():
            parser.add_section(section)
            for name in names:
                v = getattr(self, name)
                text = repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v)
                parser.set(section, name, text)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    # -- derived objects --------------------------------------------------

    def family(self) -> TaskFamily:
        return TaskFamily(self.problem, self.n_modes, (self.coeff_low, self.coeff_high), self.n_tasks,
                          self.lambda_pde, self.n_points or None, self.n_sensors or None)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_r, self.lambda_b, self.lambda_k)

    def knw_config(self) -> KnwConfig:
        return KnwConfig(self.epochs_bi, self.epochs_tri_warmup, self.mode, self.normalize_by_forcing,
                         self.unit_ball, self.lr_c, self.lr_w2, self.lr)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(self.adam_epochs, self.lbfgs_iters, self.lr, self.knw_config(), self.weights(),
                              self.regularize)

    @property
    def run_id(self) -> str:
        reg = "reg" if self.regularize else "plain"
        return f"{self.problem}_{self.architecture}_{self.activation}_{reg}_s{self.seed}"


def _coerce(raw, kind):
    if not isinstance(raw, str):
        if kind is bool and not isinstance(raw, bool):
            raise ValueError(raw)
        return kind(raw)
    s = raw.strip()
    if kind is bool:
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    return kind(s)


def read_ini(path) -> dict:
    """Flatten an INI file into ``{key: string}``; section names are ignored."""
    parser = configparser.ConfigParser()
    with Path(path).open() as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
    values = {}
    for section in parser.sections():
        values.update(dict(parser.items(section)))
    return values


# ---------------------------------------------------------------------------
# running


def sample_batch(cfg: ExperimentConfig) -> TaskBatch:
    return TaskBatch(sample_tasks(cfg.family(), cfg.n_tasks, seed_stream(cfg.seed, STREAM_TASKS)))


def build_model(cfg: ExperimentConfig, batch: TaskBatch):
    """Fresh network for ``cfg``; the DeepONet branch input is scaled by the largest sensor value."""
    rng = seed_stream(cfg.seed, STREAM_INIT)
    widths = (cfg.width,) * cfg.depth
    omega = cfg.first_layer_omega or None
    fam = batch.family
    if cfg.architecture == "mh_pinn":
        return MHPinnModel.create(fam.dim, len(batch), widths, cfg.activation, rng, omega, cfg.bias_init)
    sensors = batch.sensor_values
    scale = float(np.max(np.abs(sensors))) or 1.0
    return PiDonModel.create(fam.dim, sensors.shape[1], cfg.width, widths, cfg.activation, rng, scale, omega,
                             cfg.bias_init)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    batch: TaskBatch
    pipeline: PipelineResult
    report: RunReport

    @property
    def model(self):
        return self.pipeline.model


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Sample tasks, build, train (optionally regularized) and measure the n-width."""
    cfg.validate()
    batch = sample_batch(cfg)
    model = build_model(cfg, batch)
    t0 = time.perf_counter()
    res = regularized_pipeline(model, batch, cfg.pipeline_config(), rng=seed_stream(cfg.seed, STREAM_AGENTS))
    runtime = time.perf_counter() - t0
    report = RunReport(cfg.architecture, cfg.activation, cfg.regularize, cfg.seed, sampled_errors(res.model, batch),
                       res.knw.value_abs, res.knw.value_rel, runtime, dict(res.stage_timings), cfg.problem)
    return ExperimentResult(cfg, batch, res, report)
