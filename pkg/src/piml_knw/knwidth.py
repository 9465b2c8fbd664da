"""Worst-case best-approximation error of a learned basis over a coefficient box.

For a frozen basis ``phi`` (points x n_basis) and the family's true modes
``U`` (points x n_modes) the objective is

    J(c, w) = || U c - phi w ||_2        c in [a, b]^n_modes

``compute_metric`` approximates ``max_c min_w J`` with two Adam agents that
step simultaneously (ascent on the sigmoid-parametrised coefficients,
descent on the head weights).  ``tri_optimize`` additionally trains the
network against its physics loss plus ``lambda_K * J``, and
``regularized_pipeline`` strings the stages together so that L-BFGS can
finish the training.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericalError, Tape
from .models import BasisMatrix, extract_basis
from .optim import AdamState, OptimTrace, adam_ascent_step, adam_step, lbfgs_minimize
from .problems import LossWeights, TaskBatch, TaskFamily, as_batch, multitask_loss
from .training import train_adam, train_lbfgs

MODES = ("absolute", "relative")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class CoefficientBox:
    raw: np.ndarray
    bounds: tuple[float, float] = (0.0, 1.0)


def _bounded(raw, a: float, b: float):
    return a + (b - a) * ad.sigmoid(raw)


def bound_coeffs(box: CoefficientBox) -> np.ndarray:
    """Map unconstrained values into the open box ``(a, b)`` via a sigmoid."""
    a, b = box.bounds
    if not a < b:
        raise ContractError(f"bounds must satisfy a < b, got {box.bounds}")
    return _bounded(np.asarray(box.raw, dtype=np.float64), a, b)


@dataclass
class KnwConfig:
    epochs_bi: int = 5000
    epochs_tri_warmup: int = 1000
    mode: str = "absolute"
    normalize_by_forcing: bool = False
    unit_ball: bool = False
    lr_c: float = 1e-3
    lr_w2: float = 1e-3
    lr_theta: float = 1e-3
    raw_init_scale: float = 1.0

    def __post_init__(self):
        if self.epochs_bi < 1 or self.epochs_tri_warmup < 1:
            raise ContractError("epoch counts must be positive")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")


@dataclass
class MetricTrace:
    epoch: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    coefficients: list[np.ndarray] = field(default_factory=list)
    w2_norm: list[float] = field(default_factory=list)

    def record(self, epoch, value, c, w2):
        self.epoch.append(int(epoch))
        self.objective.append(float(value))
        self.coefficients.append(np.array(c, dtype=np.float64))
        self.w2_norm.append(float(np.linalg.norm(w2)))

    def to_csv(self, path) -> Path:
        path = Path(path)
        n = len(self.coefficients[0]) if self.coefficients else 0
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "objective", *(f"c_{k + 1}" for k in range(n)), "w2_norm"])
            for e, v, c, wn in zip(self.epoch, self.objective, self.coefficients, self.w2_norm):
                w.writerow([e, repr(v), *(repr(float(x)) for x in c), repr(wn)])
        return path


@dataclass
class KnwResult:
    value_abs: float
    value_rel: float
    c_star: np.ndarray
    w2_star: np.ndarray
    raw_star: np.ndarray
    trace: MetricTrace


# ---------------------------------------------------------------------------
# objective


def _project_unit_ball(c):
    n = ad.norm2(c)
    if float(ad.value_of(n)) > 1.0:
        return c / n
    return c


def _objective(c, w2, phi, modes, family: TaskFamily, points, cfg: KnwConfig):
    if cfg.unit_ball:
        c = _project_unit_ball(c)
    target = ad.matmul(modes, c)
    value = ad.norm2(target - ad.matmul(phi, w2))
    if cfg.normalize_by_forcing:
        value = value / ad.norm2(family.forcing(c, points))
    if cfg.mode == "relative":
        value = value / ad.norm2(target)
    return value


def _grid_of(basis: BasisMatrix, family: TaskFamily) -> np.ndarray:
    pts = basis.points if basis.points is not None else family.residual_points()
    if pts.shape[0] != basis.n_points:
        raise ContractError(f"basis has {basis.n_points} points but the grid has {pts.shape[0]}")
    return pts


def knw_objective(c, w2, basis: BasisMatrix, family: TaskFamily, options: KnwConfig | None = None) -> float:
    """Best-approximation error of ``u(c)`` by ``basis`` with weights ``w2``."""
    options = options or KnwConfig()
    c = np.asarray(c, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w2.shape != (basis.n_basis,):
        raise ContractError(f"w2 must have length {basis.n_basis}")
    if c.shape != (family.n_modes,):
        raise ContractError(f"c must have length {family.n_modes}")
    pts = _grid_of(basis, family)
    return float(_objective(c, w2, basis.values.T, family.mode_values(pts), family, pts, options))


def _agent_gradients(raw, w2, phi, modes, family, points, cfg):
    a, b = family.coeff_bounds
    tape = Tape()
    r = tape.variable(raw)
    w = tape.variable(w2)
    obj = _objective(_bounded(r, a, b), w, phi, modes, family, points, cfg)
    g_raw, g_w = tape.gradient(obj, [r, w])
    return float(obj.value), g_raw, g_w


def _init_agents(family, n_basis, rng, cfg):
    rng = rng if rng is not None else np.random.default_rng(0)
    raw = rng.uniform(-cfg.raw_init_scale, cfg.raw_init_scale, size=family.n_modes)
    return raw, np.zeros(n_basis)


def compute_metric(basis: BasisMatrix, family: TaskFamily, cfg: KnwConfig | None = None, rng=None,
                   raw_init=None, w2_init=None) -> KnwResult:
    """Simultaneous ascent on coefficients / descent on head weights for a frozen basis."""
    cfg = cfg or KnwConfig()
    pts = _grid_of(basis, family)
    modes = family.mode_values(pts)
    phi = np.ascontiguousarray(basis.values.T)
    raw0, w0 = _init_agents(family, basis.n_basis, rng, cfg)
    raw = raw0 if raw_init is None else np.array(raw_init, dtype=np.float64)
    w2 = w0 if w2_init is None else np.array(w2_init, dtype=np.float64)
    st_c = AdamState.zeros(raw.size, cfg.lr_c)
    st_w = AdamState.zeros(w2.size, cfg.lr_w2)
    a, b = family.coeff_bounds
    trace = MetricTrace()
    for epoch in range(cfg.epochs_bi):
        try:
            value, g_raw, g_w = _agent_gradients(raw, w2, phi, modes, family, pts, cfg)
        except NumericalError as exc:
            raise NumericalError(f"n-width objective became non-finite at epoch {epoch}: {exc}", exc.kind) from exc
        trace.record(epoch, value, _bounded(raw, a, b), w2)
        st_c, raw = adam_ascent_step(st_c, raw, g_raw)
        st_w, w2 = adam_step(st_w, w2, g_w)
    c_star = _bounded(raw, a, b)
    value, _, _ = _agent_gradients(raw, w2, phi, modes, family, pts, cfg)
    trace.record(cfg.epochs_bi, value, c_star, w2)
    target = modes @ c_star
    value_abs = float(np.linalg.norm(target - phi @ w2))
    tnorm = float(np.linalg.norm(target))
    value_rel = value_abs / tnorm if tnorm > 0 else float("inf")
    return KnwResult(value_abs, value_rel, c_star, w2, raw, trace)


def vertex_ls_oracle(basis: BasisMatrix, family: TaskFamily) -> tuple[float, np.ndarray]:
    """Exact max over box vertices of the least-squares residual norm.

    For a fixed basis the inner minimum is a projection, so the residual
    norm is a convex function of ``c`` and its maximum over the box sits
    at a vertex.
    """
    if family.n_modes > 20:
        raise ContractError("vertex enumeration limited to n_modes <= 20")
    pts = _grid_of(basis, family)
    modes = family.mode_values(pts)
    phi = basis.values.T
    a, b = family.coeff_bounds
    vertices = np.array(list(product((a, b), repeat=family.n_modes)), dtype=np.float64)
    targets = modes @ vertices.T
    coef, *_ = np.linalg.lstsq(phi, targets, rcond=None)
    residual = np.linalg.norm(targets - phi @ coef, axis=0)
    best = int(np.argmax(residual))
    return float(residual[best]), vertices[best]


def least_squares_value(basis: BasisMatrix, family: TaskFamily, c) -> float:
    """min_w J(c, w) by linear least squares (absolute mode)."""
    pts = _grid_of(basis, family)
    target = family.mode_values(pts) @ np.asarray(c, dtype=np.float64)
    phi = basis.values.T
    coef, *_ = np.linalg.lstsq(phi, target, rcond=None)
    return float(np.linalg.norm(target - phi @ coef))


# ---------------------------------------------------------------------------
# tri-optimization


@dataclass
class TriResult:
    model: object
    raw: np.ndarray
    w2: np.ndarray
    theta_trace: OptimTrace
    knw_trace: MetricTrace


def tri_optimize(model, instances, family: TaskFamily | None = None, cfg: KnwConfig | None = None,
                 weights: LossWeights = LossWeights(), rng=None, raw_init=None, w2_init=None) -> TriResult:
    """Simultaneous Adam steps on network, worst-case coefficients and head weights."""
    cfg = cfg or KnwConfig()
    batch = as_batch(instances)
    family = family or batch.family
    pts = batch.points
    modes = family.mode_values(pts)
    a, b = family.coeff_bounds
    raw0, w0 = _init_agents(family, model.n_basis, rng, cfg)
    raw = raw0 if raw_init is None else np.array(raw_init, dtype=np.float64)
    w2 = w0 if w2_init is None else np.array(w2_init, dtype=np.float64)
    theta = model.params.values.copy()
    st_t = AdamState.zeros(theta.size, cfg.lr_theta)
    st_c = AdamState.zeros(raw.size, cfg.lr_c)
    st_w = AdamState.zeros(w2.size, cfg.lr_w2)
    theta_trace, knw_trace = OptimTrace(), MetricTrace()
    for epoch in range(cfg.epochs_tri_warmup):
        tape = Tape()
        p = tape.variable(theta)
        seen = {}
        c_now = _bounded(raw, a, b)

        def knw_term(phi, c_now=c_now, w2=w2):
            seen["phi"] = phi
            return _objective(c_now, w2, phi, modes, family, pts, cfg)

        try:
            parts = multitask_loss(model, batch, weights, params=p, knw_term=knw_term)
            (g_theta,) = tape.gradient(parts.total, [p])
        except NumericalError as exc:
            raise NumericalError(f"network agent: {exc} (epoch {epoch})", exc.kind) from exc
        try:
            value, g_raw, g_w = _agent_gradients(raw, w2, ad.value_of(seen["phi"]), modes, family, pts, cfg)
        except NumericalError as exc:
            raise NumericalError(f"coefficient/head agents: {exc} (epoch {epoch})", exc.kind) from exc
        theta_trace.record(epoch, float(parts.total.value), g_theta)
        knw_trace.record(epoch, value, c_now, w2)
        st_t, theta = adam_step(st_t, theta, g_theta)
        st_c, raw = adam_ascent_step(st_c, raw, g_raw)
        st_w, w2 = adam_step(st_w, w2, g_w)
    return TriResult(model.with_params(theta), raw, w2, theta_trace, knw_trace)


def regularized_lbfgs(model, instances, c_star, w2, cfg: KnwConfig | None = None,
                      weights: LossWeights = LossWeights(), max_iters: int = 5000):
    """L-BFGS over (network, head weights) with the worst case ``c_star`` frozen."""
    cfg = cfg or KnwConfig()
    batch = as_batch(instances)
    family = batch.family
    pts = batch.points
    modes = family.mode_values(pts)
    n_theta = len(model.params)
    c_star = np.asarray(c_star, dtype=np.float64)

    def objective(z):
        p = z[:n_theta]
        w = z[n_theta:]
        return multitask_loss(model, batch, weights, params=p,
                              knw_term=lambda phi: _objective(c_star, w, phi, modes, family, pts, cfg)).total

    def fun(x):
        return ad.eval_and_grad(objective, x)

    z0 = np.concatenate([model.params.values, np.asarray(w2, dtype=np.float64)])
    z, trace = lbfgs_minimize(fun, z0, max_iters)
    return model.with_params(z[:n_theta]), z[n_theta:], trace


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class PipelineConfig:
    adam_epochs: int = 1000
    lbfgs_iters: int = 5000
    lr: float = 1e-3
    knw: KnwConfig = field(default_factory=KnwConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    regularize: bool = False


@dataclass
class PipelineResult:
    model: object
    knw: KnwResult
    stage_timings: dict
    traces: dict


def _timed(stage, timings, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc
    timings[stage] = time.perf_counter() - t0
    return out


def train_then_metric(model, instances, cfg: PipelineConfig, rng=None) -> PipelineResult:
    """Unregularized flow: Adam, L-BFGS, then the n-width metric on the frozen basis."""
    batch = as_batch(instances)
    timings, traces = {}, {}
    model, traces["adam"] = _timed("adam", timings, train_adam, model, batch, cfg.adam_epochs, cfg.lr, cfg.weights)
    model, traces["lbfgs"] = _timed("lbfgs", timings, train_lbfgs, model, batch, cfg.lbfgs_iters, cfg.weights)
    basis = extract_basis(model, grid=batch.points, grid_shape=batch.family.grid_shape)
    knw = _timed("metric", timings, compute_metric, basis, batch.family, cfg.knw, rng)
    traces["metric"] = knw.trace
    return PipelineResult(model, knw, timings, traces)


def regularized_pipeline(model, instances, cfg: PipelineConfig, rng=None) -> PipelineResult:
    """Tri-optimization warm-up, worst-case refinement, regularized L-BFGS, final metric.

    With ``cfg.regularize`` false or ``lambda_K == 0`` this is exactly
    :func:`train_then_metric`.
    """
    if not cfg.regularize or cfg.weights.knw == 0.0:
        return train_then_metric(model, instances, cfg, rng)
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = as_batch(instances)
    family = batch.family
    timings, traces = {}, {}
    warm_cfg = KnwConfig(**{**cfg.knw.__dict__, "lr_theta": cfg.lr})
    tri = _timed("tri_optimize", timings, tri_optimize, model, batch, family, warm_cfg, cfg.weights, rng)
    traces["tri_theta"], traces["tri_knw"] = tri.theta_trace, tri.knw_trace
    basis = extract_basis(tri.model, grid=batch.points, grid_shape=family.grid_shape)
    refine = _timed("metric_refine", timings, compute_metric, basis, family, cfg.knw, None, tri.raw, tri.w2)
    traces["metric_refine"] = refine.trace
    model, w2, traces["lbfgs"] = _timed("lbfgs", timings, regularized_lbfgs, tri.model, batch, refine.c_star,
                                        refine.w2_star, cfg.knw, cfg.weights, cfg.lbfgs_iters)
    basis = extract_basis(model, grid=batch.points, grid_shape=family.grid_shape)
    knw = _timed("metric", timings, compute_metric, basis, family, cfg.knw, rng)
    traces["metric"] = knw.trace
    return PipelineResult(model, knw, timings, traces)


def write_worst_case_csv(path, basis: BasisMatrix, family: TaskFamily, result: KnwResult) -> Path:
    """Grid dump of the worst case u(c*), its best approximation and the pointwise error."""
    pts = _grid_of(basis, family)
    target = family.mode_values(pts) @ result.c_star
    approx = basis.values.T @ result.w2_star
    coords = ["x"] if family.dim == 1 else ["x", "y"]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*coords, "u_star", "u_approx", "error"])
        for pt, u, v in zip(pts, target, approx):
            w.writerow([*(repr(float(x)) for x in pt), repr(float(u)), repr(float(v)), repr(float(u - v))])
    return path
