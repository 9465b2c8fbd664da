"""Manufactured-solution task families and physics-informed losses.

Two stationary families are supported, both built from the same five
sine modes so that every solution vanishes on the boundary:

* ``poisson1d``:  u'' = f on [-1, 1],  u = sum_k c_k sin(k pi x)
* ``allen_cahn2d``:  lam (u_xx + u_yy) + u (u^2 - 1) = f on [0, 1]^2,
  u = sum_k c_k sin(k pi x) sin(k pi y)

Loss helpers accept tape nodes or plain arrays, so the same code serves
training and evaluation.  Prediction matrices are laid out points x tasks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericalError

PDES = ("poisson1d", "allen_cahn2d")


@dataclass(frozen=True)
class LossWeights:
    residual: float = 1.0
    boundary: float = 10.0
    knw: float = 10.0


@dataclass(frozen=True)
class TaskFamily:
    """A manufactured family plus the point sets it is trained on.

    ``n_points`` is the residual point count for the 1D problem and the
    per-axis grid size for the 2D problem; ``n_sensors`` follows the same
    convention for the PI-DON branch input.
    """

    pde: str = "poisson1d"
    n_modes: int = 5
    coeff_bounds: tuple[float, float] = (0.0, 1.0)
    n_tasks: int = 20
    lambda_pde: float = 0.1
    n_points: int | None = None
    n_sensors: int | None = None

    def __post_init__(self):
        if self.pde not in PDES:
            raise ContractError(f"unknown pde {self.pde!r}; expected one of {PDES}")
        a, b = self.coeff_bounds
        if not a < b:
            raise ContractError(f"coefficient bounds must satisfy a < b, got {self.coeff_bounds}")
        if self.n_modes < 1:
            raise ContractError("n_modes must be positive")
        if self.n_points is None:
            object.__setattr__(self, "n_points", 512 if self.pde == "poisson1d" else 51)
        if self.n_sensors is None:
            object.__setattr__(self, "n_sensors", 50 if self.pde == "poisson1d" else 11)

    @property
    def dim(self) -> int:
        return 1 if self.pde == "poisson1d" else 2

    @property
    def domain(self) -> tuple[float, float]:
        return (-1.0, 1.0) if self.pde == "poisson1d" else (0.0, 1.0)

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return (self.n_points,) if self.dim == 1 else (self.n_points, self.n_points)

    def _grid(self, n: int) -> np.ndarray:
        lo, hi = self.domain
        ticks = np.linspace(lo, hi, n)
        if self.dim == 1:
            return ticks[:, None]
        X, Y = np.meshgrid(ticks, ticks, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def residual_points(self) -> np.ndarray:
        return self._grid(self.n_points)

    def sensor_points(self) -> np.ndarray:
        return self._grid(self.n_sensors)

    def boundary_points(self) -> np.ndarray:
        if self.dim == 1:
            return np.array([[-1.0], [1.0]])
        grid = self.residual_points()
        lo, hi = self.domain
        on_edge = np.any((grid == lo) | (grid == hi), axis=1)
        return grid[on_edge]

    # -- analytic modes ------------------------------------------------------

    def wavenumbers(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1, dtype=np.float64) * np.pi

    def mode_values(self, points) -> np.ndarray:
        """Mode matrix, shape (n_points, n_modes)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        kpi = self.wavenumbers()
        out = np.sin(pts[:, 0:1] * kpi)
        if self.dim == 2:
            out = out * np.sin(pts[:, 1:2] * kpi)
        return out

    def mode_second_derivatives(self, points) -> list[np.ndarray]:
        """Second derivative of every mode along each coordinate axis."""
        phi = self.mode_values(points)
        k2 = self.wavenumbers() ** 2
        return [-k2 * phi for _ in range(self.dim)]

    def solution(self, c, points):
        return ad.matmul(self.mode_values(points), c)

    def forcing(self, c, points):
        """Apply the PDE operator to the manufactured solution."""
        phi = self.mode_values(points)
        k2 = self.wavenumbers() ** 2
        if self.pde == "poisson1d":
            return ad.matmul(-k2 * phi, c)
        u = ad.matmul(phi, c)
        lap = ad.matmul(-2.0 * k2 * phi, c)
        return self.lambda_pde * lap + u * (u * u - 1.0)

    def residual(self, u, second_derivatives: Sequence, f):
        """PDE residual R(u) = operator(u) - f at each point."""
        if len(second_derivatives) != self.dim:
            raise ContractError(f"{self.pde} needs {self.dim} second derivatives")
        if self.pde == "poisson1d":
            return second_derivatives[0] - f
        lap = second_derivatives[0] + second_derivatives[1]
        return self.lambda_pde * lap + u * (u * u - 1.0) - f


@dataclass
class TaskInstance:
    family: TaskFamily
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64).ravel()
        if c.size != self.family.n_modes:
            raise ContractError(f"expected {self.family.n_modes} coefficients, got {c.size}")
        self.coefficients = c

    def u(self, points) -> np.ndarray:
        return self.family.solution(self.coefficients, points)

    def f(self, points) -> np.ndarray:
        return self.family.forcing(self.coefficients, points)

    @cached_property
    def f_samples(self) -> np.ndarray:
        return self.f(self.family.sensor_points())


def manufacture_poisson(c, family: TaskFamily | None = None) -> TaskInstance:
    family = family or TaskFamily("poisson1d")
    if family.pde != "poisson1d":
        raise ContractError("family is not poisson1d")
    return TaskInstance(family, c)


def manufacture_allen_cahn(c, family: TaskFamily | None = None) -> TaskInstance:
    family = family or TaskFamily("allen_cahn2d")
    if family.pde != "allen_cahn2d":
        raise ContractError("family is not allen_cahn2d")
    return TaskInstance(family, c)


def sample_tasks(family: TaskFamily, n_tasks: int | None = None, seed=0) -> list[TaskInstance]:
    """Draw i.i.d. uniform coefficient vectors in the family's box.

    ``seed`` may be an int, a SeedSequence or a Generator.
    """
    n_tasks = family.n_tasks if n_tasks is None else n_tasks
    if n_tasks < 1:
        raise ContractError("need at least one task")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a, b = family.coeff_bounds
    coeffs = rng.uniform(a, b, size=(n_tasks, family.n_modes))
    return [TaskInstance(family, row) for row in coeffs]


@dataclass
class TaskBatch:
    """Instances of one family with their grid data precomputed."""

    instances: list[TaskInstance]
    family: TaskFamily = field(init=False)

    def __post_init__(self):
        if not self.instances:
            raise ContractError("empty task batch")
        self.family = self.instances[0].family
        if any(t.family != self.family for t in self.instances):
            raise ContractError("all instances must share one family")

    def __len__(self):
        return len(self.instances)

    @cached_property
    def coefficients(self) -> np.ndarray:
        return np.stack([t.coefficients for t in self.instances])

    @cached_property
    def points(self) -> np.ndarray:
        return self.family.residual_points()

    @cached_property
    def boundary(self) -> np.ndarray:
        return self.family.boundary_points()

    @cached_property
    def solutions(self) -> np.ndarray:
        return self.family.solution(self.coefficients.T, self.points)

    @cached_property
    def forcings(self) -> np.ndarray:
        return self.family.forcing(self.coefficients.T, self.points)

    @cached_property
    def boundary_targets(self) -> np.ndarray:
        return self.family.solution(self.coefficients.T, self.boundary)

    @cached_property
    def sensor_values(self) -> np.ndarray:
        """Forcing sampled at the sensor points, shape (tasks, sensors)."""
        return self.family.forcing(self.coefficients.T, self.family.sensor_points()).T


def as_batch(instances) -> TaskBatch:
    return instances if isinstance(instances, TaskBatch) else TaskBatch(list(instances))


# ---------------------------------------------------------------------------
# losses


def residual_loss(prediction, forcing, family: TaskFamily, lambda_r: float = 1.0):
    """(lambda_r / M) * sum |R|^2 over residual points (and tasks, if columns).

    ``prediction`` is ``(u, [u_ss per axis])``.
    """
    u, second = prediction
    R = family.residual(u, second, forcing)
    rv = ad.value_of(R)
    if not np.isfinite(rv).all():
        bad = np.argwhere(~np.isfinite(rv))[0]
        raise NumericalError(f"non-finite residual at grid index {int(bad[0])}", "residual")
    M = rv.shape[0]
    return ad.total(ad.square(R)) * (lambda_r / M)


def boundary_loss(u_boundary, target=0.0, lambda_b: float = 1.0):
    """(lambda_b / N) * sum |u - u_theta|^2 over boundary points."""
    N = ad.value_of(u_boundary).shape[0]
    if N == 0:
        raise ContractError("boundary point set is empty")
    return ad.total(ad.square(ad.sub(target, u_boundary))) * (lambda_b / N)


@dataclass
class LossParts:
    total: object
    residual: object
    boundary: object
    knw: object = 0.0

    def values(self) -> dict[str, float]:
        return {k: float(ad.value_of(getattr(self, k))) for k in ("total", "residual", "boundary", "knw")}


def predict_tasks(model, params, batch: TaskBatch, with_jets: bool = True):
    """Predictions for every task on the residual grid: (U, [U_ss]) or U."""
    C = model.coefficient_matrix(params, batch)
    if ad.value_of(C).shape[1] != len(batch):
        raise ContractError(
            f"model produces {ad.value_of(C).shape[1]} task columns but {len(batch)} instances were given"
        )
    if not with_jets:
        return ad.matmul(model.basis(params, batch.points), C)
    phi, phi_ss = model.basis_jets(params, batch.points)
    return ad.matmul(phi, C), [ad.matmul(q, C) for q in phi_ss]


def multitask_loss(model, instances, weights: LossWeights = LossWeights(), params=None, knw_term=None) -> LossParts:
    """Summed boundary + residual loss over all tasks, plus the optional n-width term."""
    batch = as_batch(instances)
    p = model.params.values if params is None else params
    fam = batch.family
    C = model.coefficient_matrix(p, batch)
    if ad.value_of(C).shape[1] != len(batch):
        raise ContractError(
            f"model produces {ad.value_of(C).shape[1]} task columns but {len(batch)} instances were given"
        )
    phi, phi_ss = model.basis_jets(p, batch.points)
    U = ad.matmul(phi, C)
    Uss = [ad.matmul(q, C) for q in phi_ss]
    lr = residual_loss((U, Uss), batch.forcings, fam, weights.residual)
    ub = ad.matmul(model.basis(p, batch.boundary), C)
    lb = boundary_loss(ub, batch.boundary_targets, weights.boundary)
    total = lr + lb
    knw = 0.0
    if knw_term is not None:
        # a callable receives the basis on the residual grid, so it can reuse it
        knw = knw_term(phi) if callable(knw_term) else knw_term
        total = total + weights.knw * knw
    return LossParts(total, lr, lb, knw)


# ---------------------------------------------------------------------------
# exports


def write_tasks_csv(path, instances) -> Path:
    batch = as_batch(instances)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id"] + [f"c_{k + 1}" for k in range(batch.family.n_modes)])
        for i, c in enumerate(batch.coefficients):
            w.writerow([i] + [repr(float(v)) for v in c])
    return path


def read_tasks_csv(path, family: TaskFamily) -> list[TaskInstance]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [TaskInstance(family, [float(r[f"c_{k + 1}"]) for k in range(family.n_modes)]) for r in rows]


def write_solutions_csv(path, instances) -> Path:
    """Long-format grid dump: task_id, coordinates, u, f."""
    batch = as_batch(instances)
    coords = ["x"] if batch.family.dim == 1 else ["x", "y"]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", *coords, "u", "f"])
        for i in range(len(batch)):
            for pt, u, f in zip(batch.points, batch.solutions[:, i], batch.forcings[:, i]):
                w.writerow([i, *(repr(float(v)) for v in pt), repr(float(u)), repr(float(f))])
    return path
