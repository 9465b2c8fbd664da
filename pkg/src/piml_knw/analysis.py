"""Error metrics, run reports, basis spectra, sweeps and plot-ready CSV exports.

All exports follow the ``<run_id>_<kind>.csv`` naming convention and write
floats with ``repr`` so that re-importing reproduces the source numbers
exactly.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .models import BasisMatrix, extract_basis, load_checkpoint
from .problems import TaskBatch, predict_tasks


class UndefinedMetricError(ArithmeticError):
    """Relative error requested against an all-zero reference."""


def relative_l2(pred, truth) -> float:
    """``||truth - pred||_2 / ||truth||_2``."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ContractError(f"length mismatch: {pred.size} vs {truth.size}")
    denom = np.linalg.norm(truth)
    if denom == 0.0:
        raise UndefinedMetricError("relative error undefined for a zero-norm reference")
    return float(np.linalg.norm(truth - pred) / denom)


def sampled_errors(model, batch: TaskBatch) -> np.ndarray:
    """Relative l2 error of every task in ``batch`` on the residual grid."""
    u = np.asarray(predict_tasks(model, model.params.values, batch, with_jets=False))
    return np.array([relative_l2(u[:, k], batch.solutions[:, k]) for k in range(len(batch))])


def relative_difference(knw_rel: float, mean: float) -> float:
    """``(knw - mean) / knw``; at most 1, zero when the two agree."""
    return (knw_rel - mean) / knw_rel


@dataclass
class RunReport:
    architecture: str
    activation: str
    regularized: bool
    seed: int
    task_errors: np.ndarray
    knw_abs: float
    knw_rel: float
    runtime: float = 0.0
    stage_timings: dict = field(default_factory=dict)
    problem: str = ""

    def __post_init__(self):
        self.task_errors = np.asarray(self.task_errors, dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(np.mean(self.task_errors))

    @property
    def std(self) -> float:
        return float(np.std(self.task_errors))

    @property
    def rel_diff(self) -> float:
        return relative_difference(self.knw_rel, self.mean)

    def summary(self) -> dict:
        """Table-style row: n-width, sampled mean and std, runtime."""
        return {
            "problem": self.problem,
            "architecture": self.architecture,
            "activation": self.activation,
            "regularized": self.regularized,
            "seed": self.seed,
            "knw_abs": self.knw_abs,
            "knw_rel": self.knw_rel,
            "mean": self.mean,
            "std": self.std,
            "rel_diff": self.rel_diff,
            "runtime": self.runtime,
            "stage_timings": dict(self.stage_timings),
        }


def svd_spectrum(basis) -> np.ndarray:
    """Normalised singular values ``sigma_k / sigma_1`` in descending order.

    Uses LAPACK's Golub-Kahan SVD on the basis directly.  Going through the
    Gram matrix would square the condition number and floor the small
    singular values near ``sqrt(eps) * sigma_1``.
    """
    values = basis.values if isinstance(basis, BasisMatrix) else np.asarray(basis, dtype=np.float64)
    if values.ndim != 2:
        raise ContractError("basis must be a 2-D matrix")
    if not np.any(values):
        raise ContractError("spectrum undefined for an all-zero matrix")
    sigma = np.linalg.svd(values, compute_uv=False)
    return sigma / sigma[0]


# ---------------------------------------------------------------------------
# exports


def _fmt(x) -> str:
    return repr(float(x))


def export_violin(reports, path) -> Path:
    """Tidy CSV: one row per task error plus one ``knw`` row per run."""
    if not reports:
        raise ContractError("need at least one report")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["architecture", "activation", "regularized", "seed", "kind", "task_id", "error"])
        for r in reports:
            tag = [r.architecture, r.activation, int(r.regularized), r.seed]
            for k, e in enumerate(r.task_errors):
                w.writerow([*tag, "task", k + 1, _fmt(e)])
            w.writerow([*tag, "knw", "", _fmt(r.knw_rel)])
    return path


def read_violin(path) -> dict:
    """Group an exported violin CSV back into ``{(arch, act, reg, seed): (errors, knw)}``."""
    out: dict = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["architecture"], row["activation"], bool(int(row["regularized"])), int(row["seed"]))
            errs, knw = out.get(key, ([], None))
            if row["kind"] == "knw":
                knw = float(row["error"])
            else:
                errs.append(float(row["error"]))
            out[key] = (errs, knw)
    return {k: (np.array(e), v) for k, (e, v) in out.items()}


def export_spectrum(spectrum, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "sigma_normalized"])
        for k, s in enumerate(spectrum):
            w.writerow([k + 1, _fmt(s)])
    return path


def export_basis_grids(checkpoint, grid, out_dir, run_id: str = "run", grid_shape=None) -> list[Path]:
    """One long-format CSV per basis function, ``<run_id>_basis_<i>.csv``.

    ``checkpoint`` is a path or an already loaded model.
    """
    model = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    basis = extract_basis(model, grid=grid, grid_shape=grid_shape)
    coords = ["x", "y", "z"][: grid.shape[1]]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, row in enumerate(basis.values):
        p = out_dir / f"{run_id}_basis_{i + 1:02d}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*coords, "phi"])
            for pt, v in zip(grid, row):
                w.writerow([*(_fmt(x) for x in pt), _fmt(v)])
        paths.append(p)
    return paths


def read_basis_grid(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["phi"]) for r in rows])


# ---------------------------------------------------------------------------
# sweep

SWEEP_FIELDS = ["cell", "width", "depth", "epochs", "knw_rel", "mean", "std", "rel_diff", "status"]


@dataclass
class SweepCell:
    index: int
    width: int
    depth: int
    epochs: int
    report: RunReport | None = None
    error: str = ""

    def row(self) -> dict:
        r = self.report
        nan = float("nan")
        return {
            "cell": self.index,
            "width": self.width,
            "depth": self.depth,
            "epochs": self.epochs,
            "knw_rel": r.knw_rel if r else nan,
            "mean": r.mean if r else nan,
            "std": r.std if r else nan,
            "rel_diff": r.rel_diff if r else nan,
            "status": "ok" if r else f"failed: {self.error}",
        }


def _run_cell(args):
    index, width, depth, epochs, run_cell = args
    try:
        return SweepCell(index, width, depth, epochs, run_cell(width, depth, epochs))
    except Exception as exc:  # recorded per cell; the sweep carries on
        return SweepCell(index, width, depth, epochs, None, f"{type(exc).__name__}: {exc}")


def sweep(run_cell, widths=(20, 40, 60), depths=(2, 3, 4), epochs=(1000, 3000, 5000), threads: int = 1) -> list[SweepCell]:
    """Evaluate ``run_cell(width, depth, epochs) -> RunReport`` on the full grid.

    Cells come back in grid order whatever the worker count. ``run_cell``
    must be picklable when ``threads > 1``.
    """
    jobs = [(i, w, d, e, run_cell) for i, (w, d, e) in enumerate(
        (w, d, e) for w in widths for d in depths for e in epochs)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    return sorted(cells, key=lambda c: c.index)


def write_sweep_csv(cells, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for c in cells:
            row = c.row()
            w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_sweep_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("cell", "width", "depth", "epochs"):
            r[k] = int(r[k])
        for k in ("knw_rel", "mean", "std", "rel_diff"):
            r[k] = float(r[k])
    return rows
