"""``piml-knw`` command line.

Subcommands: train, metric, regularize, sweep, svd, tasks.  Exit codes:
0 success, 2 configuration error, 3 numerical failure, 4 I/O error.

Outputs land in ``--out`` as ``<run_id>_<kind>.csv``; timings go to
``<run_id>_report.json`` so the CSV files are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from .analysis import (RunReport, export_basis_grids, export_spectrum, export_violin, sampled_errors, svd_spectrum,
                       sweep, write_sweep_csv)
from .autodiff import ContractError, NumericalError
from .experiment import (STREAM_AGENTS, ConfigError, ExperimentConfig, build_model, read_ini, run_experiment,
                         sample_batch, seed_stream)
from .knwidth import StageError, compute_metric, write_worst_case_csv
from .models import (ArchitectureMismatchError, CheckpointError, check_architecture, extract_basis, load_checkpoint,
                     save_checkpoint)
from .problems import TaskBatch, write_solutions_csv, write_tasks_csv
from .training import train_adam, train_lbfgs

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _set_threads(n: int) -> None:
    # BLAS pools are sized at import; this only helps worker processes and is
    # harmless otherwise
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1" if n == 1 else str(n))


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> Path:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
    os.replace(tmp, path)
    return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x).__name__)


def _write_metric_outputs(out: Path, run_id: str, basis, family, knw) -> None:
    knw.trace.to_csv(out / f"{run_id}_metric.csv")
    write_worst_case_csv(out / f"{run_id}_worstcase.csv", basis, family, knw)


def _report_payload(report: RunReport, extra: dict | None = None) -> dict:
    payload = report.summary()
    payload["task_errors"] = report.task_errors
    payload.update(extra or {})
    return payload


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: ExperimentConfig) -> RunReport:
    """Plain training (Adam then L-BFGS); writes checkpoint, errors and traces."""
    out = _out_dir(cfg)
    run_id = cfg.run_id
    batch = sample_batch(cfg)
    model = build_model(cfg, batch)
    t0 = time.perf_counter()
    model, adam_trace = train_adam(model, batch, cfg.adam_epochs, cfg.lr, cfg.weights())
    t1 = time.perf_counter()
    model, lbfgs_trace = train_lbfgs(model, batch, cfg.lbfgs_iters, cfg.weights())
    t2 = time.perf_counter()
    save_checkpoint(model, out / f"{run_id}.ckpt")
    errors = sampled_errors(model, batch)
    nan = float("nan")
    report = RunReport(cfg.architecture, cfg.activation, False, cfg.seed, errors, nan, nan, t2 - t0,
                       {"adam": t1 - t0, "lbfgs": t2 - t1}, cfg.problem)
    adam_trace.to_csv(out / f"{run_id}_adam.csv")
    lbfgs_trace.to_csv(out / f"{run_id}_lbfgs.csv")
    _write_errors(out / f"{run_id}_errors.csv", errors)
    _write_json(out / f"{run_id}_report.json", _report_payload(report, {"lbfgs_warning": lbfgs_trace.warning}))
    return report


def _write_errors(path: Path, errors) -> None:
    with path.open("w") as fh:
        fh.write("task_id,error\n")
        for k, e in enumerate(errors):
            fh.write(f"{k + 1},{float(e)!r}\n")


def cmd_metric(cfg: ExperimentConfig, checkpoint) -> object:
    """n-width metric of a saved model; the checkpoint must match the config's architecture."""
    out = _out_dir(cfg)
    batch = sample_batch(cfg)
    model = load_checkpoint(checkpoint)
    # the analytic test double carries its own basis and skips the check
    if model.tag != "fixed_basis":
        check_architecture(model, build_model(cfg, batch).descriptor())
    family = batch.family
    basis = extract_basis(model, grid=batch.points, grid_shape=family.grid_shape)
    knw = compute_metric(basis, family, cfg.knw_config(), seed_stream(cfg.seed, STREAM_AGENTS))
    run_id = cfg.run_id
    _write_metric_outputs(out, run_id, basis, family, knw)
    with (out / f"{run_id}_knw.csv").open("w") as fh:
        fh.write("value_abs,value_rel," + ",".join(f"c_{k + 1}" for k in range(family.n_modes)) + "\n")
        fh.write(",".join(repr(float(v)) for v in (knw.value_abs, knw.value_rel, *knw.c_star)) + "\n")
    return knw


def cmd_regularize(cfg: ExperimentConfig) -> RunReport:
    """Full pipeline (regularized when ``cfg.regularize``) with every export."""
    out = _out_dir(cfg)
    res = run_experiment(cfg)
    run_id = cfg.run_id
    family = res.batch.family
    basis = extract_basis(res.model, grid=res.batch.points, grid_shape=family.grid_shape)
    save_checkpoint(res.model, out / f"{run_id}.ckpt")
    _write_metric_outputs(out, run_id, basis, family, res.pipeline.knw)
    export_violin([res.report], out / f"{run_id}_violin.csv")
    export_spectrum(svd_spectrum(basis), out / f"{run_id}_spectrum.csv")
    _write_json(out / f"{run_id}_report.json", _report_payload(res.report))
    return res.report


def _sweep_cell(cfg: ExperimentConfig, width: int, depth: int, epochs: int) -> RunReport:
    cell = replace(cfg, architecture="mh_pinn", activation="tanh", regularize=False, width=width, depth=depth,
                   lbfgs_iters=epochs)
    return run_experiment(cell).report


def cmd_sweep(cfg: ExperimentConfig, widths=(20, 40, 60), depths=(2, 3, 4), epochs=(1000, 3000, 5000)):
    """Width x depth x L-BFGS-iteration grid of MH-PINN(tanh) relative differences."""
    out = _out_dir(cfg)
    cells = sweep(partial(_sweep_cell, cfg), widths, depths, epochs, threads=cfg.threads)
    write_sweep_csv(cells, out / f"{cfg.problem}_sweep_s{cfg.seed}_sweep.csv")
    return cells


def cmd_svd(checkpoint, cfg: ExperimentConfig) -> np.ndarray:
    """Normalised singular values of a checkpoint's basis on the residual grid."""
    out = _out_dir(cfg)
    model = load_checkpoint(checkpoint)
    family = cfg.family()
    basis = extract_basis(model, grid=family.residual_points(), grid_shape=family.grid_shape)
    spectrum = svd_spectrum(basis)
    stem = Path(checkpoint).stem
    export_spectrum(spectrum, out / f"{stem}_spectrum.csv")
    return spectrum


def cmd_tasks(cfg: ExperimentConfig) -> TaskBatch:
    """Dump sampled coefficients and the manufactured solution/forcing pairs."""
    out = _out_dir(cfg)
    batch = sample_batch(cfg)
    stem = f"{cfg.problem}_tasks_s{cfg.seed}"
    write_tasks_csv(out / f"{stem}_tasks.csv", batch)
    write_solutions_csv(out / f"{stem}_solutions.csv", batch)
    return batch


def cmd_basis(checkpoint, cfg: ExperimentConfig) -> list[Path]:
    family = cfg.family()
    return export_basis_grids(checkpoint, family.residual_points(), _out_dir(cfg), Path(checkpoint).stem,
                              family.grid_shape)


# ---------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int)
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    for name in ("problem", "architecture", "activation"):
        common.add_argument(f"--{name.replace('_', '-')}", dest=name)
    common.add_argument("--regularize", action="store_true", default=None)

    parser = argparse.ArgumentParser(prog="piml-knw", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model without regularization")
    p = sub.add_parser("metric", parents=[common], help="n-width metric of a checkpoint")
    p.add_argument("checkpoint")
    sub.add_parser("regularize", parents=[common], help="full pipeline, regularized by default")
    p = sub.add_parser("sweep", parents=[common], help="width/depth/epoch sweep")
    p.add_argument("--widths", type=_int_list, default=(20, 40, 60))
    p.add_argument("--depths", type=_int_list, default=(2, 3, 4))
    p.add_argument("--epochs", type=_int_list, default=(1000, 3000, 5000))
    p = sub.add_parser("svd", parents=[common], help="singular-value spectrum of a checkpoint basis")
    p.add_argument("checkpoint")
    p.add_argument("--grids", action="store_true", help="also export one CSV grid per basis function")
    sub.add_parser("tasks", parents=[common], help="dump sampled tasks")
    return parser


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def resolve_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([f"--set {item!r}: expected KEY=VALUE"])
        overrides[key.strip()] = value
    for name in ("seed", "out", "threads", "problem", "architecture", "activation", "regularize"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if args.command == "regularize" and "regularize" not in overrides:
        if not (args.config and "regularize" in read_ini(args.config)):
            overrides["regularize"] = True
    return ExperimentConfig.load(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.print_config:
        sys.stdout.write(cfg.to_ini())
        return EXIT_OK
    _set_threads(cfg.threads)
    try:
        if args.command == "train":
            r = cmd_train(cfg)
            print(f"{cfg.run_id}: mean {r.mean:.4g} std {r.std:.4g} runtime {r.runtime:.1f}s")
        elif args.command == "metric":
            knw = cmd_metric(cfg, args.checkpoint)
            print(f"{cfg.run_id}: knw_abs {knw.value_abs:.4g} knw_rel {knw.value_rel:.4g}")
        elif args.command == "regularize":
            r = cmd_regularize(cfg)
            print(f"{cfg.run_id}: knw_rel {r.knw_rel:.4g} mean {r.mean:.4g} std {r.std:.4g} runtime {r.runtime:.1f}s")
        elif args.command == "sweep":
            cells = cmd_sweep(cfg, args.widths, args.depths, args.epochs)
            for c in cells:
                row = c.row()
                print(f"w={c.width} d={c.depth} e={c.epochs}: rel_diff {row['rel_diff']:.4g} {row['status']}")
        elif args.command == "svd":
            spectrum = cmd_svd(args.checkpoint, cfg)
            if args.grids:
                cmd_basis(args.checkpoint, cfg)
            print(" ".join(f"{s:.3e}" for s in spectrum))
        elif args.command == "tasks":
            batch = cmd_tasks(cfg)
            print(f"wrote {len(batch)} tasks to {cfg.out}")
    except (ConfigError, ContractError, ArchitectureMismatchError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, (NumericalError, ArithmeticError)):
            return EXIT_NUMERICAL
        if isinstance(exc.cause, OSError):
            return EXIT_IO
        if isinstance(exc.cause, (ConfigError, ContractError)):
            return EXIT_CONFIG
        raise
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
