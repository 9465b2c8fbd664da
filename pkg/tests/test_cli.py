import subprocess
import sys

import numpy as np
import pytest

from piml_knw.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from piml_knw.experiment import ConfigError, ExperimentConfig
from piml_knw.models import FixedBasisModel, MHPinnModel, save_checkpoint
from piml_knw.problems import TaskFamily, sample_tasks

FAST = ["--set", "n_tasks=3", "--set", "adam_epochs=5", "--set", "lbfgs_iters=5", "--set", "epochs_bi=20",
        "--set", "epochs_tri_warmup=5", "--set", "width=6"]


class TestConfig:
    def test_defaults_match_benchmark_settings(self):
        cfg = ExperimentConfig()
        assert (cfg.width, cfg.depth, cfg.n_tasks) == (20, 2, 20)
        assert (cfg.lambda_r, cfg.lambda_b, cfg.lambda_k) == (1.0, 10.0, 10.0)
        assert (cfg.adam_epochs, cfg.lbfgs_iters, cfg.epochs_bi, cfg.epochs_tri_warmup) == (1000, 5000, 5000, 1000)
        assert cfg.family().residual_points().shape == (512, 1)
        assert ExperimentConfig(problem="allen_cahn2d").family().residual_points().shape == (2601, 2)

    def test_every_problem_listed(self):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig(n_tasks=0, width=0, activation="relu").validate()
        text = str(info.value)
        assert "n_tasks" in text and "width" in text and "activation" in text
        assert len(info.value.problems) >= 3

    def test_precedence(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[experiment]\nseed = 4\nn_tasks = 7\n")
        cfg = ExperimentConfig.load(ini, {"seed": "9"})
        assert cfg.seed == 9 and cfg.n_tasks == 7 and cfg.width == 20

    def test_unknown_key(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[experiment]\nbogus = 1\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(ini)

    def test_ini_round_trip(self):
        cfg = ExperimentConfig(problem="allen_cahn2d", seed=3, regularize=True, lr=5e-4)
        again = ExperimentConfig.from_mapping(_parse(cfg.to_ini()))
        assert again == cfg


def _parse(text):
    import configparser
    cp = configparser.ConfigParser()
    cp.read_string(text)
    return {k: v for s in cp.sections() for k, v in cp[s].items()}


class TestExitCodes:
    def test_zero_tasks(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "n_tasks=0"]) == EXIT_CONFIG

    def test_bad_set_syntax(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "n_tasks"]) == EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        assert main(["metric", str(tmp_path / "absent.ckpt"), "--out", str(tmp_path)]) == EXIT_IO

    def test_malformed_config(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("seed = 1\n")
        assert main(["train", "--config", str(ini)]) == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.ini")]) in (EXIT_CONFIG, EXIT_IO)

    def test_architecture_mismatch(self, tmp_path):
        model = MHPinnModel.create(1, 20, (8, 8), "tanh", np.random.default_rng(0))
        ckpt = save_checkpoint(model, tmp_path / "m.ckpt")
        assert main(["metric", str(ckpt), "--out", str(tmp_path), "--activation", "sine"]) == EXIT_CONFIG

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "piml_knw.cli", "train", "--out", str(tmp_path),
                               "--set", "n_tasks=0"], capture_output=True, text=True)
        assert proc.returncode == EXIT_CONFIG
        assert "n_tasks" in proc.stderr


class TestPrintConfig:
    def test_echo_round_trip(self, tmp_path, capsys):
        assert main(["tasks", "--print-config", "--seed", "5", "--out", str(tmp_path / "a"), *FAST]) == EXIT_OK
        first = capsys.readouterr().out
        ini = tmp_path / "resolved.ini"
        ini.write_text(first)
        assert main(["tasks", "--print-config", "--config", str(ini)]) == EXIT_OK
        assert capsys.readouterr().out == first

    def test_echo_reproduces_outputs(self, tmp_path, capsys):
        flags = ["--seed", "5", *FAST]
        assert main(["train", "--out", str(tmp_path / "a"), *flags]) == EXIT_OK
        capsys.readouterr()
        main(["train", "--print-config", "--out", str(tmp_path / "b"), *flags])
        ini = tmp_path / "resolved.ini"
        ini.write_text(capsys.readouterr().out)
        assert main(["train", "--config", str(ini)]) == EXIT_OK
        names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
        assert names
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestSubcommands:
    def test_metric_exact_basis(self, tmp_path, capsys):
        fam = TaskFamily("poisson1d")
        tasks = sample_tasks(fam, 2, 0)
        model = FixedBasisModel.create(fam, np.array([t.coefficients for t in tasks]))
        ckpt = save_checkpoint(model, tmp_path / "exact.ckpt")
        assert main(["metric", str(ckpt), "--out", str(tmp_path)]) == EXIT_OK
        cfg = ExperimentConfig()
        lines = (tmp_path / f"{cfg.run_id}_knw.csv").read_text().splitlines()
        assert lines[0] == "value_abs,value_rel,c_1,c_2,c_3,c_4,c_5"
        assert float(lines[1].split(",")[1]) <= 1e-3
        assert (tmp_path / f"{cfg.run_id}_metric.csv").read_text().startswith("epoch,objective,")
        assert (tmp_path / f"{cfg.run_id}_worstcase.csv").read_text().startswith("x,u_star,u_approx,error")

    def test_svd_width_20_2d(self, tmp_path, capsys):
        model = MHPinnModel.create(2, 3, (20, 20), "tanh", np.random.default_rng(0))
        ckpt = save_checkpoint(model, tmp_path / "ac.ckpt")
        assert main(["svd", str(ckpt), "--problem", "allen_cahn2d", "--out", str(tmp_path), "--grids"]) == EXIT_OK
        lines = (tmp_path / "ac_spectrum.csv").read_text().splitlines()
        assert len(lines) == 21
        assert float(lines[1].split(",")[1]) == 1.0
        assert len(list(tmp_path.glob("ac_basis_*.csv"))) == 20

    def test_tasks_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert main(["tasks", "--seed", "11", "--out", str(tmp_path / d)]) == EXIT_OK
        for name in ("poisson1d_tasks_s11_tasks.csv", "poisson1d_tasks_s11_solutions.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert len((tmp_path / "a" / "poisson1d_tasks_s11_tasks.csv").read_text().splitlines()) == 21

    def test_train_outputs(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), *FAST]) == EXIT_OK
        rid = ExperimentConfig(width=6).run_id
        for suffix in (".ckpt", "_adam.csv", "_lbfgs.csv", "_errors.csv", "_report.json"):
            assert (tmp_path / f"{rid}{suffix}").exists()
        assert len((tmp_path / f"{rid}_errors.csv").read_text().splitlines()) == 4

    def test_regularize_stage_timings(self, tmp_path):
        import json
        assert main(["regularize", "--out", str(tmp_path), *FAST]) == EXIT_OK
        rid = ExperimentConfig(regularize=True).run_id
        report = json.loads((tmp_path / f"{rid}_report.json").read_text())
        assert set(report["stage_timings"]) == {"tri_optimize", "metric_refine", "lbfgs", "metric"}
        assert len((tmp_path / f"{rid}_violin.csv").read_text().splitlines()) == 1 + 3 + 1
        for kind in ("metric", "worstcase", "spectrum"):
            assert (tmp_path / f"{rid}_{kind}.csv").exists()

    def test_lambda_zero_equals_train_then_metric(self, tmp_path):
        flags = [*FAST, "--set", "lambda_k=0"]
        assert main(["regularize", "--out", str(tmp_path / "r"), *flags]) == EXIT_OK
        assert main(["train", "--out", str(tmp_path / "t"), *flags]) == EXIT_OK
        plain = ExperimentConfig().run_id
        reg = ExperimentConfig(regularize=True).run_id
        assert main(["metric", str(tmp_path / "t" / f"{plain}.ckpt"), "--out", str(tmp_path / "t"), *flags]) == EXIT_OK
        assert (tmp_path / "r" / f"{reg}_metric.csv").read_bytes() == (tmp_path / "t" / f"{plain}_metric.csv").read_bytes()
        assert (tmp_path / "r" / f"{reg}.ckpt").read_bytes() == (tmp_path / "t" / f"{plain}.ckpt").read_bytes()

    def test_sweep_rows(self, tmp_path):
        argv = ["sweep", "--out", str(tmp_path), "--widths", "4,6", "--depths", "1", "--epochs", "3", *FAST]
        assert main(argv) == EXIT_OK
        lines = (tmp_path / "poisson1d_sweep_s0_sweep.csv").read_text().splitlines()
        assert lines[0] == "cell,width,depth,epochs,knw_rel,mean,std,rel_diff,status"
        assert len(lines) == 3

    def test_determinism_of_csv_outputs(self, tmp_path):
        for d in ("a", "b"):
            assert main(["regularize", "--threads", "1", "--out", str(tmp_path / d), *FAST]) == EXIT_OK
        names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
        assert len(names) >= 4
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
