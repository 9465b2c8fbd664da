"""Multitask physics-informed learning with a Kolmogorov n-width accuracy metric."""

from .analysis import RunReport, relative_l2, svd_spectrum
from .autodiff import ContractError, Jet2, NumericalError, ParameterVector, Tape, eval_and_grad, jet2_forward
from .experiment import ExperimentConfig, run_experiment
from .knwidth import KnwConfig, KnwResult, compute_metric, regularized_pipeline, tri_optimize, vertex_ls_oracle
from .models import (BasisMatrix, FixedBasisModel, MHPinnModel, MLPSpec, PiDonModel, extract_basis, load_checkpoint,
                     save_checkpoint)
from .problems import TaskFamily, sample_tasks

__version__ = "0.1.0"
