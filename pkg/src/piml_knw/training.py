"""Plain physics-informed training: Adam warm-up followed by L-BFGS."""

from __future__ import annotations

from . import autodiff as ad
from .optim import OptimTrace, adam_minimize, lbfgs_minimize
from .problems import LossWeights, TaskBatch, as_batch, multitask_loss


def loss_function(model, batch: TaskBatch, weights: LossWeights = LossWeights()):
    """``x -> (loss, grad)`` for the multitask loss with parameters ``x``."""

    def fun(x):
        return ad.eval_and_grad(lambda p: multitask_loss(model, batch, weights, params=p).total, x)

    return fun


def train_adam(model, instances, epochs: int, lr: float = 1e-3, weights: LossWeights = LossWeights()):
    batch = as_batch(instances)
    x, trace = adam_minimize(loss_function(model, batch, weights), model.params.values, epochs, lr)
    return model.with_params(x), trace


def train_lbfgs(model, instances, max_iters: int, weights: LossWeights = LossWeights(), history_size: int = 20):
    batch = as_batch(instances)
    if max_iters <= 0:
        return model, OptimTrace(message="skipped")
    x, trace = lbfgs_minimize(loss_function(model, batch, weights), model.params.values, max_iters, history_size)
    return model.with_params(x), trace


def train_model(model, instances, adam_epochs: int = 1000, lbfgs_iters: int = 5000, lr: float = 1e-3,
                weights: LossWeights = LossWeights()):
    """Adam then L-BFGS; returns the trained model and both traces."""
    batch = as_batch(instances)
    model, adam_trace = train_adam(model, batch, adam_epochs, lr, weights)
    model, lbfgs_trace = train_lbfgs(model, batch, lbfgs_iters, weights)
    return model, adam_trace, lbfgs_trace
