"""Adam and L-BFGS (strong-Wolfe line search), with ascent wrappers.

Objectives for L-BFGS are callables ``x -> (value, gradient)``.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ContractError, NumericalError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam descent step; returns new state and parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.isfinite(grads).all():
        raise NumericalError("non-finite gradient passed to Adam", "adam")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), new


def adam_ascent_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """Adam step that increases the objective (descent on its negation)."""
    return adam_step(state, params, -np.asarray(grads, dtype=np.float64))


@dataclass
class OptimTrace:
    iteration: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    n_evals: int = 0
    warning: bool = False
    message: str = ""

    def record(self, it: int, f: float, g: np.ndarray):
        self.iteration.append(int(it))
        self.objective.append(float(f))
        self.grad_norm.append(float(np.max(np.abs(g))) if g.size else 0.0)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "grad_norm"])
            for row in zip(self.iteration, self.objective, self.grad_norm):
                w.writerow([row[0], repr(row[1]), repr(row[2])])
        return path


def adam_minimize(fun: Callable, x0, epochs: int, lr: float = 1e-3, trace: OptimTrace | None = None,
                  ascend: bool = False) -> tuple[np.ndarray, OptimTrace]:
    """Run ``epochs`` full-batch Adam steps on ``fun: x -> (f, g)``."""
    x = np.array(x0, dtype=np.float64)
    state = AdamState.zeros(x.size, lr)
    trace = trace or OptimTrace()
    step = adam_ascent_step if ascend else adam_step
    for it in range(epochs):
        f, g = fun(x)
        trace.n_evals += 1
        trace.record(it, f, g)
        state, x = step(state, x, g)
    return x, trace


# ---------------------------------------------------------------------------
# L-BFGS


@dataclass
class LbfgsState:
    history: deque
    history_size: int = 20
    n_iter: int = 0
    c1: float = 1e-4
    c2: float = 0.9
    tol_grad: float = 1e-9

    @classmethod
    def fresh(cls, history_size: int = 20, c1: float = 1e-4, c2: float = 0.9, tol_grad: float = 1e-9) -> "LbfgsState":
        return cls(deque(maxlen=history_size), history_size, 0, c1, c2, tol_grad)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        sy = float(s @ y)
        if not sy > 1e-10 * float(y @ y):
            return False
        self.history.append((s, y, 1.0 / sy))
        return True

    def direction(self, g: np.ndarray) -> np.ndarray:
        """Two-loop recursion: -H g."""
        if not self.history:
            return -g
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.history):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        s, y, _ = self.history[-1]
        q *= float(s @ y) / float(y @ y)
        for (s, y, rho), a in zip(self.history, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q


def _cubic_interpolate(x1, f1, g1, x2, f2, g2, bounds=None):
    lo, hi = bounds if bounds is not None else (min(x1, x2), max(x1, x2))
    if not all(math.isfinite(v) for v in (f1, g1, f2, g2)) or x1 == x2:
        return 0.5 * (lo + hi)
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    d2_sq = d1 * d1 - g1 * g2
    if d2_sq >= 0.0:
        d2 = math.sqrt(d2_sq)
        if x1 <= x2:
            den = g2 - g1 + 2.0 * d2
            pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / den) if den != 0 else 0.5 * (lo + hi)
        else:
            den = g1 - g2 + 2.0 * d2
            pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / den) if den != 0 else 0.5 * (lo + hi)
        if not math.isfinite(pos):
            return 0.5 * (lo + hi)
        return min(max(pos, lo), hi)
    return 0.5 * (lo + hi)


def _safe_eval(fun, x):
    try:
        f, g = fun(x)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        if not (math.isfinite(f) and np.isfinite(g).all()):
            raise NumericalError("non-finite", "objective")
        return f, g
    except (NumericalError, FloatingPointError, OverflowError):
        return math.inf, np.full(np.shape(x), np.nan)


def strong_wolfe(fun, x, t, d, f, g, gtd, c1=1e-4, c2=0.9, tolerance_change=1e-12, max_ls=25):
    """Bracketing + zoom line search enforcing the strong Wolfe conditions.

    Returns ``(f_new, g_new, t, n_evals, satisfied)``.  When the conditions
    cannot be met the lowest point seen in the bracket is returned.
    """
    d_norm = float(np.max(np.abs(d)))
    f_new, g_new = _safe_eval(fun, x + t * d)
    evals = 1
    gtd_new = float(g_new @ d) if math.isfinite(f_new) else math.inf
    t_prev, f_prev, g_prev, gtd_prev = 0.0, f, g, gtd
    done = False
    ls_iter = 0
    bracket = bracket_f = bracket_g = bracket_gtd = None
    while ls_iter < max_ls:
        if f_new > f + c1 * t * gtd or (ls_iter > 1 and f_new >= f_prev) or not math.isfinite(f_new):
            bracket, bracket_f = [t_prev, t], [f_prev, f_new]
            bracket_g, bracket_gtd = [g_prev, g_new], [gtd_prev, gtd_new]
            break
        if abs(gtd_new) <= -c2 * gtd:
            bracket, bracket_f, bracket_g, bracket_gtd = [t], [f_new], [g_new], [gtd_new]
            done = True
            break
        if gtd_new >= 0:
            bracket, bracket_f = [t_prev, t], [f_prev, f_new]
            bracket_g, bracket_gtd = [g_prev, g_new], [gtd_prev, gtd_new]
            break
        lo, hi = t + 0.01 * (t - t_prev), t * 10.0
        tmp = t
        t = _cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, bounds=(lo, hi))
        t_prev, f_prev, g_prev, gtd_prev = tmp, f_new, g_new, gtd_new
        f_new, g_new = _safe_eval(fun, x + t * d)
        evals += 1
        gtd_new = float(g_new @ d) if math.isfinite(f_new) else math.inf
        ls_iter += 1
    if bracket is None:
        bracket, bracket_f, bracket_g, bracket_gtd = [0.0, t], [f, f_new], [g, g_new], [gtd, gtd_new]

    insuf_progress = False
    low, high = (0, 1) if bracket_f[0] <= bracket_f[-1] else (1, 0)
    while not done and ls_iter < max_ls:
        if abs(bracket[1] - bracket[0]) * d_norm < tolerance_change:
            break
        t = _cubic_interpolate(bracket[0], bracket_f[0], bracket_gtd[0], bracket[1], bracket_f[1], bracket_gtd[1])
        bmax, bmin = max(bracket), min(bracket)
        eps = 0.1 * (bmax - bmin)
        if min(bmax - t, t - bmin) < eps:
            if insuf_progress or t >= bmax or t <= bmin:
                t = bmax - eps if abs(t - bmax) < abs(t - bmin) else bmin + eps
                insuf_progress = False
            else:
                insuf_progress = True
        else:
            insuf_progress = False
        f_new, g_new = _safe_eval(fun, x + t * d)
        evals += 1
        gtd_new = float(g_new @ d) if math.isfinite(f_new) else math.inf
        ls_iter += 1
        if f_new > f + c1 * t * gtd or f_new >= bracket_f[low]:
            bracket[high], bracket_f[high], bracket_g[high], bracket_gtd[high] = t, f_new, g_new, gtd_new
            low, high = (0, 1) if bracket_f[0] <= bracket_f[1] else (1, 0)
        else:
            if abs(gtd_new) <= -c2 * gtd:
                done = True
            elif gtd_new * (bracket[high] - bracket[low]) >= 0:
                bracket[high], bracket_f[high] = bracket[low], bracket_f[low]
                bracket_g[high], bracket_gtd[high] = bracket_g[low], bracket_gtd[low]
            bracket[low], bracket_f[low], bracket_g[low], bracket_gtd[low] = t, f_new, g_new, gtd_new
    return bracket_f[low], bracket_g[low], bracket[low], evals, done


def lbfgs_minimize(fun: Callable, x0, max_iters: int = 5000, history_size: int = 20, c1: float = 1e-4,
                   c2: float = 0.9, tol_grad: float = 1e-9, max_ls: int = 25,
                   trace: OptimTrace | None = None) -> tuple[np.ndarray, OptimTrace]:
    """Limited-memory BFGS with a strong-Wolfe line search.

    Stops after ``max_iters`` outer iterations, when the gradient
    infinity-norm drops below ``tol_grad``, or when the line search cannot
    find any decrease (``trace.warning`` is then set).  Objective values in
    the trace never increase.
    """
    x = np.array(x0, dtype=np.float64)
    state = LbfgsState.fresh(history_size, c1, c2, tol_grad)
    trace = trace or OptimTrace()
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    if not (math.isfinite(f) and np.isfinite(g).all()):
        raise NumericalError("non-finite objective at the L-BFGS starting point", "objective")
    trace.n_evals += 1
    trace.record(0, f, g)
    if np.max(np.abs(g), initial=0.0) < tol_grad:
        trace.message = "gradient below tolerance"
        return x, trace
    for it in range(1, max_iters + 1):
        d = state.direction(g)
        gtd = float(g @ d)
        if not gtd < 0.0:
            state.history.clear()
            d = -g
            gtd = float(g @ d)
        t = min(1.0, 1.0 / float(np.sum(np.abs(g)))) if not state.history else 1.0
        f_new, g_new, t, evals, ok = strong_wolfe(fun, x, t, d, f, g, gtd, c1, c2, max_ls=max_ls)
        trace.n_evals += evals
        # near the optimum f can stall at round-off while the gradient still shrinks
        progress = f_new < f or (f_new == f and np.max(np.abs(g_new)) < np.max(np.abs(g)))
        if not progress:
            if state.history:
                # stale curvature pairs can give a poor direction; retry once along -g
                state.history.clear()
                continue
            trace.warning = True
            trace.message = "line search found no decrease"
            break
        s = t * d
        state.push(s, g_new - g)
        x = x + s
        f, g = f_new, g_new
        state.n_iter = it
        trace.record(it, f, g)
        if np.max(np.abs(g)) < tol_grad:
            trace.message = "gradient below tolerance"
            break
    else:
        trace.message = "max iterations reached"
    return x, trace


def lbfgs_maximize(fun: Callable, x0, **kwargs) -> tuple[np.ndarray, OptimTrace]:
    """Maximize by minimizing the negated objective."""

    def neg(x):
        f, g = fun(x)
        return -f, -np.asarray(g)

    return lbfgs_minimize(neg, x0, **kwargs)


def ascend(fun: Callable, x0, method: str = "adam", **kwargs) -> tuple[np.ndarray, OptimTrace]:
    """Gradient ascent on ``fun`` with either optimizer."""
    if method == "adam":
        def neg(x):
            f, g = fun(x)
            return -f, -np.asarray(g)

        return adam_minimize(neg, x0, **kwargs)
    if method == "lbfgs":
        return lbfgs_maximize(fun, x0, **kwargs)
    raise ContractError(f"unknown method {method!r}")
