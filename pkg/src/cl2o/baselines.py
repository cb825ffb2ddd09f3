"""Hand-crafted comparison optimizers and their tuning harness.

All methods are written as pure steps over caller-owned state so runs can be
paired exactly (same minibatch stream, same seeds) against the learned
rules.  Nesterov needs its gradient at a lookahead point, so the runner asks
``lookahead_point`` where to evaluate before calling ``baseline_step``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objectives import SmoothObjective
from .rules import DIVERGENCE_NORM, StepsizeSchedule, Trajectory

KINDS = ("gd", "sgd", "heavy-ball", "nag", "adam", "rmsprop")


class BaselineError(Exception):
    pass


@dataclass(frozen=True)
class BaselineOptimizer:
    """A named textbook method plus its hyperparameters.

    Defaults: momentum 0.9; adam beta1=0.9, beta2=0.999, eps=1e-8; rmsprop
    decay 0.99.  ``schedule`` (with ``steps_per_epoch``) makes sgd use the
    diminishing epoch-indexed stepsizes of the cyclic rule.
    """

    kind: str
    lr: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.99
    schedule: StepsizeSchedule | None = None
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BaselineError(f"unknown optimizer kind '{self.kind}' (use one of {KINDS})")
        if self.schedule is not None and self.steps_per_epoch is None:
            raise BaselineError("a schedule needs steps_per_epoch to index epochs")


def init_state(opt: BaselineOptimizer, dim):
    state = {"t": 0}
    if opt.kind in ("heavy-ball", "nag"):
        state["buf"] = np.zeros(dim)
    if opt.kind == "adam":
        state["m"] = np.zeros(dim)
        state["v"] = np.zeros(dim)
    if opt.kind == "rmsprop":
        state["s"] = np.zeros(dim)
    return state


def lookahead_point(opt: BaselineOptimizer, x, state):
    """Where the gradient for the next step must be evaluated."""
    if opt.kind == "nag":
        return x + opt.momentum * state["buf"]
    return x


def _step_lr(opt: BaselineOptimizer, t):
    if opt.kind == "sgd" and opt.schedule is not None:
        return opt.schedule.eta(t // opt.steps_per_epoch)
    return opt.lr


def baseline_step(opt: BaselineOptimizer, gradient, state):
    """One canonical update; returns (u_t, new_state)."""
    g = np.asarray(gradient, dtype=np.float64)
    t = state["t"]
    new = {"t": t + 1}
    if opt.kind in ("gd", "sgd"):
        u = -_step_lr(opt, t) * g
    elif opt.kind == "heavy-ball":
        u = -opt.lr * g + opt.momentum * state["buf"]
        new["buf"] = u
    elif opt.kind == "nag":
        u = opt.momentum * state["buf"] - opt.lr * g
        new["buf"] = u
    elif opt.kind == "adam":
        m = opt.beta1 * state["m"] + (1.0 - opt.beta1) * g
        v = opt.beta2 * state["v"] + (1.0 - opt.beta2) * g * g
        mhat = m / (1.0 - opt.beta1 ** (t + 1))
        vhat = v / (1.0 - opt.beta2 ** (t + 1))
        u = -opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
        new["m"], new["v"] = m, v
    else:  # rmsprop
        s = opt.rho * state["s"] + (1.0 - opt.rho) * g * g
        u = -opt.lr * g / (np.sqrt(s) + opt.eps)
        new["s"] = s
    return u, new


def baseline_rollout(opt: BaselineOptimizer, obj: SmoothObjective, x0, T,
                     use_components=False):
    """Run a baseline and record the same trajectory layout the learned
    rules produce.  ``gs``/``fs`` hold trajectory-point records (component
    estimates in minibatch mode); nag's lookahead gradient is consumed by
    the update but recorded separately only when it differs."""
    if use_components and not obj.components:
        raise BaselineError("use_components requires an objective with components")
    M = obj.n_components if use_components else 0
    d = obj.dim
    x = np.asarray(x0, dtype=np.float64).copy()
    state = init_state(opt, d)

    xs = np.zeros((T + 1, d))
    us = np.zeros((T, d))
    gs = np.zeros((T + 1, d))
    fs = np.zeros(T + 1)
    comps = np.full(T + 1, -1, dtype=int) if use_components else None
    xs[0] = x

    def grad_and_loss(point, t):
        if use_components:
            tau = t % M
            w = obj.component_weights[tau] if obj.component_weights else 1.0 / M
            return np.asarray(obj.components[tau].grad(point)), \
                float(obj.components[tau].eval(point)) / w, tau
        return np.asarray(obj.grad(point)), float(obj.eval(point)), -1

    steps_done, diverged = 0, False
    for t in range(T):
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            diverged = True
            break
        query = lookahead_point(opt, x, state)
        if query is x:
            g_algo, f_here, tau = grad_and_loss(x, t)
            g_record = g_algo
        else:
            g_algo, _, tau = grad_and_loss(query, t)
            g_record, f_here, _ = grad_and_loss(x, t)
        u, state = baseline_step(opt, g_algo, state)
        gs[t], fs[t], us[t] = g_record, f_here, u
        if use_components:
            comps[t] = tau
        x = x + u
        xs[t + 1] = x
        steps_done = t + 1

    n = steps_done
    if not diverged:
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            diverged = True
        else:
            gs[n], fs[n], tau = grad_and_loss(x, n)
            if use_components:
                comps[n] = tau

    tail = n + (0 if diverged else 1)
    return Trajectory(
        kind=f"baseline:{opt.kind}",
        xs=xs[: n + 1], us=us[:n], vs=np.zeros((n, d)),
        gs=gs[:tail], fs=fs[:tail], diverged=diverged,
        components=None if comps is None else comps[:tail],
    )


DEFAULT_GRID = tuple(np.logspace(-4, 0, 13))


def tune_learning_rate(kind, obj: SmoothObjective, grid=None, budget=100,
                       seeds=(0, 1, 2), init_sampler=None, use_components=False,
                       **hyper):
    """Pick the grid learning rate minimizing mean f(x_T) over the seed set.

    Diverged runs score +inf; ties resolve to the smaller rate.  Raises if
    every grid point diverges.
    """
    grid = sorted(DEFAULT_GRID) if grid is None else sorted(float(lr) for lr in grid)
    if not grid:
        raise BaselineError("learning-rate grid is empty")
    if init_sampler is None:
        init_sampler = lambda rng: rng.normal(size=obj.dim)
    x0s = [init_sampler(np.random.default_rng([seed])) for seed in seeds]

    best_lr, best_score = None, np.inf
    for lr in grid:
        opt = BaselineOptimizer(kind=kind, lr=float(lr), **hyper)
        scores = []
        for x0 in x0s:
            traj = baseline_rollout(opt, obj, x0, budget, use_components=use_components)
            if traj.diverged:
                scores.append(np.inf)
                continue
            final = float(obj.eval(traj.xs[-1]))
            scores.append(final if np.isfinite(final) else np.inf)
        score = float(np.mean(scores))
        if score < best_score:
            best_lr, best_score = float(lr), score
    if best_lr is None or not np.isfinite(best_score):
        raise BaselineError(f"every learning rate diverged on grid {list(grid)}")
    return best_lr
