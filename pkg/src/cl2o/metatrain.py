"""Outer training loop: estimate the expected weighted trajectory loss over
sampled problems and initializations, differentiate it through the unrolled
inner optimization, and update the innovation parameters.

The certificate of the inner rules holds at every parameter value, so no
safeguarding or early-stopping machinery is needed anywhere in this loop;
stopping after any epoch still yields a convergent optimizer.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baselines import BaselineOptimizer, baseline_step, init_state
from .objectives import (SmoothObjective, effective_beta, make_classifier_objective,
                         make_nonconvex_family, make_quadratic, shift_to_zero_minimum)
from .operators import InnovationEngine, assemble_features, innovation_batch, \
    innovation_full, save_checkpoint
from .rules import (CyclicRule, FullGradientRule, LearnedInnovation,
                    StepsizeSchedule, rollout)

log = logging.getLogger(__name__)


class MetaTrainError(Exception):
    pass


# ---------------------------------------------------------------------------
# Outer loss


@dataclass
class MetaLossConfig:
    """Horizon T plus nonnegative weights: sum_t alpha_t |grad f(x_t)|^2
    + gamma_t f(x_t).  Defaults: T = 50, alpha_t = 0,
    gamma_t = 0.95**(T - t)."""

    T: int = 50
    alphas: np.ndarray | None = None
    gammas: np.ndarray | None = None

    def __post_init__(self):
        if self.T < 1:
            raise MetaTrainError("horizon T must be >= 1")
        if self.alphas is None:
            self.alphas = np.zeros(self.T + 1)
        if self.gammas is None:
            self.gammas = 0.95 ** (self.T - np.arange(self.T + 1, dtype=np.float64))
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.gammas = np.asarray(self.gammas, dtype=np.float64)
        if self.alphas.shape != (self.T + 1,) or self.gammas.shape != (self.T + 1,):
            raise MetaTrainError("weight arrays must have length T + 1")
        if np.any(self.alphas < 0) or np.any(self.gammas < 0):
            raise MetaTrainError("weights must be nonnegative")

    @classmethod
    def default(cls, T=50, gamma_decay=0.95, alpha=0.0):
        ts = np.arange(T + 1, dtype=np.float64)
        return cls(T=T, alphas=np.full(T + 1, float(alpha)),
                   gammas=gamma_decay ** (T - ts))


def metaloss(config: MetaLossConfig, traj, obj: SmoothObjective) -> float:
    """Exact weighted sum over the recorded trajectory.

    For cyclic runs the per-step records are the minibatch estimates in
    force at step t (component values rescaled by their weights).
    """
    T = config.T
    if traj.xs.shape[0] < T + 1 or traj.fs.shape[0] < T + 1:
        raise MetaTrainError(
            f"trajectory too short for horizon {T}: {traj.xs.shape[0]} states, "
            f"{traj.fs.shape[0]} loss records")
    total = 0.0
    for t in range(T + 1):
        g = traj.gs[t]
        if traj.kind == "cyclic" and obj.component_weights is not None:
            g = g / obj.component_weights[int(traj.components[t])]
        total += config.alphas[t] * float(g @ g) + config.gammas[t] * float(traj.fs[t])
    return total


# ---------------------------------------------------------------------------
# Task distributions


def make_init_sampler(kind="uniform", scale=0.01, std=0.1):
    """Initial-point samplers: uniform entries in [0, scale] (default
    scale 0.01) or gaussian entries with standard deviation ``std``."""
    if kind == "uniform":
        return lambda rng, d: scale * rng.random(d)
    if kind == "gaussian":
        return lambda rng, d: std * rng.normal(size=d)
    raise MetaTrainError(f"unknown init sampler '{kind}'")


@dataclass
class TaskDistribution:
    """Objective sampler + initial-point sampler + inner-rule configuration.

    ``mode`` selects the rule family: "full" uses eta = eta_scale / beta,
    "cyclic" uses the diminishing schedule over the objective's components.
    """

    objective_sampler: callable
    init_sampler: callable
    episodes: int = 10
    mode: str = "full"
    eta_scale: float = 0.9
    schedule: StepsizeSchedule | None = None

    def sample(self, rng):
        obj = self.objective_sampler(rng)
        return obj, self.init_sampler(rng, obj.dim)

    def build_rule(self, obj, innovation=None):
        if self.mode == "full":
            return FullGradientRule(self.eta_scale / effective_beta(obj), innovation)
        if self.schedule is None:
            raise MetaTrainError("cyclic distribution needs a stepsize schedule")
        return CyclicRule(self.schedule, innovation)


def quadratic_mix_distribution(dim=5, condition_number=25.0, episodes=10,
                               eta_scale=0.9, init="gaussian", init_scale=1.0,
                               trig_fraction=0.5):
    """Random quadratics mixed with trig-perturbed quadratics, each shifted
    to have minimum value 0 so outer losses are comparable across draws."""

    def sample_objective(rng):
        inst_seed = int(rng.integers(2**32))
        if rng.random() < trig_fraction:
            obj = make_nonconvex_family(dim, "trig-perturbed-quadratic", inst_seed)
        else:
            obj = make_quadratic(dim, condition_number, inst_seed)
        return shift_to_zero_minimum(obj)

    if init == "gaussian":
        init_fn = lambda rng, d: init_scale * rng.normal(size=d)
    else:
        init_fn = lambda rng, d: init_scale * rng.random(d)
    return TaskDistribution(sample_objective, init_fn, episodes=episodes,
                            mode="full", eta_scale=eta_scale)


def classifier_distribution(dataset, activation="tanh", minibatch_size=128,
                            schedule=None, episodes=10, init="uniform",
                            init_scale=0.01, init_std=0.1):
    """Classifier training tasks: each episode reshuffles the minibatch
    partition once and samples fresh initial weights."""
    schedule = schedule or StepsizeSchedule(0.5, 1.0)

    def sample_objective(rng):
        return make_classifier_objective(
            dataset, activation=activation, minibatch_size=minibatch_size,
            seed=int(rng.integers(2**32)))

    return TaskDistribution(
        sample_objective, make_init_sampler(init, scale=init_scale, std=init_std),
        episodes=episodes, mode="cyclic", schedule=schedule)


# ---------------------------------------------------------------------------
# Differentiable unroll


def _unrolled_metaloss(engine: InnovationEngine, segments, obj, x0, dist,
                       config, full_unroll=True):
    z_layers, omega_bound = engine.bind(segments)
    z_state = engine.z_op.initial_state()
    zeros_in = np.zeros(engine.dim)
    cyclic = dist.mode == "cyclic"
    if cyclic:
        M = obj.n_components
        weights = obj.component_weights or [1.0 / M] * M
    else:
        eta = dist.eta_scale / effective_beta(obj)

    x, prev_u, total = np.asarray(x0, dtype=np.float64), None, 0.0
    for t in range(config.T):
        x_for_grad = ad.detach(x) if (not full_unroll and isinstance(x, ad.Var)) else x
        if cyclic:
            tau, epoch = t % M, t // M
            w = weights[tau]
            g = obj.components[tau].grad(x_for_grad)
            f_est = obj.components[tau].eval(x) * (1.0 / w)
            g_scale = 1.0 / w
        else:
            g = obj.grad(x_for_grad)
            f_est = obj.eval(x)
            g_scale = 1.0

        z_state, z_t = engine.z_op.step(z_layers, z_state, x0 if t == 0 else zeros_in)
        feat = assemble_features(x, g, f_est, prev_u)
        omega_t = engine.omega.forward(omega_bound, feat)
        if cyclic:
            eta_e = dist.schedule.eta(epoch)
            v = innovation_batch(z_t, omega_t, eta_e)
            u = (-eta_e) * (g + v)
        else:
            v = innovation_full(z_t, omega_t)
            u = (-eta) * g + v

        if config.alphas[t] != 0.0:
            total = total + config.alphas[t] * (g_scale * g_scale) * ad.dot(g, g)
        if config.gammas[t] != 0.0:
            total = total + config.gammas[t] * f_est
        x = x + u
        prev_u = u

    T = config.T
    if cyclic:
        tau = T % M
        w = weights[tau]
        g_final = obj.components[tau].grad(x)
        f_final = obj.components[tau].eval(x) * (1.0 / w)
        g_scale = 1.0 / w
    else:
        g_final = obj.grad(x)
        f_final = obj.eval(x)
        g_scale = 1.0
    if config.alphas[T] != 0.0:
        total = total + config.alphas[T] * (g_scale * g_scale) * ad.dot(g_final, g_final)
    if config.gammas[T] != 0.0:
        total = total + config.gammas[T] * f_final
    if not isinstance(total, ad.Var):
        raise MetaTrainError("outer loss does not depend on the parameters "
                             "(all effective weights zero?)")
    return total


def episode_metaloss_grad(engine, theta, obj, x0, dist, config, full_unroll=True):
    """(value, d value / d theta) for one episode via the unrolled tape."""

    def program(segments):
        return _unrolled_metaloss(engine, segments, obj, x0, dist, config,
                                  full_unroll=full_unroll)

    value, tape = ad.evaluate_with_tape(program, theta)
    return value, ad.reverse_gradient(tape).values


def episode_metaloss_value(engine, theta, obj, x0, dist, config):
    """Fast untaped episode loss via the recorded rollout."""
    rule = dist.build_rule(obj, LearnedInnovation(engine, theta))
    traj = rollout(rule, obj, x0, config.T)
    if traj.diverged:
        return np.inf, traj
    return metaloss(config, traj, obj), traj


def estimate_expected_metaloss(engine, theta, distribution, config, seed=0,
                               episode_seeds=None):
    """Arithmetic mean over episodes; episode seeds derive from the master
    seed by fixed splitting (or are given explicitly)."""
    if episode_seeds is None:
        if distribution.episodes < 1:
            raise MetaTrainError("need at least one episode")
        episode_seeds = [[seed, i] for i in range(distribution.episodes)]
    values = []
    for eseed in episode_seeds:
        obj, x0 = distribution.sample(np.random.default_rng(eseed))
        value, _ = episode_metaloss_value(engine, theta, obj, x0, distribution, config)
        values.append(value)
    return float(np.mean(values)), values


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochStats:
    epoch: int
    mean_metaloss: float
    grad_norm: float
    wall_time: float
    checkpoint: str = ""
    skipped: bool = False


@dataclass
class MetaTrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoints: list[ad.ParamVector] = field(default_factory=list)
    full_unroll: bool = True


def meta_train(engine: InnovationEngine, theta0: ad.ParamVector, distribution,
               config: MetaLossConfig, outer_lr=0.01, epochs=40, seed=0,
               jobs=1, checkpoint_dir=None, full_unroll=True):
    """Adam on theta over the expected unrolled loss; returns
    (theta_star, MetaTrainReport).

    Episodes within an epoch may run on a thread pool; the reduction order
    is fixed so parallel and serial runs produce identical numbers.  A
    non-finite meta-gradient skips the update (the previous theta stays
    valid) and training continues.
    """
    theta = theta0
    outer = BaselineOptimizer(kind="adam", lr=outer_lr)
    outer_state = init_state(outer, theta.dim)
    report = MetaTrainReport(full_unroll=full_unroll)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(epochs):
        start = time.perf_counter()
        tasks = []
        for i in range(distribution.episodes):
            obj, x0 = distribution.sample(np.random.default_rng([seed, epoch, i]))
            tasks.append((obj, x0))

        def run(task):
            obj, x0 = task
            return episode_metaloss_grad(engine, theta, obj, x0, distribution,
                                         config, full_unroll=full_unroll)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(run, tasks))
        else:
            results = [run(task) for task in tasks]

        values = np.array([r[0] for r in results])
        grads = np.stack([r[1] for r in results])
        mean_grad = grads.mean(axis=0)
        mean_value = float(values.mean())
        gnorm = float(np.linalg.norm(mean_grad))

        skipped = not np.all(np.isfinite(mean_grad))
        if skipped:
            log.warning("epoch %d: non-finite meta-gradient, skipping update", epoch)
        else:
            update, outer_state = baseline_step(outer, mean_grad, outer_state)
            theta = theta.with_values(theta.values + update)

        ckpt_path = ""
        if ckpt_dir:
            ckpt_path = str(ckpt_dir / f"epoch_{epoch:04d}.ckpt")
            save_checkpoint(ckpt_path, theta, meta=engine.describe())
        report.checkpoints.append(theta)
        report.epochs.append(EpochStats(
            epoch=epoch, mean_metaloss=mean_value, grad_norm=gnorm,
            wall_time=time.perf_counter() - start, checkpoint=ckpt_path,
            skipped=skipped))
    return theta, report
