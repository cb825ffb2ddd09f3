"""Executable convergence theory: square-sum diagnostics, the descent-lemma
energy bound as a runtime monitor, innovation reconstruction with
trajectory-equivalence replay, and the partial-gradient assumption probes.

All operations are pure reads over recorded trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objectives import SmoothObjective
from .rules import FullGradientRule, SequenceInnovation, Trajectory, rollout

# Empirical finite-energy compliance: tail share of the last 10% of steps.
TAIL_FRACTION_LIMIT = 1e-8


class ConvergenceLabError(Exception):
    pass


@dataclass
class ConvergenceReport:
    """Partial sums of gradient/update energies plus derived verdicts."""

    grad_partial_sums: np.ndarray
    update_partial_sums: np.ndarray
    grad_tail_fraction: float
    update_tail_fraction: float
    checks: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    @property
    def grad_energy(self):
        return float(self.grad_partial_sums[-1]) if self.grad_partial_sums.size else 0.0

    @property
    def update_energy(self):
        return float(self.update_partial_sums[-1]) if self.update_partial_sums.size else 0.0

    def flat(self):
        out = {"grad_energy": self.grad_energy,
               "update_energy": self.update_energy,
               "grad_tail_fraction": self.grad_tail_fraction,
               "update_tail_fraction": self.update_tail_fraction}
        out.update({f"check.{k}": v for k, v in self.checks.items()})
        out.update({f"const.{k}": v for k, v in self.constants.items()})
        return out


def _tail_fraction(partial):
    if partial.size == 0 or partial[-1] == 0.0:
        return 0.0
    cut = max(1, int(0.9 * partial.size))
    tail = partial[-1] - partial[cut - 1]
    return float(tail / partial[-1])


def _full_gradient_records(traj: Trajectory):
    if traj.kind == "cyclic":
        if traj.probe_ts is None:
            raise ConvergenceLabError(
                "cyclic trajectory has no full-gradient probes to diagnose")
        return traj.probe_gs
    return traj.gs


def square_sum_diagnostics(traj: Trajectory) -> ConvergenceReport:
    """Partial sums of |grad f(x_t)|^2 (native or probes) and |u_t|^2 with a
    Cauchy-tail estimate over the last 10% of the horizon."""
    g = _full_gradient_records(traj)
    grad_ps = np.cumsum(np.sum(g * g, axis=1))
    upd_ps = np.cumsum(np.sum(traj.us * traj.us, axis=1))
    gtail, utail = _tail_fraction(grad_ps), _tail_fraction(upd_ps)
    return ConvergenceReport(
        grad_partial_sums=grad_ps,
        update_partial_sums=upd_ps,
        grad_tail_fraction=gtail,
        update_tail_fraction=utail,
        checks={
            "not_diverged": not traj.diverged,
            "grad_tail_small": gtail <= TAIL_FRACTION_LIMIT,
            "update_tail_small": utail <= TAIL_FRACTION_LIMIT,
        },
    )


# ---------------------------------------------------------------------------
# Descent-lemma energy monitor


@dataclass
class Lemma1Report:
    lhs: float
    rhs: float
    holds: bool
    epsilon: float
    rho: float
    f_min_used: float
    f_min_surrogate: bool


def lemma1_monitor(traj: Trajectory, beta, eta, v_sequence=None, epsilon="auto",
                   f_min=None) -> Lemma1Report:
    """Check sum |grad|^2 <= (2 eps / rho)(f(x0) - f_min)
    + (eps / rho)(eps + 2 beta) sum |v_t|^2 with rho = 2 eta eps (1 - beta eta) - 1.

    Requires 0 < eta < 1/beta and eps above the threshold
    1 / (2 eta (1 - beta eta)); "auto" doubles the threshold.  When no lower
    bound is declared, the running minimum of the recorded objective values
    is used and flagged as a (stricter) surrogate.
    """
    if not 0 < eta < 1.0 / beta:
        raise ConvergenceLabError(f"monitor needs 0 < eta < 1/beta, got eta={eta}")
    threshold = 1.0 / (2.0 * eta * (1.0 - beta * eta))
    eps = 2.0 * threshold if epsilon == "auto" else float(epsilon)
    if eps <= threshold:
        raise ConvergenceLabError(
            f"epsilon must exceed the threshold {threshold:.6g}, got {eps}")
    rho = 2.0 * eta * eps * (1.0 - beta * eta) - 1.0

    vs = traj.vs if v_sequence is None else np.asarray(v_sequence, dtype=np.float64)
    v_energy = float(np.sum(vs * vs))
    surrogate = f_min is None
    f_min_used = float(np.min(traj.fs)) if surrogate else float(f_min)

    g = _full_gradient_records(traj)
    lhs = float(np.sum(g * g))
    rhs = (2.0 * eps / rho) * (float(traj.fs[0]) - f_min_used) \
        + (eps / rho) * (eps + 2.0 * beta) * v_energy
    return Lemma1Report(lhs=lhs, rhs=rhs, holds=lhs <= rhs, epsilon=eps, rho=rho,
                        f_min_used=f_min_used, f_min_surrogate=surrogate)


# ---------------------------------------------------------------------------
# Innovation reconstruction and replay equivalence


@dataclass
class ReconstructedInnovation:
    """V_t = eta * grad f(x_t) + u_t read off a recorded trajectory; replay
    is open loop (it depends only on the impulse, never on the new state)."""

    values: np.ndarray
    x0: np.ndarray
    eta: float

    @property
    def energy(self):
        return float(np.sum(self.values * self.values))

    def as_innovation(self):
        return SequenceInnovation(self.values)


def reconstruct_innovation(traj: Trajectory, eta) -> ReconstructedInnovation:
    """Read the innovation that makes the gradient-plus-innovation rule
    reproduce this trajectory."""
    if traj.kind == "cyclic":
        raise ConvergenceLabError(
            "reconstruction needs per-step full-gradient records")
    T = traj.steps
    if traj.gs.shape[0] < T:
        raise ConvergenceLabError("trajectory is missing gradient records")
    values = eta * traj.gs[:T] + traj.us
    return ReconstructedInnovation(values=values, x0=traj.xs[0].copy(), eta=float(eta))


def equivalence_test(source: Trajectory, recon: ReconstructedInnovation,
                     obj: SmoothObjective, eta, tol=1e-10):
    """Replay x+ = x - eta grad f(x) + V_t from the source's x0 and return
    max_t |x_replay - x_source| (per-step induction check)."""
    if abs(float(eta) - recon.eta) > 0:
        raise ConvergenceLabError("replay stepsize differs from reconstruction stepsize")
    rule = FullGradientRule(eta=float(eta), innovation=recon.as_innovation())
    replay = rollout(rule, obj, source.xs[0], source.steps, unsafe=True)
    n = min(replay.xs.shape[0], source.xs.shape[0])
    dev = np.linalg.norm(replay.xs[:n] - source.xs[:n], axis=1)
    return float(np.max(dev))


# ---------------------------------------------------------------------------
# Partial-gradient assumption probes


@dataclass
class AssumptionProbe:
    intercept: float          # fitted A in max_i |grad f_i| <= A + B |grad f|
    slope: float              # fitted B
    max_residual: float
    envelope_checked: bool = False
    envelope_holds: bool = False
    innovation_cap: float = 0.0   # C = max_t |z_t|


def theorem2_assumption_probe(obj: SmoothObjective, box, samples=200, seed=0,
                              traj: Trajectory | None = None) -> AssumptionProbe:
    """Least-squares fit of max_i |grad f_i(x)| against |grad f(x)| over
    sampled points, plus (optionally) the per-trajectory check that
    |v_t| <= eta_e * (C + 0 * |grad f|) with C = max_s |z_s|."""
    if not obj.components:
        raise ConvergenceLabError("assumption probe needs an objective with components")
    lo, hi = box if isinstance(box, tuple) else (-box, box)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (obj.dim,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (obj.dim,))
    rng = np.random.default_rng(seed)
    xs = lo + (hi - lo) * rng.random((samples, obj.dim))
    full = np.array([np.linalg.norm(np.asarray(obj.grad(x))) for x in xs])
    worst = np.array([
        max(np.linalg.norm(np.asarray(c.grad(x))) for c in obj.components)
        for x in xs
    ])
    design = np.stack([np.ones_like(full), full], axis=1)
    coef, *_ = np.linalg.lstsq(design, worst, rcond=None)
    residual = float(np.max(worst - design @ coef))
    probe = AssumptionProbe(intercept=float(coef[0]), slope=float(coef[1]),
                            max_residual=residual)
    if traj is not None and traj.z_norms is not None and traj.etas is not None:
        cap = float(np.max(traj.z_norms)) if traj.z_norms.size else 0.0
        vnorm = np.linalg.norm(traj.vs, axis=1)
        probe.envelope_checked = True
        probe.envelope_holds = bool(np.all(vnorm <= traj.etas * (cap + 1e-12)))
        probe.innovation_cap = cap
    return probe


def mstep_recursion_residual(traj: Trajectory, obj: SmoothObjective):
    """Per-epoch residual r_e = x_{t+M} - x_t + eta_e grad f(x_t) for every
    epoch start t; reports |r_e| / eta_e and an affine fit of it against
    |grad f(x_t)| (the implementable shadow of the M-step error analysis)."""
    if traj.kind != "cyclic":
        raise ConvergenceLabError("M-step residuals are defined for cyclic runs")
    probes = traj.probes()
    if not probes:
        raise ConvergenceLabError("trajectory has no full-gradient probes")
    M = obj.n_components
    ratios, grad_norms = [], []
    for t, g_full in sorted(probes.items()):
        if t + M > traj.steps:
            continue
        eta_e = float(traj.etas[t])
        # x_{t+M} - x_t as the recorded update sum (float-exact for M = 1).
        disp = traj.us[t]
        for i in range(1, M):
            disp = disp + traj.us[t + i]
        r = disp + eta_e * g_full
        ratios.append(np.linalg.norm(r) / eta_e)
        grad_norms.append(np.linalg.norm(g_full))
    ratios = np.array(ratios)
    grad_norms = np.array(grad_norms)
    fit = (0.0, 0.0)
    if ratios.size >= 2:
        design = np.stack([np.ones_like(grad_norms), grad_norms], axis=1)
        coef, *_ = np.linalg.lstsq(design, ratios, rcond=None)
        fit = (float(coef[0]), float(coef[1]))
    return {"ratios": ratios, "grad_norms": grad_norms,
            "fit_intercept": fit[0], "fit_slope": fit[1],
            "max_ratio": float(np.max(ratios)) if ratios.size else 0.0}
