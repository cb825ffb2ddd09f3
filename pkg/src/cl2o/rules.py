"""Convergent update-rule families and rollout execution.

Two families: the constant-stepsize full-gradient rule
``x+ = x - eta * grad f(x) + v`` (certified whenever 0 < eta < 1/beta and v
has finite energy) and the cyclic partial-gradient rule
``x+ = x - eta_e * (grad f_tau(x) + v)`` with tau = t mod M, e = floor(t/M)
and a square-summable but non-summable stepsize schedule.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .objectives import SmoothObjective, effective_beta
from .operators import DEGENERATE_DIRECTION, InnovationEngine, assemble_features

DIVERGENCE_NORM = 1e12


class CertificateError(Exception):
    """A configuration violates its convergence certificate."""


class RuleError(Exception):
    pass


# ---------------------------------------------------------------------------
# Stepsize schedules


@dataclass(frozen=True)
class StepsizeSchedule:
    """eta_e = eta0 / (e + 1)**p with p in (0.5, 1].

    The exponent range certifies analytically that the sequence is square
    summable while its partial sums diverge.
    """

    eta0: float
    p: float = 1.0

    def __post_init__(self):
        if self.eta0 <= 0:
            raise RuleError("eta0 must be positive")
        if not 0.5 < self.p <= 1.0:
            raise RuleError("exponent p must lie in (0.5, 1]")

    def eta(self, epoch):
        return self.eta0 / (epoch + 1.0) ** self.p


def schedule_energy(schedule: StepsizeSchedule, horizon):
    """Partial sums (sum eta_e^2, sum eta_e) over epochs 0..horizon-1."""
    if horizon < 1:
        raise RuleError("horizon must be >= 1")
    e = np.arange(horizon, dtype=np.float64)
    etas = schedule.eta0 / (e + 1.0) ** schedule.p
    return float(np.sum(etas * etas)), float(np.sum(etas))


# ---------------------------------------------------------------------------
# Innovation sources


def scaled_direction(magnitude, direction):
    """Vector along ``direction`` with exact magnitude ``magnitude``;
    degenerate directions (or zero magnitude) yield the zero vector."""
    nd = np.linalg.norm(ad.value_of(direction))
    if nd <= DEGENERATE_DIRECTION or ad.value_of(magnitude) == 0.0:
        return ad.zeros_like(direction)
    return direction * (magnitude / ad.norm(direction))


class SequenceInnovation:
    """Replays a precomputed v_t sequence, open loop (depends only on the
    impulse, never on the trajectory being generated)."""

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        self.values = values

    def start(self, x0, horizon):
        return 0

    def emit(self, state, *, x, grad, loss, prev_update, eta_epoch=None):
        t = state
        if t < self.values.shape[0]:
            v = self.values[t]
        else:
            v = np.zeros(self.values.shape[1])
        return v, None, t + 1


class LearnedInnovation:
    """Operator-backed innovation: |z_t| from the contracting recurrent map
    driven by the impulse, direction from the feature network."""

    def __init__(self, engine: InnovationEngine, theta: ad.ParamVector):
        self.engine = engine
        self.theta = theta

    def start(self, x0, horizon):
        return {
            "t": 0,
            "z_norms": self.engine.z_norm_schedule(self.theta, x0, horizon),
            "omega": self.engine.omega.bind(self.theta.unpack()),
        }

    def emit(self, state, *, x, grad, loss, prev_update, eta_epoch=None):
        t = state["t"]
        zn = state["z_norms"][t] if t < state["z_norms"].size else 0.0
        state = dict(state, t=t + 1)
        if zn == 0.0:
            return np.zeros_like(x), zn, state
        feat = assemble_features(x, grad, loss, prev_update)
        omega_t = self.engine.omega.forward(state["omega"], feat)
        magnitude = zn if self.engine.mode == "full" else eta_epoch * zn
        return scaled_direction(magnitude, omega_t), zn, state


# ---------------------------------------------------------------------------
# Rules


@dataclass
class FullGradientRule:
    """u_t = -eta * grad f(x_t) + v_t; vanilla gradient descent when the
    innovation source is None."""

    eta: float
    innovation: object | None = None

    def __post_init__(self):
        if self.eta <= 0:
            raise RuleError("stepsize must be positive")


@dataclass
class CyclicRule:
    """u_t = -eta_e * (grad f_tau(x_t) + v_t), tau = t mod M, e = floor(t/M)."""

    schedule: StepsizeSchedule
    innovation: object | None = None


def check_stepsize_certificate(rule: FullGradientRule, obj: SmoothObjective,
                               unsafe=False):
    beta = effective_beta(obj)
    if rule.eta >= 1.0 / beta and not unsafe:
        raise CertificateError(
            f"eta={rule.eta} violates eta < 1/beta = {1.0 / beta:.6g}; "
            "pass unsafe=True to run anyway")


# ---------------------------------------------------------------------------
# Rollout state and single steps


@dataclass
class RolloutState:
    t: int
    x: np.ndarray
    prev_update: np.ndarray | None = None
    innovation_state: object = None


@dataclass
class StepRecord:
    t: int
    g: np.ndarray          # gradient used by the update (component for cyclic)
    f: float               # objective estimate in force at step t
    v: np.ndarray
    u: np.ndarray
    eta: float
    component: int = -1
    z_norm: float | None = None


def _start_state(rule, obj, x0, horizon):
    x0 = ad.as_vector(x0, "x0")
    innov = rule.innovation.start(x0, horizon) if rule.innovation is not None else None
    return RolloutState(t=0, x=x0, prev_update=None, innovation_state=innov)


def _emit(rule, state, x, g, f_est, eta_epoch=None):
    if rule.innovation is None:
        return np.zeros_like(x), None, None
    v, zn, istate = rule.innovation.emit(
        state.innovation_state, x=x, grad=g, loss=f_est,
        prev_update=state.prev_update, eta_epoch=eta_epoch)
    return v, zn, istate


def step_full(rule: FullGradientRule, obj: SmoothObjective, state: RolloutState):
    """One full-gradient update; returns (next_state, record)."""
    x = state.x
    g = np.asarray(obj.grad(x))
    f = float(obj.eval(x))
    v, zn, istate = _emit(rule, state, x, g, f)
    u = -rule.eta * g + v
    nxt = RolloutState(t=state.t + 1, x=x + u, prev_update=u, innovation_state=istate)
    return nxt, StepRecord(state.t, g, f, v, u, rule.eta, z_norm=zn)


def step_cyclic(rule: CyclicRule, obj: SmoothObjective, state: RolloutState):
    """One cyclic partial-gradient update; returns (next_state, record)."""
    if not obj.components:
        raise RuleError("cyclic rule needs an objective with components")
    M = obj.n_components
    tau, epoch = state.t % M, state.t // M
    eta_e = rule.schedule.eta(epoch)
    comp = obj.components[tau]
    w = obj.component_weights[tau] if obj.component_weights else 1.0 / M
    x = state.x
    g = np.asarray(comp.grad(x))
    f_est = float(comp.eval(x)) / w
    v, zn, istate = _emit(rule, state, x, g, f_est, eta_epoch=eta_e)
    u = -eta_e * (g + v)
    nxt = RolloutState(t=state.t + 1, x=x + u, prev_update=u, innovation_state=istate)
    return nxt, StepRecord(state.t, g, f_est, v, u, eta_e, component=tau, z_norm=zn)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class Trajectory:
    """Closed-loop record of a rollout.

    ``xs[t+1] = xs[t] + us[t]`` exactly; ``gs``/``fs`` hold the gradient and
    objective estimate in force at each step (component quantities for
    cyclic runs, with full-gradient probes stored separately every M steps).
    Energies are running partial sums of |g_t|^2 and |u_t|^2.
    """

    kind: str
    xs: np.ndarray
    us: np.ndarray
    vs: np.ndarray
    gs: np.ndarray
    fs: np.ndarray
    diverged: bool = False
    components: np.ndarray | None = None
    etas: np.ndarray | None = None
    z_norms: np.ndarray | None = None
    probe_ts: np.ndarray | None = None
    probe_gs: np.ndarray | None = None
    grad_energy: np.ndarray = field(default=None)
    update_energy: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad_energy is None:
            self.grad_energy = np.cumsum(np.sum(self.gs * self.gs, axis=1))
        if self.update_energy is None:
            self.update_energy = np.cumsum(np.sum(self.us * self.us, axis=1))

    @property
    def steps(self):
        return self.us.shape[0]

    def probes(self):
        if self.probe_ts is None:
            return {}
        return {int(t): self.probe_gs[i] for i, t in enumerate(self.probe_ts)}

    def to_csv(self, path):
        rows = ["t,grad_norm,f,update_norm,innovation_norm,diverged"]
        T = self.steps
        for t in range(self.xs.shape[0]):
            gn = repr(float(np.linalg.norm(self.gs[t]))) if t < self.gs.shape[0] else ""
            fv = repr(float(self.fs[t])) if t < self.fs.shape[0] else ""
            un = repr(float(np.linalg.norm(self.us[t]))) if t < T else ""
            vn = repr(float(np.linalg.norm(self.vs[t]))) if t < T else ""
            flag = int(self.diverged and t == self.xs.shape[0] - 1)
            rows.append(f"{t},{gn},{fv},{un},{vn},{flag}")
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(rows) + "\n")

    def save(self, path):
        arrays = {"xs": self.xs, "us": self.us, "vs": self.vs,
                  "gs": self.gs, "fs": self.fs}
        for name in ("components", "etas", "z_norms", "probe_ts", "probe_gs"):
            val = getattr(self, name)
            if val is not None:
                arrays[name] = np.asarray(val, dtype=np.float64)
        header = {
            "kind": self.kind,
            "diverged": bool(self.diverged),
            "arrays": {k: list(v.shape) for k, v in arrays.items()},
            "order": sorted(arrays),
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(b"CL2O")
            fh.write(struct.pack("<HB", 1, 1))  # version, kind=trajectory
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for k in header["order"]:
                fh.write(arrays[k].astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != b"CL2O":
                raise RuleError(f"bad trajectory magic in {path}")
            version, kind = struct.unpack("<HB", fh.read(3))
            if version != 1 or kind != 1:
                raise RuleError(f"unsupported trajectory version/kind {version}/{kind}")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode())
            arrays = {}
            for k in header["order"]:
                shape = tuple(header["arrays"][k])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(8 * count)
                arrays[k] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        comp = arrays.get("components")
        return cls(
            kind=header["kind"], xs=arrays["xs"], us=arrays["us"], vs=arrays["vs"],
            gs=arrays["gs"], fs=arrays["fs"], diverged=header["diverged"],
            components=None if comp is None else comp.astype(int),
            etas=arrays.get("etas"), z_norms=arrays.get("z_norms"),
            probe_ts=None if "probe_ts" not in arrays else arrays["probe_ts"].astype(int),
            probe_gs=arrays.get("probe_gs"),
        )


def _is_divergent(x):
    return not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM


def rollout(rule, obj: SmoothObjective, x0, T, unsafe=False, probe_stop=None):
    """Run T steps and record the closed-loop trajectory.

    Cyclic runs additionally record a full-gradient probe every M steps
    (diagnostics only; the update never sees it).  A non-finite or huge
    iterate truncates the trajectory and sets the divergence flag, which
    certified configurations must never trip.
    """
    if T < 1:
        raise RuleError("T must be >= 1")
    cyclic = isinstance(rule, CyclicRule)
    if not cyclic:
        check_stepsize_certificate(rule, obj, unsafe=unsafe)
    if cyclic and not obj.components:
        raise RuleError("cyclic rollout needs an objective with components")
    M = obj.n_components if cyclic else 0

    d = obj.dim
    xs = np.zeros((T + 1, d))
    us = np.zeros((T, d))
    vs = np.zeros((T, d))
    gs = np.zeros((T + 1, d))
    fs = np.zeros(T + 1)
    comps = np.full(T + 1, -1, dtype=int) if cyclic else None
    etas = np.zeros(T) if cyclic else None
    z_norms = np.zeros(T) if rule.innovation is not None else None
    probe_ts, probe_gs = [], []

    state = _start_state(rule, obj, x0, T)
    xs[0] = state.x
    steps_done, diverged, stopped = 0, False, False
    step_fn = step_cyclic if cyclic else step_full

    for t in range(T):
        if _is_divergent(state.x):
            diverged = True
            break
        if cyclic and t % M == 0:
            probe = np.asarray(obj.grad(state.x))
            probe_ts.append(t)
            probe_gs.append(probe)
            if probe_stop is not None and np.linalg.norm(probe) <= probe_stop:
                stopped = True
                break
        state, rec = step_fn(rule, obj, state)
        us[t], vs[t], gs[t], fs[t] = rec.u, rec.v, rec.g, rec.f
        if cyclic:
            comps[t], etas[t] = rec.component, rec.eta
        if z_norms is not None and rec.z_norm is not None:
            z_norms[t] = rec.z_norm
        xs[t + 1] = state.x
        steps_done = t + 1

    n = steps_done
    if not diverged and not stopped:
        if _is_divergent(state.x):
            diverged = True
        else:
            # Terminal records so outer losses can weigh the final state.
            if cyclic:
                tau = n % M
                w = obj.component_weights[tau] if obj.component_weights else 1.0 / M
                gs[n] = np.asarray(obj.components[tau].grad(state.x))
                fs[n] = float(obj.components[tau].eval(state.x)) / w
                comps[n] = tau
                if n % M == 0:
                    probe_ts.append(n)
                    probe_gs.append(np.asarray(obj.grad(state.x)))
            else:
                gs[n] = np.asarray(obj.grad(state.x))
                fs[n] = float(obj.eval(state.x))

    tail = n + (0 if (diverged or stopped) else 1)
    return Trajectory(
        kind="cyclic" if cyclic else "full",
        xs=xs[: n + 1], us=us[:n], vs=vs[:n], gs=gs[:tail], fs=fs[:tail],
        diverged=diverged,
        components=None if comps is None else comps[:tail],
        etas=None if etas is None else etas[:n],
        z_norms=None if z_norms is None else z_norms[:n],
        probe_ts=np.asarray(probe_ts, dtype=int) if probe_ts else None,
        probe_gs=np.asarray(probe_gs) if probe_gs else None,
    )
