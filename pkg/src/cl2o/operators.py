"""Learnable innovation machinery.

A stacked contracting recurrent operator whose output has finite energy for
*every* parameter value, a feature MLP that picks the innovation direction,
and the magnitude-capped combinators that splice both into an update.
Contraction is enforced by construction: each layer's effective recurrence
is gamma * A_raw / (1 + ||A_raw||_F), whose spectral norm is < gamma for any
raw matrix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AutodiffError, ParamVector

DEGENERATE_DIRECTION = 1e-12
# Below this state norm the impulse response is numerically dead; the
# remaining tail is exactly zero (deterministic underflow guard).
_DEAD_STATE = 1e-250

_ACTIVATIONS = {"tanh": ad.tanh, "identity": lambda x: x}


@dataclass(frozen=True)
class ImpulseSignal:
    """The sequence (x0, 0, 0, ...); its energy is |x0|^2."""

    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x0", ad.as_vector(self.x0, "impulse"))

    def at(self, t):
        return self.x0 if t == 0 else np.zeros_like(self.x0)

    @property
    def energy(self):
        return float(self.x0 @ self.x0)


class ContractingRecurrentOperator:
    """Stacked recurrent layers, each certified to contract with factor gamma.

    Layer k maps (state h_k, input xi_k) to tanh(A_eff h_k + B xi_k + b) and
    emits C h_k+, which feeds the next layer; the final emit is the operator
    output.  The trainable parameters (A_raw, B, C per layer) are
    unconstrained; biases are kept at zero so the zero-input response is
    identically zero, which is what makes the impulse response summable for
    every parameter draw.  A non-trainable bias can still be supplied for
    step-level experiments.
    """

    def __init__(self, in_dim, out_dim, state_dim=3, depth=3, gamma=0.95,
                 activation="tanh", bias=None, prefix="z"):
        if not 0.0 < gamma < 1.0:
            raise AutodiffError("contraction factor must lie in (0, 1)")
        if activation not in _ACTIVATIONS:
            raise AutodiffError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.state_dim = int(state_dim)
        self.depth = int(depth)
        self.gamma = float(gamma)
        self.activation = activation
        self.prefix = prefix
        self.bias = None if bias is None else np.broadcast_to(
            np.asarray(bias, dtype=np.float64), (self.depth, self.state_dim)).copy()

    def layer_dims(self, k):
        inp = self.in_dim if k == 0 else self.state_dim
        out = self.out_dim if k == self.depth - 1 else self.state_dim
        return inp, out

    def segment_shapes(self):
        shapes = {}
        for k in range(self.depth):
            inp, out = self.layer_dims(k)
            shapes[f"{self.prefix}{k}.A"] = (self.state_dim, self.state_dim)
            shapes[f"{self.prefix}{k}.B"] = (self.state_dim, inp)
            shapes[f"{self.prefix}{k}.C"] = (out, self.state_dim)
        return shapes

    def init_segments(self, rng):
        segs = {}
        for name, shape in self.segment_shapes().items():
            kind = name.split(".")[-1]
            scale = {"A": 1.0, "B": 1.0 / np.sqrt(shape[1]), "C": 0.1 / np.sqrt(shape[1])}[kind]
            segs[name] = scale * rng.normal(size=shape)
        return segs

    def effective_recurrence(self, A_raw):
        return A_raw * (self.gamma / (1.0 + ad.norm(A_raw)))

    def bind(self, segments):
        """Materialize per-layer (A_eff, B, C) from flat segments (arrays or
        tape Vars); do this once per rollout and reuse across steps."""
        layers = []
        for k in range(self.depth):
            inp, out = self.layer_dims(k)
            n = self.state_dim
            A = ad.reshape(segments[f"{self.prefix}{k}.A"], (n, n))
            B = ad.reshape(segments[f"{self.prefix}{k}.B"], (n, inp))
            C = ad.reshape(segments[f"{self.prefix}{k}.C"], (out, n))
            layers.append((self.effective_recurrence(A), B, C))
        return layers

    def initial_state(self):
        return [np.zeros(self.state_dim) for _ in range(self.depth)]

    def step(self, layers, state, inp):
        """One recurrent update through all layers: (new_state, output)."""
        if np.shape(ad.value_of(inp)) != (self.in_dim,):
            raise AutodiffError(
                f"operator input must have shape ({self.in_dim},), "
                f"got {np.shape(ad.value_of(inp))}")
        act = _ACTIVATIONS[self.activation]
        new_state, signal = [], inp
        for k, (A, B, C) in enumerate(layers):
            pre = A @ state[k] + B @ signal
            if self.bias is not None:
                pre = pre + self.bias[k]
            h = act(pre)
            new_state.append(h)
            signal = C @ h
        return new_state, signal

    def impulse_response(self, segments, x0, horizon):
        """Outputs z_0..z_{horizon-1} for the impulse input (numpy only)."""
        layers = self.bind(segments)
        state = self.initial_state()
        x0 = ad.as_vector(x0, "impulse")
        zeros = np.zeros(self.in_dim)
        out = np.zeros((horizon, self.out_dim))
        for t in range(horizon):
            state, z = self.step(layers, state, x0 if t == 0 else zeros)
            out[t] = z
            if t > 0 and max(np.abs(h).max(initial=0.0) for h in state) < _DEAD_STATE:
                break  # remaining tail is exactly zero
        return out


def z_step(op: ContractingRecurrentOperator, segments, state, inp):
    """Single recurrent update; state must start at zero for t = 0."""
    return op.step(op.bind(segments), state, inp)


def spectral_norm_power(A, iterations=200, seed=0):
    """Power-iteration estimate of the largest singular value."""
    A = np.asarray(A, dtype=np.float64)
    v = np.random.default_rng(seed).normal(size=A.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(np.linalg.norm(A @ v))


class FeatureNetwork:
    """MLP with 2 hidden (tanh) layers mapping the feature vector to a
    direction proposal in objective space."""

    def __init__(self, in_dim, out_dim, hidden=16, prefix="omega"):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = int(hidden)
        self.prefix = prefix

    def segment_shapes(self):
        h, f, d = self.hidden, self.in_dim, self.out_dim
        p = self.prefix
        return {
            f"{p}.W1": (h, f), f"{p}.b1": (h,),
            f"{p}.W2": (h, h), f"{p}.b2": (h,),
            f"{p}.W3": (d, h), f"{p}.b3": (d,),
        }

    def init_segments(self, rng):
        segs = {}
        for name, shape in self.segment_shapes().items():
            if name.endswith(("b1", "b2", "b3")):
                segs[name] = np.zeros(shape)
            else:
                segs[name] = rng.normal(size=shape) / np.sqrt(shape[1])
        return segs

    def bind(self, segments):
        p = self.prefix
        shapes = self.segment_shapes()
        return {k.split(".")[1]: ad.reshape(segments[k], shapes[k]) for k in shapes}

    def forward(self, bound, features):
        h1 = ad.tanh(bound["W1"] @ features + bound["b1"])
        h2 = ad.tanh(bound["W2"] @ h1 + bound["b2"])
        return bound["W3"] @ h2 + bound["b3"]


# ---------------------------------------------------------------------------
# Innovation combinators


def innovation_full(z_t, omega_t):
    """v = |z| * omega / |omega|; zero when the direction is degenerate.

    The returned magnitude equals |z_t| to machine precision, which is what
    keeps the full-gradient update square-sum convergent.
    """
    zv, wv = ad.value_of(z_t), ad.value_of(omega_t)
    if zv.shape != wv.shape:
        raise AutodiffError(f"innovation dims differ: {zv.shape} vs {wv.shape}")
    if np.linalg.norm(wv) <= DEGENERATE_DIRECTION or np.linalg.norm(zv) == 0.0:
        return ad.zeros_like(omega_t)
    return omega_t * (ad.norm(z_t) / ad.norm(omega_t))


def innovation_batch(z_t, omega_t, eta_epoch):
    """v = eta_epoch * |z| * omega / |omega| (partial-gradient variant).

    Satisfies |v_t| <= eta_epoch * max_s |z_s| with zero slope in |grad f|.
    """
    if ad.value_of(eta_epoch) <= 0:
        raise AutodiffError("epoch stepsize must be positive")
    zv, wv = ad.value_of(z_t), ad.value_of(omega_t)
    if zv.shape != wv.shape:
        raise AutodiffError(f"innovation dims differ: {zv.shape} vs {wv.shape}")
    if np.linalg.norm(wv) <= DEGENERATE_DIRECTION or np.linalg.norm(zv) == 0.0:
        return ad.zeros_like(omega_t)
    return omega_t * (eta_epoch * ad.norm(z_t) / ad.norm(omega_t))


def feature_length(dim):
    # current x, current (partial) gradient, previous update, scalar loss
    return 3 * dim + 1


def assemble_features(x, grad, loss, prev_update=None):
    """Window-1 feature vector [x, grad, loss, u_prev]; missing history is
    zero-padded (t = 0 has no previous update)."""
    if prev_update is None:
        prev_update = np.zeros_like(ad.value_of(x))
    loss_part = ad.reshape(loss, (1,)) if isinstance(loss, ad.Var) else np.atleast_1d(
        np.asarray(loss, dtype=np.float64))
    return ad.concat([x, grad, loss_part, prev_update])


class InnovationEngine:
    """Z + Omega + combinator for one objective dimension.

    mode "full": v_t = |z_t| * unit(omega_t)           (constant-stepsize rule)
    mode "batch": v_t = eta_e * |z_t| * unit(omega_t)  (cyclic rule)
    Z is driven by the impulse (x0, 0, 0, ...) only.
    """

    def __init__(self, dim, mode="full", state_dim=3, depth=3, gamma=0.95,
                 omega_hidden=16):
        if mode not in ("full", "batch"):
            raise AutodiffError("mode must be 'full' or 'batch'")
        self.dim = int(dim)
        self.mode = mode
        self.z_op = ContractingRecurrentOperator(
            in_dim=dim, out_dim=dim, state_dim=state_dim, depth=depth, gamma=gamma)
        self.omega = FeatureNetwork(feature_length(dim), dim, hidden=omega_hidden)

    def segment_shapes(self):
        shapes = dict(self.z_op.segment_shapes())
        shapes.update(self.omega.segment_shapes())
        return shapes

    def init_params(self, seed=0) -> ParamVector:
        rng = np.random.default_rng(seed)
        segs = dict(self.z_op.init_segments(rng))
        segs.update(self.omega.init_segments(rng))
        # The scalar loss feature is much larger than the state/gradient
        # entries; damp its first-layer column so tanh units start unsaturated.
        W1 = segs["omega.W1"].reshape(self.omega.hidden, self.omega.in_dim)
        W1[:, 2 * self.dim] *= 0.1
        segs["omega.W1"] = W1
        return ParamVector.from_segments(segs)

    def describe(self):
        return {
            "dim": self.dim, "mode": self.mode,
            "state_dim": self.z_op.state_dim, "depth": self.z_op.depth,
            "gamma": self.z_op.gamma, "omega_hidden": self.omega.hidden,
        }

    def z_norm_schedule(self, theta: ParamVector, x0, horizon):
        """Precomputed |z_t| for t < horizon (numpy fast path)."""
        resp = self.z_op.impulse_response(theta.unpack(), x0, horizon)
        pad = np.zeros(horizon)
        pad[: resp.shape[0]] = np.linalg.norm(resp, axis=1)
        return pad

    def bind(self, segments):
        return self.z_op.bind(segments), self.omega.bind(segments)


# ---------------------------------------------------------------------------
# Parameter checkpoints: magic + version, a JSON header recording the
# architecture (state dim, depth, gamma, feature layout) and the
# named-segment table, then the raw little-endian float64 values.

CHECKPOINT_MAGIC = b"CL2O"
CHECKPOINT_VERSION = 1
_KIND_CHECKPOINT = 2


def save_checkpoint(path, theta: ParamVector, meta=None):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "layout": {k: list(v) for k, v in theta.layout.items()},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HB", CHECKPOINT_VERSION, _KIND_CHECKPOINT))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(theta.values.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (theta, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise AutodiffError(f"bad checkpoint magic {magic!r} in {path}")
        version, kind = struct.unpack("<HB", fh.read(3))
        if version != CHECKPOINT_VERSION or kind != _KIND_CHECKPOINT:
            raise AutodiffError(f"unsupported checkpoint version/kind {version}/{kind}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        values = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    layout = {k: tuple(v) for k, v in header["layout"].items()}
    return ParamVector(values, layout), header.get("meta", {})
