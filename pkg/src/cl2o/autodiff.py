"""Dense float64 numerics plus a reverse-mode automatic differentiation tape.

Every primitive application on tracked data is appended to a ``Tape``; node
values are numpy arrays (scalars are 0-d).  Construction order is a
topological order, so a single reverse sweep accumulates the gradient of a
scalar output with respect to the flat parameter vector the tape was opened
with.  The same primitives are exposed as polymorphic module functions that
fall back to plain numpy when no tape variable is involved, so numerical
code can be written once and run both in fast (untaped) and differentiable
mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Opcodes understood by the engine.  Programs handed to evaluate_with_tape
# must be composed of these (plus Var arithmetic, which lowers to them).
PRIMITIVES = (
    "add", "sub", "neg", "mul", "div", "matmul", "transpose", "reshape",
    "slice", "concat", "tanh", "sigmoid", "relu", "exp", "log", "sin",
    "cos", "norm", "sum", "max", "softmax", "softmax-cross-entropy",
    "detach",
)


class AutodiffError(Exception):
    """Malformed program, tape or parameter layout."""


class NonFiniteError(AutodiffError):
    """A primitive produced a NaN/Inf value; names the op and node index."""


def as_vector(x, name="vector"):
    """Validate and return a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise AutodiffError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise AutodiffError(f"{name} contains non-finite entries")
    return v


# ---------------------------------------------------------------------------
# Parameter vectors


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector with a named-segment table.

    ``layout`` maps segment names to half-open index ranges which must be
    disjoint and cover [0, len) exactly; pack/unpack round-trips are the
    identity.
    """

    values: np.ndarray
    layout: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        v = as_vector(self.values, "ParamVector values")
        object.__setattr__(self, "values", v)
        layout = dict(self.layout) or {"params": (0, v.size)}
        object.__setattr__(self, "layout", layout)
        spans = sorted(layout.items(), key=lambda kv: kv[1][0])
        cursor = 0
        for name, (a, b) in spans:
            if a != cursor or b < a:
                raise AutodiffError(
                    f"segment table must partition [0, {v.size}); "
                    f"'{name}' spans [{a}, {b}) after covering [0, {cursor})")
            cursor = b
        if cursor != v.size:
            raise AutodiffError(
                f"segment table covers [0, {cursor}) but vector has {v.size} entries")

    @classmethod
    def from_segments(cls, segments):
        """Pack an ordered mapping name -> array into one flat vector."""
        layout, chunks, cursor = {}, [], 0
        for name, arr in segments.items():
            flat = np.asarray(arr, dtype=np.float64).reshape(-1)
            layout[name] = (cursor, cursor + flat.size)
            chunks.append(flat)
            cursor += flat.size
        vals = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(vals, layout)

    @property
    def dim(self):
        return self.values.size

    def segment(self, name):
        a, b = self.layout[name]
        return self.values[a:b]

    def unpack(self):
        return {name: self.segment(name) for name in self.layout}

    def with_values(self, values):
        return ParamVector(np.asarray(values, dtype=np.float64), dict(self.layout))


# ---------------------------------------------------------------------------
# Tape and variables


class _Node:
    __slots__ = ("op", "value", "parents", "vjp", "track")

    def __init__(self, op, value, parents, vjp, track):
        self.op = op
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.track = track


class Var:
    """Handle to a tape node; supports numpy-style arithmetic."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators
    __array_priority__ = 1000.0

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(node={self.index}, value={self.value!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)


class ComputationTape:
    """Append-only record of primitive applications.

    Nodes reference only earlier nodes, so one reverse pass visits each node
    exactly once.  A tape is a single-threaded object; distinct tapes may be
    used on distinct threads.
    """

    def __init__(self):
        self.nodes = []
        self.outputs = []
        self.input_index = None
        self.input_layout = None

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, value, parents=(), vjp=None, track=True):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(
                f"primitive '{op}' produced a non-finite value at node {len(self.nodes)}")
        self.nodes.append(_Node(op, value, parents, vjp, track))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, layout=None):
        value = np.asarray(value, dtype=np.float64)
        var = self._push("leaf", value)
        if self.input_index is None:
            self.input_index = var.index
            self.input_layout = layout
        return var

    def constant(self, value):
        return self._push("const", value, track=False)

    def mark_output(self, var):
        self.outputs.append(var.index)

    def backward(self, output_index, seed=1.0):
        """Reverse sweep from one node; returns per-node gradient list."""
        nodes = self.nodes
        grads = [None] * len(nodes)
        grads[output_index] = np.broadcast_to(
            np.asarray(seed, dtype=np.float64), nodes[output_index].value.shape
        ).copy()
        for i in range(output_index, -1, -1):
            g = grads[i]
            node = nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, contrib, where in node.vjp(g):
                if grads[parent] is None:
                    grads[parent] = np.zeros_like(nodes[parent].value)
                if where is None:
                    grads[parent] += contrib
                else:
                    grads[parent][where] += contrib
        return grads


# Backwards-friendly alias; a tape is the only tape-like object there is.
Tape = ComputationTape


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise AutodiffError("operands belong to different tapes")
            tape = a.tape
    return tape


def _val(x):
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _idx(x):
    return x.index if isinstance(x, Var) and x.tape.nodes[x.index].track else None


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` (reverse of numpy broadcasting)."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _push_op(tape, op, value, srcs):
    """srcs: (node_index, grad_fn, where) triples for tracked parents only."""
    if not srcs:
        return tape._push(op, value, track=False)

    def vjp(g, _srcs=tuple(srcs)):
        return [(i, fn(g) if fn is not None else g, w) for i, fn, w in _srcs]

    return tape._push(op, value, tuple(i for i, _, _ in srcs), vjp)


# ---------------------------------------------------------------------------
# Primitives (polymorphic: numpy fast path when no Var operand)


def add(x, y):
    t = _tape_of(x, y)
    if t is None:
        return np.add(_val(x), _val(y))
    xv, yv = _val(x), _val(y)
    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), lambda g, s=xv.shape: _unbroadcast(g, s), None))
    if _idx(y) is not None:
        srcs.append((_idx(y), lambda g, s=yv.shape: _unbroadcast(g, s), None))
    return _push_op(t, "add", xv + yv, srcs)


def sub(x, y):
    t = _tape_of(x, y)
    if t is None:
        return np.subtract(_val(x), _val(y))
    xv, yv = _val(x), _val(y)
    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), lambda g, s=xv.shape: _unbroadcast(g, s), None))
    if _idx(y) is not None:
        srcs.append((_idx(y), lambda g, s=yv.shape: -_unbroadcast(g, s), None))
    return _push_op(t, "sub", xv - yv, srcs)


def neg(x):
    t = _tape_of(x)
    if t is None:
        return -_val(x)
    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), lambda g: -g, None))
    return _push_op(t, "neg", -_val(x), srcs)


def mul(x, y):
    t = _tape_of(x, y)
    if t is None:
        return np.multiply(_val(x), _val(y))
    xv, yv = _val(x), _val(y)
    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), lambda g, o=yv, s=xv.shape: _unbroadcast(g * o, s), None))
    if _idx(y) is not None:
        srcs.append((_idx(y), lambda g, o=xv, s=yv.shape: _unbroadcast(g * o, s), None))
    return _push_op(t, "mul", xv * yv, srcs)


def div(x, y):
    t = _tape_of(x, y)
    if t is None:
        return np.divide(_val(x), _val(y))
    xv, yv = _val(x), _val(y)
    out = xv / yv
    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), lambda g, o=yv, s=xv.shape: _unbroadcast(g / o, s), None))
    if _idx(y) is not None:
        srcs.append((_idx(y),
                     lambda g, a=xv, o=yv, s=yv.shape: _unbroadcast(-g * a / (o * o), s),
                     None))
    return _push_op(t, "div", out, srcs)


def matmul(x, y):
    t = _tape_of(x, y)
    if t is None:
        return np.matmul(_val(x), _val(y))
    a, b = _val(x), _val(y)
    out = a @ b
    srcs = []
    if a.ndim == 2 and b.ndim == 2:
        da = lambda g, o=b: g @ o.T
        db = lambda g, o=a: o.T @ g
    elif a.ndim == 2 and b.ndim == 1:
        da = lambda g, o=b: np.outer(g, o)
        db = lambda g, o=a: o.T @ g
    elif a.ndim == 1 and b.ndim == 2:
        da = lambda g, o=b: o @ g
        db = lambda g, o=a: np.outer(o, g)
    elif a.ndim == 1 and b.ndim == 1:
        da = lambda g, o=b: g * o
        db = lambda g, o=a: g * o
    else:
        raise AutodiffError(f"matmul supports 1-D/2-D operands, got {a.ndim}-D @ {b.ndim}-D")
    if _idx(x) is not None:
        srcs.append((_idx(x), da, None))
    if _idx(y) is not None:
        srcs.append((_idx(y), db, None))
    return _push_op(t, "matmul", out, srcs)


def dot(x, y):
    return matmul(x, y)


def transpose(x):
    t = _tape_of(x)
    if t is None:
        return _val(x).T
    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), lambda g: g.T, None))
    return _push_op(t, "transpose", _val(x).T, srcs)


def reshape(x, shape):
    t = _tape_of(x)
    if t is None:
        return _val(x).reshape(shape)
    xv = _val(x)
    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), lambda g, s=xv.shape: g.reshape(s), None))
    return _push_op(t, "reshape", xv.reshape(shape), srcs)


def take(x, key):
    """Slice / index lookup; the reverse pass scatters in place."""
    t = _tape_of(x)
    if t is None:
        return _val(x)[key]
    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), None, key))
    return _push_op(t, "slice", _val(x)[key], srcs)


def concat(parts):
    t = _tape_of(*parts)
    if t is None:
        return np.concatenate([np.atleast_1d(_val(p)) for p in parts])
    vals = [np.atleast_1d(_val(p)) for p in parts]
    srcs, cursor = [], 0
    for p, v in zip(parts, vals):
        a, b = cursor, cursor + v.size
        if _idx(p) is not None:
            shape = _val(p).shape
            srcs.append((_idx(p), lambda g, a=a, b=b, s=shape: g[a:b].reshape(s), None))
        cursor += v.size
    return _push_op(t, "concat", np.concatenate(vals), srcs)


def _unary(name, fwd, bwd):
    def op(x):
        t = _tape_of(x)
        if t is None:
            return fwd(_val(x))
        xv = _val(x)
        with np.errstate(all="ignore"):  # non-finite results raise below
            out = fwd(xv)
        srcs = []
        if _idx(x) is not None:
            srcs.append((_idx(x), lambda g, xi=xv, oi=out: bwd(g, xi, oi), None))
        return _push_op(t, name, out, srcs)

    op.__name__ = name
    return op


tanh = _unary("tanh", np.tanh, lambda g, x, o: g * (1.0 - o * o))
exp = _unary("exp", np.exp, lambda g, x, o: g * o)
log = _unary("log", np.log, lambda g, x, o: g / x)
sin = _unary("sin", np.sin, lambda g, x, o: g * np.cos(x))
cos = _unary("cos", np.cos, lambda g, x, o: -g * np.sin(x))
# Derivative at the relu kink is taken to be 0.
relu = _unary("relu", lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0))


def _sigmoid_value(x):
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


sigmoid = _unary("sigmoid", _sigmoid_value, lambda g, x, o: g * o * (1.0 - o))


def norm(x):
    """Euclidean (Frobenius) norm; gradient is 0 at the origin."""
    t = _tape_of(x)
    if t is None:
        return np.linalg.norm(_val(x))
    xv = _val(x)
    out = np.linalg.norm(xv)
    srcs = []
    if _idx(x) is not None:
        if out == 0.0:
            srcs.append((_idx(x), lambda g, s=xv.shape: np.zeros(s), None))
        else:
            srcs.append((_idx(x), lambda g, xi=xv, o=out: g * (xi / o), None))
    return _push_op(t, "norm", out, srcs)


def asum(x, axis=None):
    t = _tape_of(x)
    if t is None:
        return np.sum(_val(x), axis=axis)
    xv = _val(x)
    out = np.sum(xv, axis=axis)

    def back(g, s=xv.shape, ax=axis):
        if ax is None:
            return np.broadcast_to(g, s).copy()
        return np.broadcast_to(np.expand_dims(g, ax), s).copy()

    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), back, None))
    return _push_op(t, "sum", out, srcs)


def amax(x):
    """Global max reduction; ties route the gradient to the first argmax."""
    t = _tape_of(x)
    if t is None:
        return np.max(_val(x))
    xv = _val(x)
    out = np.max(xv)
    flat_idx = int(np.argmax(xv))

    def back(g, s=xv.shape, k=flat_idx):
        z = np.zeros(s)
        z.reshape(-1)[k] = g
        return z

    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), back, None))
    return _push_op(t, "max", out, srcs)


def _softmax_value(z):
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(x):
    t = _tape_of(x)
    if t is None:
        return _softmax_value(_val(x))
    out = _softmax_value(_val(x))

    def back(g, p=out):
        inner = np.sum(g * p, axis=-1, keepdims=True)
        return p * (g - inner)

    srcs = []
    if _idx(x) is not None:
        srcs.append((_idx(x), back, None))
    return _push_op(t, "softmax", out, srcs)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy between softmax rows and integer labels.

    ``labels`` is a plain integer array, never differentiated.
    """
    labels = np.asarray(labels)
    t = _tape_of(logits)
    z = _val(logits)
    z2 = np.atleast_2d(z)
    m = np.max(z2, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z2 - m), axis=1))
    rows = np.arange(z2.shape[0])
    value = np.mean(lse - z2[rows, labels])
    if t is None:
        return value

    def back(g, z2=z2, labels=labels, rows=rows, shape=z.shape):
        p = _softmax_value(z2)
        p[rows, labels] -= 1.0
        return (p * (g / z2.shape[0])).reshape(shape)

    srcs = []
    if _idx(logits) is not None:
        srcs.append((_idx(logits), back, None))
    return _push_op(t, "softmax-cross-entropy", value, srcs)


def detach(x):
    """Identity with gradient flow cut (truncated unrolled differentiation)."""
    if not isinstance(x, Var):
        return _val(x)
    return _push_op(x.tape, "detach", x.value, [])


def zeros_like(x):
    v = _val(x)
    if isinstance(x, Var):
        return x.tape.constant(np.zeros_like(v))
    return np.zeros_like(v)


def value_of(x):
    """Concrete ndarray behind a Var or array-like (for control flow)."""
    return _val(x)


# ---------------------------------------------------------------------------
# Program evaluation


def _call_program(program, segments):
    if len(segments) == 1:
        return program(next(iter(segments.values())))
    return program(segments)


def evaluate_with_tape(program, inputs: ParamVector):
    """Run a differentiable program on a fresh tape.

    ``program`` receives the single segment Var when the layout has one
    segment, else a dict name -> Var, and must return a scalar (size-1)
    value.  Returns ``(value, tape)``.
    """
    tape = ComputationTape()
    root = tape.leaf(inputs.values, layout=dict(inputs.layout))
    segments = {name: root[slice(a, b)] for name, (a, b) in inputs.layout.items()}
    out = _call_program(program, segments)
    if not isinstance(out, Var):
        out = tape.constant(out)
    if out.tape is not tape:
        raise AutodiffError("program returned a value from a different tape")
    if out.value.size != 1:
        raise AutodiffError(f"program output must be scalar, got shape {out.shape}")
    tape.mark_output(out)
    return float(out.value.reshape(())), tape


def reverse_gradient(tape: ComputationTape) -> ParamVector:
    """Gradient of the tape's single scalar output w.r.t. its input leaf."""
    if len(tape.outputs) != 1:
        raise AutodiffError(f"tape must have exactly one output, found {len(tape.outputs)}")
    if tape.input_index is None:
        raise AutodiffError("tape has no input leaf")
    grads = tape.backward(tape.outputs[0])
    g = grads[tape.input_index]
    if g is None:
        g = np.zeros_like(tape.nodes[tape.input_index].value)
    return ParamVector(g, tape.input_layout or {"params": (0, g.size)})


def evaluate_plain(program, inputs: ParamVector) -> float:
    """Evaluate a program on raw numpy arrays (no tape)."""
    segments = {name: inputs.values[a:b] for name, (a, b) in inputs.layout.items()}
    out = _call_program(program, segments)
    return float(np.asarray(_val(out)).reshape(()))


def finite_difference_check(program, point: ParamVector, step=1e-5):
    """Max over coordinates of |ad - fd| / max(1, |ad|) for central differences."""
    if step <= 0:
        raise AutodiffError("finite-difference step must be positive")
    _, tape = evaluate_with_tape(program, point)
    ad = reverse_gradient(tape).values
    worst = 0.0
    base = point.values
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + step
        hi = evaluate_plain(program, point.with_values(bumped))
        bumped[i] = base[i] - step
        lo = evaluate_plain(program, point.with_values(bumped))
        fd = (hi - lo) / (2.0 * step)
        worst = max(worst, abs(ad[i] - fd) / max(1.0, abs(ad[i])))
    return worst
