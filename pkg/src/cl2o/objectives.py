"""Zoo of smooth bounded-below objectives, including separable sums and a
shallow image classifier.

Every objective carries an evaluator and a hand-coded gradient written with
the polymorphic primitives from :mod:`cl2o.autodiff`, so the same closures
run on plain arrays (fast rollouts) and on tape variables (unrolled
differentiation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class ObjectiveError(Exception):
    pass


@dataclass
class SmoothObjective:
    """An evaluable f with gradient oracle and smoothness metadata.

    ``beta`` is the gradient-Lipschitz constant, or the tag "empirical" when
    only a sampled estimate (``beta_estimate``) is available.  When
    ``components`` is present, sum(f_i) == f and ``component_weights[i]``
    rescales component i back to an estimate of the full objective.
    """

    dim: int
    eval: callable
    grad: callable
    beta: float | str = "empirical"
    lower_bound: float | str = "unknown-but-bounded"
    components: list["SmoothObjective"] | None = None
    component_weights: list[float] | None = None
    beta_estimate: float | None = None
    non_smooth: bool = False
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_components(self):
        return 0 if self.components is None else len(self.components)


def effective_beta(obj: SmoothObjective) -> float:
    """Declared smoothness constant, falling back to the sampled estimate."""
    if isinstance(obj.beta, (int, float)):
        return float(obj.beta)
    if obj.beta_estimate is not None:
        return float(obj.beta_estimate)
    raise ObjectiveError(
        f"objective '{obj.name}' has no usable smoothness constant; "
        "run estimate_beta first")


# ---------------------------------------------------------------------------
# Quadratics


def quadratic_objective(Q, c, offset=0.0, name="quadratic"):
    """f(x) = 0.5 x'Qx + c'x + offset for symmetric positive-semidefinite Q."""
    Q = np.asarray(Q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d = c.size
    eigs = np.linalg.eigvalsh(Q)
    xstar = np.linalg.solve(Q, -c)
    fmin = 0.5 * float(xstar @ Q @ xstar) + float(c @ xstar) + offset

    def f(x):
        return 0.5 * ad.dot(x, Q @ x) + ad.dot(c, x) + offset

    def g(x):
        return Q @ x + c

    return SmoothObjective(
        dim=d, eval=f, grad=g, beta=float(eigs[-1]), lower_bound=fmin,
        name=name, meta={"Q": Q, "c": c, "offset": offset, "minimizer": xstar},
    )


def make_quadratic(d, condition_number, seed):
    """Random SPD quadratic with largest eigenvalue 1 and eigenvalue spread
    ``condition_number``."""
    if condition_number < 1:
        raise ObjectiveError("condition_number must be >= 1")
    rng = np.random.default_rng(seed)
    eigs = np.geomspace(1.0 / condition_number, 1.0, d)
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    Q = basis @ np.diag(eigs) @ basis.T
    Q = 0.5 * (Q + Q.T)
    c = rng.normal(size=d)
    obj = quadratic_objective(Q, c, name=f"quadratic(d={d},k={condition_number})")
    # QR + eigvalsh round-off: declare the realized spectrum, not the target.
    obj.beta = float(np.linalg.eigvalsh(Q)[-1])
    return obj


def trig_quadratic_objective(Q, c, amplitude=0.1, frequency=2.0, name="trig-quadratic"):
    """Quadratic plus amplitude * sum(sin(frequency * x)): smooth, non-convex,
    bounded below, with analytic beta = beta_quad + amplitude * frequency**2."""
    base = quadratic_objective(Q, c)
    d = base.dim
    amp, freq = float(amplitude), float(frequency)

    def f(x):
        return base.eval(x) + amp * ad.asum(ad.sin(freq * x))

    def g(x):
        return base.grad(x) + (amp * freq) * ad.cos(freq * x)

    return SmoothObjective(
        dim=d, eval=f, grad=g,
        beta=float(base.beta) + amp * freq * freq,
        lower_bound=float(base.lower_bound) - amp * d,
        name=name,
        meta={"Q": base.meta["Q"], "c": base.meta["c"], "amplitude": amp, "frequency": freq},
    )


def _rosenbrock(d):
    def f(x):
        head, tail = x[: d - 1], x[1:]
        gap = tail - head * head
        off = 1.0 - head
        return 100.0 * ad.asum(gap * gap) + ad.asum(off * off)

    def g(x):
        head, tail = x[: d - 1], x[1:]
        gap = tail - head * head
        zero = np.zeros(1)
        lower = -400.0 * (head * gap) - 2.0 * (1.0 - head)
        upper = 200.0 * gap
        return ad.concat([lower, zero]) + ad.concat([zero, upper])

    return f, g


def make_nonconvex_family(d, kind, seed, amplitude=0.1, frequency=2.0):
    """Smooth non-convex instances: 'rosenbrock' or 'trig-perturbed-quadratic'."""
    if kind == "rosenbrock":
        if d < 2:
            raise ObjectiveError("rosenbrock needs d >= 2")
        f, g = _rosenbrock(d)
        obj = SmoothObjective(
            dim=d, eval=f, grad=g, beta="empirical", lower_bound=0.0,
            name=f"rosenbrock(d={d})", meta={"beta_box": (-2.0, 2.0)},
        )
        obj.beta_estimate = estimate_beta(obj, (-2.0, 2.0), samples=2000, seed=seed)
        return obj
    if kind == "trig-perturbed-quadratic":
        rng = np.random.default_rng(seed)
        base = make_quadratic(d, condition_number=10.0, seed=rng.integers(2**32))
        return trig_quadratic_objective(
            base.meta["Q"], base.meta["c"], amplitude, frequency,
            name=f"trig-quadratic(d={d})",
        )
    raise ObjectiveError(f"unknown non-convex kind '{kind}'")


def shift_to_zero_minimum(obj: SmoothObjective) -> SmoothObjective:
    """Add a constant so the declared lower bound becomes 0 (gradients and
    dynamics are unchanged; keeps outer losses comparable across instances)."""
    if not isinstance(obj.lower_bound, (int, float)):
        raise ObjectiveError("cannot shift an objective without a declared lower bound")
    if obj.components is not None:
        raise ObjectiveError("shift of separable objectives is not supported")
    delta = -float(obj.lower_bound)
    inner = obj.eval

    def f(x):
        return inner(x) + delta

    return SmoothObjective(
        dim=obj.dim, eval=f, grad=obj.grad, beta=obj.beta, lower_bound=0.0,
        beta_estimate=obj.beta_estimate, non_smooth=obj.non_smooth,
        name=obj.name + "+shift", meta=dict(obj.meta),
    )


# ---------------------------------------------------------------------------
# Separable least squares (partial-gradient experiments)


def make_separable_least_squares(d, n_components, rows_per_component=None, seed=0,
                                 noise=0.5):
    """f(x) = |Ax - b|^2 / (2N) split into per-block components f_i with
    sum(f_i) = f.  Blocks are Gaussian, the system is inconsistent, and the
    component gradients satisfy an affine envelope in |grad f| (full column
    rank makes the fit finite)."""
    rows = rows_per_component or max(2, (d + n_components - 1) // n_components + 1)
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n_components * rows, d))
    x_true = rng.normal(size=d)
    b = A @ x_true + noise * rng.normal(size=n_components * rows)
    N = A.shape[0]

    def block(i):
        Ai = A[i * rows:(i + 1) * rows]
        bi = b[i * rows:(i + 1) * rows]

        def f(x):
            r = Ai @ x - bi
            return ad.dot(r, r) / (2.0 * N)

        def g(x):
            return Ai.T @ (Ai @ x - bi) / N

        return SmoothObjective(
            dim=d, eval=f, grad=g,
            beta=float(np.linalg.eigvalsh(Ai.T @ Ai)[-1]) / N,
            lower_bound=0.0, name=f"lsq-block{i}",
        )

    comps = [block(i) for i in range(n_components)]
    xstar, *_ = np.linalg.lstsq(A, b, rcond=None)
    fmin = float(np.sum((A @ xstar - b) ** 2)) / (2.0 * N)

    def f(x):
        r = A @ x - b
        return ad.dot(r, r) / (2.0 * N)

    def g(x):
        return A.T @ (A @ x - b) / N

    return SmoothObjective(
        dim=d, eval=f, grad=g,
        beta=float(np.linalg.eigvalsh(A.T @ A)[-1]) / N,
        lower_bound=fmin,
        components=comps,
        component_weights=[1.0 / n_components] * n_components,
        name=f"least-squares(d={d},M={n_components})",
        meta={"A": A, "b": b, "minimizer": xstar},
    )


# ---------------------------------------------------------------------------
# Shallow classifier


_ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "relu": ad.relu}


class ShallowClassifier:
    """Single-layer classifier: per-image output o(s, x) = act(s W' + b).

    Weights (W: labels x pixels, b: labels) are packed row-major into one
    flat vector x.  Predictions take the argmax with lowest-index
    tie-breaking; the loss is mean cross-entropy between softmax(o) and the
    one-hot label.
    """

    def __init__(self, n_pixels, n_labels, activation="tanh"):
        if activation not in _ACTIVATIONS:
            raise ObjectiveError(f"unknown activation '{activation}'")
        self.n_pixels = int(n_pixels)
        self.n_labels = int(n_labels)
        self.activation = activation
        self.dim = self.n_labels * self.n_pixels + self.n_labels

    def split(self, x):
        L, P = self.n_labels, self.n_pixels
        W = ad.reshape(x[: L * P], (L, P))
        b = x[L * P:]
        return W, b

    def outputs(self, x, images):
        W, b = self.split(x)
        act = _ACTIVATIONS[self.activation]
        return act(images @ ad.transpose(W) + b)

    def loss(self, x, images, labels):
        return ad.softmax_cross_entropy(self.outputs(x, images), labels)

    def loss_gradient(self, x, images, labels):
        # Analytic chain rule through softmax-cross-entropy and the
        # activation, written in primitives so it is itself differentiable.
        W, b = self.split(x)
        z = images @ ad.transpose(W) + b
        act = _ACTIVATIONS[self.activation]
        o = act(z)
        m = images.shape[0]
        onehot = np.zeros((m, self.n_labels))
        onehot[np.arange(m), np.asarray(labels)] = 1.0
        delta = (ad.softmax(o) - onehot) * (1.0 / m)
        if self.activation == "tanh":
            dz = delta * (1.0 - o * o)
        elif self.activation == "sigmoid":
            dz = delta * (o * (1.0 - o))
        else:  # relu: a.e. derivative, 0 at the kink
            dz = delta * (ad.value_of(z) > 0)
        gW = ad.transpose(dz) @ images
        gb = ad.asum(dz, axis=0)
        return ad.concat([ad.reshape(gW, (self.n_labels * self.n_pixels,)), gb])

    def predict(self, x, images):
        return np.argmax(ad.value_of(self.outputs(x, images)), axis=1)

    def accuracy(self, x, images, labels):
        return float(np.mean(self.predict(x, images) == np.asarray(labels)))


def make_classifier_objective(dataset, activation="tanh", minibatch_size=128, seed=0):
    """Mean cross-entropy over the dataset with per-minibatch components.

    The shuffled partition (one reshuffle per construction, i.e. per
    meta-episode) yields M = ceil(N / minibatch_size) components f_i scaled
    so that sum(f_i) = f; component_weights[i] = n_i / N recovers the
    full-objective estimate f_i / w_i.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    N = images.shape[0]
    if N == 0:
        raise ObjectiveError("dataset is empty")
    if minibatch_size > N:
        raise ObjectiveError(f"minibatch_size {minibatch_size} exceeds dataset size {N}")
    clf = ShallowClassifier(images.shape[1], int(labels.max()) + 1, activation)
    order = np.random.default_rng(seed).permutation(N)
    batches = [order[i:i + minibatch_size] for i in range(0, N, minibatch_size)]

    def component(idx):
        S, y = images[idx], labels[idx]
        w = idx.size / N

        def f(x):
            return clf.loss(x, S, y) * w

        def g(x):
            return clf.loss_gradient(x, S, y) * w

        return SmoothObjective(
            dim=clf.dim, eval=f, grad=g, beta="empirical", lower_bound=0.0,
            non_smooth=(activation == "relu"), name="minibatch",
        )

    def f_full(x):
        return clf.loss(x, images, labels)

    def g_full(x):
        return clf.loss_gradient(x, images, labels)

    return SmoothObjective(
        dim=clf.dim, eval=f_full, grad=g_full, beta="empirical", lower_bound=0.0,
        components=[component(idx) for idx in batches],
        component_weights=[idx.size / N for idx in batches],
        non_smooth=(activation == "relu"),
        name=f"classifier({activation},N={N})",
        meta={"classifier": clf, "dataset": dataset, "minibatch_size": minibatch_size,
              "partition_seed": seed},
    )


# ---------------------------------------------------------------------------
# Smoothness estimation


def estimate_beta(obj, box, samples=1000, seed=0, safety=1.5):
    """Sampled gradient-Lipschitz constant, inflated by ``safety``.

    Consecutive sample pairs are drawn from a single seeded stream, so the
    estimate is monotone in ``samples`` for a fixed seed prefix.
    """
    if samples < 2:
        raise ObjectiveError("estimate_beta needs at least 2 samples")
    lo, hi = box if isinstance(box, tuple) else (-box, box)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (obj.dim,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (obj.dim,))
    if np.any(hi <= lo):
        raise ObjectiveError("degenerate sampling box (zero volume)")
    rng = np.random.default_rng(seed)
    points = lo + (hi - lo) * rng.random((samples, obj.dim))
    best = 0.0
    for i in range(0, samples - 1, 2):
        x, y = points[i], points[i + 1]
        gap = np.linalg.norm(x - y)
        if gap == 0.0:
            continue
        ratio = np.linalg.norm(np.asarray(obj.grad(x)) - np.asarray(obj.grad(y))) / gap
        best = max(best, float(ratio))
    return best * safety
