import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cl2o import autodiff as ad


def pv(values, layout=None):
    return ad.ParamVector(np.asarray(values, dtype=np.float64), layout or {})


class TestEvaluateWithTape:
    def test_identity_program(self):
        value, tape = ad.evaluate_with_tape(lambda x: x, pv([3.0]))
        assert value == 3.0

    def test_tanh_zero(self):
        value, _ = ad.evaluate_with_tape(lambda x: ad.tanh(x), pv([0.0]))
        assert value == 0.0

    def test_half_square_gradient(self):
        value, tape = ad.evaluate_with_tape(lambda x: 0.5 * ad.dot(x, x), pv([1.0]))
        assert value == 0.5
        assert ad.reverse_gradient(tape).values == pytest.approx([1.0])

    def test_value_matches_plain_evaluation(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(4, 6))

        def prog(x):
            return ad.norm(ad.tanh(W @ x)) + ad.asum(ad.sigmoid(x))

        point = pv(rng.normal(size=6))
        taped, _ = ad.evaluate_with_tape(prog, point)
        assert taped == ad.evaluate_plain(prog, point)

    def test_nonfinite_intermediate_names_primitive_and_node(self):
        with pytest.raises(ad.NonFiniteError, match=r"'log'.*node \d+"):
            ad.evaluate_with_tape(lambda x: ad.log(x - 10.0), pv([1.0]))

    def test_non_scalar_output_rejected(self):
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.evaluate_with_tape(lambda x: x, pv([1.0, 2.0]))


class TestReverseGradient:
    def test_product_gradient(self):
        point = ad.ParamVector.from_segments({"a": [2.0], "b": [3.0]})
        _, tape = ad.evaluate_with_tape(lambda s: ad.dot(s["a"], s["b"]), point)
        g = ad.reverse_gradient(tape)
        assert g.values == pytest.approx([3.0, 2.0])
        assert g.layout == point.layout

    def test_constant_program_zero_gradient(self):
        _, tape = ad.evaluate_with_tape(lambda x: 7.5, pv([1.0, -1.0]))
        assert np.array_equal(ad.reverse_gradient(tape).values, [0.0, 0.0])

    def test_sum_of_squares(self):
        _, tape = ad.evaluate_with_tape(lambda x: ad.dot(x, x), pv([1.0, 2.0]))
        assert ad.reverse_gradient(tape).values == pytest.approx([2.0, 4.0])

    def test_multi_output_tape_rejected(self):
        _, tape = ad.evaluate_with_tape(lambda x: ad.dot(x, x), pv([1.0]))
        tape.outputs.append(tape.outputs[0])
        with pytest.raises(ad.AutodiffError, match="exactly one output"):
            ad.reverse_gradient(tape)

    def test_deterministic_replay(self):
        rng = np.random.default_rng(1)
        W = rng.normal(size=(5, 5))

        def prog(x):
            return ad.norm(W @ ad.relu(x)) + ad.dot(x, ad.exp(-x))

        point = pv(rng.normal(size=5))
        v1, t1 = ad.evaluate_with_tape(prog, point)
        v2, t2 = ad.evaluate_with_tape(prog, point)
        assert v1 == v2
        g1, g2 = ad.reverse_gradient(t1).values, ad.reverse_gradient(t2).values
        assert np.array_equal(g1, g2)


class TestFiniteDifferenceCheck:
    def test_quadratic_program(self):
        Q = np.array([[2.0, 0.3], [0.3, 1.0]])
        err = ad.finite_difference_check(
            lambda x: 0.5 * ad.dot(x, Q @ x), pv([0.7, -0.4]), step=1e-5)
        assert err <= 1e-6

    def test_linear_program_exact(self):
        c = np.array([1.0, -2.0, 0.5])
        err = ad.finite_difference_check(lambda x: ad.dot(c, x), pv([1.0, 2.0, 3.0]),
                                         step=0.1)
        assert err <= 1e-12

    def test_three_layer_perceptron(self):
        rng = np.random.default_rng(42)
        W1, W2, W3 = (rng.normal(size=(12, 50)) / 7, rng.normal(size=(8, 12)) / 3,
                      rng.normal(size=8))

        def prog(x):
            h1 = ad.tanh(W1 @ x)
            h2 = ad.sigmoid(W2 @ h1)
            return ad.dot(W3, h2)

        err = ad.finite_difference_check(prog, pv(rng.normal(size=50)), step=1e-5)
        assert err <= 1e-5

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ad.AutodiffError):
            ad.finite_difference_check(lambda x: ad.dot(x, x), pv([1.0]), step=0.0)


# Per-primitive probe programs on safe domains.
_PRIMITIVE_PROGRAMS = {
    "add": lambda x, aux: ad.asum(x + aux["v"]),
    "sub": lambda x, aux: ad.asum(x - aux["v"]),
    "neg": lambda x, aux: ad.asum(-x),
    "mul": lambda x, aux: ad.asum(x * aux["v"]),
    "div": lambda x, aux: ad.asum(x / (2.0 + ad.sigmoid(x))),
    "matmul": lambda x, aux: ad.norm(aux["M"] @ x),
    "transpose": lambda x, aux: ad.norm(ad.transpose(ad.reshape(x, aux["mat"])) @ aux["w"]),
    "reshape": lambda x, aux: ad.norm(ad.reshape(x, aux["mat"]) @ aux["w2"]),
    "slice": lambda x, aux: ad.dot(x[1:], x[:-1]),
    "concat": lambda x, aux: ad.norm(ad.concat([x, 2.0 * x])),
    "tanh": lambda x, aux: ad.asum(ad.tanh(x)),
    "sigmoid": lambda x, aux: ad.asum(ad.sigmoid(x)),
    "relu": lambda x, aux: ad.asum(ad.relu(x)),
    "exp": lambda x, aux: ad.asum(ad.exp(x)),
    "log": lambda x, aux: ad.asum(ad.log(5.0 + x)),
    "sin": lambda x, aux: ad.asum(ad.sin(x)),
    "cos": lambda x, aux: ad.asum(ad.cos(x)),
    "norm": lambda x, aux: ad.norm(x),
    "sum": lambda x, aux: ad.asum(x) + ad.asum(ad.reshape(x, aux["mat"]), ),
    "max": lambda x, aux: ad.amax(x),
    "softmax": lambda x, aux: ad.norm(ad.softmax(ad.reshape(x, aux["mat"]))),
    "softmax-cross-entropy": lambda x, aux: ad.softmax_cross_entropy(
        ad.reshape(x, aux["mat"]), aux["labels"]),
}

# detach is the one primitive whose job is to disagree with finite
# differences; its contract is covered by test_detach_cuts_gradient.
_FD_CHECKED = sorted(set(ad.PRIMITIVES) - {"detach"})


@pytest.mark.parametrize("name", _FD_CHECKED)
def test_every_registered_primitive_matches_finite_differences(name):
    dim = 12
    rng = np.random.default_rng(hash(name) % 2**32)
    aux = {
        "v": rng.normal(size=dim),
        "M": rng.normal(size=(3, dim)),
        "mat": (3, 4),
        "w": rng.normal(size=3),
        "w2": rng.normal(size=4),
        "labels": np.array([0, 2, 1]),
    }
    worst = 0.0
    for _ in range(100):
        # entries in [-2, 2], nudged off the relu/max kinks
        x = rng.uniform(-2.0, 2.0, size=dim)
        x[np.abs(x) < 1e-3] += 2e-3
        err = ad.finite_difference_check(
            lambda v: _PRIMITIVE_PROGRAMS[name](v, aux), pv(x), step=1e-5)
        worst = max(worst, err)
    assert worst <= 1e-6, f"{name}: fd mismatch {worst}"


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    Q = rng.normal(size=(6, 6))
    c = rng.normal(size=6)

    def f(x):
        return ad.dot(x, Q @ x)

    def g(x):
        return ad.dot(c, ad.sin(x))

    alpha, beta = 1.7, -0.6
    point = pv(rng.normal(size=6))
    _, tf = ad.evaluate_with_tape(f, point)
    _, tg = ad.evaluate_with_tape(g, point)
    _, tmix = ad.evaluate_with_tape(lambda x: alpha * f(x) + beta * g(x), point)
    mix = ad.reverse_gradient(tmix).values
    combo = alpha * ad.reverse_gradient(tf).values + beta * ad.reverse_gradient(tg).values
    assert np.max(np.abs(mix - combo)) <= 1e-12 * max(1.0, np.max(np.abs(combo)))


def test_detach_cuts_gradient():
    _, tape = ad.evaluate_with_tape(lambda x: ad.dot(x, ad.detach(x)), pv([3.0]))
    # d/dx of x * const(x) = const(x), not 2x
    assert ad.reverse_gradient(tape).values == pytest.approx([3.0])


class TestParamVector:
    def test_pack_unpack_round_trip(self):
        segs = {"a": np.arange(3.0), "b": np.arange(4.0).reshape(2, 2)}
        vec = ad.ParamVector.from_segments(segs)
        out = vec.unpack()
        assert np.array_equal(out["a"], segs["a"])
        assert np.array_equal(out["b"], segs["b"].reshape(-1))
        assert vec.dim == 7

    def test_layout_must_partition(self):
        with pytest.raises(ad.AutodiffError, match="partition"):
            ad.ParamVector(np.zeros(4), {"a": (0, 2), "b": (3, 4)})
        with pytest.raises(ad.AutodiffError, match="partition"):
            ad.ParamVector(np.zeros(4), {"a": (0, 2), "b": (1, 4)})
        with pytest.raises(ad.AutodiffError):
            ad.ParamVector(np.zeros(4), {"a": (0, 2)})

    def test_rejects_non_finite(self):
        with pytest.raises(ad.AutodiffError, match="non-finite"):
            ad.ParamVector(np.array([1.0, np.nan]))

    @given(st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=6),
           st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_property(self, sizes, seed):
        rng = np.random.default_rng(seed)
        segs = {f"s{i}": rng.normal(size=n) for i, n in enumerate(sizes)}
        vec = ad.ParamVector.from_segments(segs)
        rebuilt = ad.ParamVector.from_segments(vec.unpack())
        assert np.array_equal(vec.values, rebuilt.values)
        assert vec.layout == rebuilt.layout


def test_tape_nodes_topologically_ordered():
    _, tape = ad.evaluate_with_tape(
        lambda x: ad.norm(ad.tanh(x) + ad.sin(x) * ad.cos(x)), pv([0.3, 0.4]))
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)
