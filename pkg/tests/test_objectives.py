import numpy as np
import pytest

from cl2o import autodiff as ad
from cl2o import objectives as ob


@pytest.fixture
def tiny_dataset():
    class DS:
        pass

    rng = np.random.default_rng(0)
    ds = DS()
    ds.images = rng.random((40, 6))
    ds.labels = np.arange(40) % 10
    return ds


class TestQuadratics:
    def test_canonical_scalar_quadratic(self):
        obj = ob.quadratic_objective(np.array([[1.0]]), np.array([0.0]))
        x = np.array([2.0])
        assert obj.eval(x) == 2.0
        assert obj.grad(x) == pytest.approx([2.0])
        assert obj.beta == 1.0
        assert obj.lower_bound == 0.0

    def test_beta_is_largest_eigenvalue(self):
        obj = ob.quadratic_objective(np.diag([1.0, 4.0]), np.zeros(2))
        assert obj.beta == 4.0

    def test_same_seed_same_instance(self):
        a = ob.make_quadratic(4, 10, seed=7)
        b = ob.make_quadratic(4, 10, seed=7)
        assert np.array_equal(a.meta["Q"], b.meta["Q"])
        assert np.array_equal(a.meta["c"], b.meta["c"])

    def test_lower_bound_attained_at_minimizer(self):
        obj = ob.make_quadratic(6, 30, seed=3)
        xstar = obj.meta["minimizer"]
        assert obj.eval(xstar) == pytest.approx(obj.lower_bound, abs=1e-12)
        assert np.linalg.norm(obj.grad(xstar)) < 1e-10

    def test_condition_number_below_one_rejected(self):
        with pytest.raises(ob.ObjectiveError):
            ob.make_quadratic(3, 0.5, seed=0)

    def test_sampled_lipschitz_never_violated(self):
        obj = ob.make_quadratic(5, 25, seed=1)
        rng = np.random.default_rng(9)
        xs = rng.uniform(-2, 2, size=(10_000, 2, 5))
        worst = 0.0
        for x, y in xs:
            gap = np.linalg.norm(x - y)
            ratio = np.linalg.norm(obj.grad(x) - obj.grad(y)) / gap
            worst = max(worst, ratio)
        assert worst <= obj.beta * (1 + 1e-10)


class TestNonConvexFamily:
    def test_rosenbrock_global_minimizer(self):
        obj = ob.make_nonconvex_family(4, "rosenbrock", seed=0)
        ones = np.ones(4)
        assert obj.eval(ones) == 0.0
        assert np.array_equal(obj.grad(ones), np.zeros(4))

    def test_rosenbrock_origin_value(self):
        obj = ob.make_nonconvex_family(2, "rosenbrock", seed=0)
        assert obj.eval(np.zeros(2)) == 1.0

    def test_rosenbrock_needs_two_dims(self):
        with pytest.raises(ob.ObjectiveError):
            ob.make_nonconvex_family(1, "rosenbrock", seed=0)

    def test_trig_beta_analytic(self):
        obj = ob.trig_quadratic_objective(np.array([[1.0]]), np.array([0.0]), 0.1, 2.0)
        assert obj.beta == pytest.approx(1.4)
        # second-derivative oracle: f'' = 1 + 0.1 * 4 * (-sin... ) bounded by 1.4
        xs = np.linspace(-4, 4, 2001)
        h = 1e-4
        second = [(obj.eval(np.array([x + h])) - 2 * obj.eval(np.array([x]))
                   + obj.eval(np.array([x - h]))) / h**2 for x in xs]
        assert max(np.abs(second)) <= 1.4 + 1e-4

    def test_unknown_kind_rejected(self):
        with pytest.raises(ob.ObjectiveError, match="unknown"):
            ob.make_nonconvex_family(3, "mystery", seed=0)


class TestGradientConsistency:
    @pytest.mark.parametrize("maker", [
        lambda: ob.make_quadratic(5, 10, seed=2),
        lambda: ob.make_nonconvex_family(5, "rosenbrock", seed=2),
        lambda: ob.make_nonconvex_family(5, "trig-perturbed-quadratic", seed=2),
        lambda: ob.make_separable_least_squares(4, 3, seed=2),
    ])
    def test_hand_gradient_matches_autodiff(self, maker):
        obj = maker()
        rng = np.random.default_rng(11)
        for _ in range(100):
            x = rng.uniform(-2, 2, size=obj.dim)
            _, tape = ad.evaluate_with_tape(lambda v: obj.eval(v),
                                            ad.ParamVector(x))
            auto = ad.reverse_gradient(tape).values
            hand = np.asarray(obj.grad(x))
            scale = max(1.0, np.max(np.abs(auto)))
            assert np.max(np.abs(auto - hand)) / scale <= 1e-8


class TestSeparableLeastSquares:
    def test_components_sum_to_full(self):
        obj = ob.make_separable_least_squares(6, 4, seed=5)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=6)
            fsum = sum(c.eval(x) for c in obj.components)
            gsum = sum(np.asarray(c.grad(x)) for c in obj.components)
            assert abs(fsum - obj.eval(x)) <= 1e-10 * max(1.0, abs(obj.eval(x)))
            assert np.max(np.abs(gsum - obj.grad(x))) <= 1e-10

    def test_lower_bound_is_least_squares_residual(self):
        obj = ob.make_separable_least_squares(5, 3, seed=1)
        xstar = obj.meta["minimizer"]
        assert obj.eval(xstar) == pytest.approx(obj.lower_bound)
        assert np.linalg.norm(obj.grad(xstar)) < 1e-12


class TestClassifier:
    def test_uniform_softmax_at_zero_weights(self, tiny_dataset):
        obj = ob.make_classifier_objective(tiny_dataset, "tanh", minibatch_size=16)
        assert obj.eval(np.zeros(obj.dim)) == pytest.approx(np.log(10.0), abs=1e-12)

    def test_large_margin_loss_vanishes(self):
        # two classes, relu activation: a +20 logit margin drives the loss
        # below 1e-8
        clf = ob.ShallowClassifier(n_pixels=3, n_labels=2, activation="relu")
        s = np.array([[1.0, 2.0, 2.0]])
        W = np.zeros((2, 3))
        W[0] = 20.0 * s[0] / (s[0] @ s[0])
        x = np.concatenate([W.reshape(-1), np.zeros(2)])
        assert clf.outputs(x, s)[0, 0] == pytest.approx(20.0)
        assert clf.loss(x, s, np.array([0])) <= 1e-8

    def test_partition_identity(self, tiny_dataset):
        obj = ob.make_classifier_objective(tiny_dataset, "tanh", minibatch_size=16)
        rng = np.random.default_rng(4)
        x = 0.1 * rng.normal(size=obj.dim)
        fsum = sum(c.eval(x) for c in obj.components)
        assert abs(fsum - obj.eval(x)) <= 1e-10 * max(1.0, abs(obj.eval(x)))

    @pytest.mark.parametrize("activation", ["tanh", "sigmoid", "relu"])
    def test_hand_gradient_matches_autodiff(self, tiny_dataset, activation):
        obj = ob.make_classifier_objective(tiny_dataset, activation, minibatch_size=16)
        rng = np.random.default_rng(8)
        for _ in range(10):
            x = 0.3 * rng.normal(size=obj.dim)
            _, tape = ad.evaluate_with_tape(lambda v: obj.eval(v), ad.ParamVector(x))
            auto = ad.reverse_gradient(tape).values
            hand = np.asarray(obj.grad(x))
            assert np.max(np.abs(auto - hand)) <= 1e-8 * max(1.0, np.max(np.abs(auto)))

    def test_relu_flagged_non_smooth(self, tiny_dataset):
        assert ob.make_classifier_objective(tiny_dataset, "relu", 16).non_smooth
        assert not ob.make_classifier_objective(tiny_dataset, "tanh", 16).non_smooth

    def test_prediction_lowest_index_tie_break(self):
        clf = ob.ShallowClassifier(n_pixels=2, n_labels=3, activation="tanh")
        x = np.zeros(clf.dim)  # all outputs equal -> argmax picks index 0
        assert clf.predict(x, np.array([[0.4, 0.6]]))[0] == 0

    def test_loss_nonnegative(self, tiny_dataset):
        obj = ob.make_classifier_objective(tiny_dataset, "sigmoid", 16)
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert obj.eval(rng.normal(size=obj.dim)) >= 0.0

    def test_empty_dataset_rejected(self):
        class DS:
            images = np.zeros((0, 4))
            labels = np.zeros(0, dtype=int)

        with pytest.raises(ob.ObjectiveError):
            ob.make_classifier_objective(DS(), "tanh", 16)

    def test_partition_reshuffles_with_seed(self, tiny_dataset):
        a = ob.make_classifier_objective(tiny_dataset, "tanh", 16, seed=0)
        b = ob.make_classifier_objective(tiny_dataset, "tanh", 16, seed=1)
        x = 0.05 * np.random.default_rng(2).normal(size=a.dim)
        vals_a = [c.eval(x) for c in a.components]
        vals_b = [c.eval(x) for c in b.components]
        assert not np.allclose(vals_a, vals_b)


class TestEstimateBeta:
    def test_scalar_quadratic_bracket(self):
        obj = ob.quadratic_objective(np.array([[1.0]]), np.array([0.0]))
        est = ob.estimate_beta(obj, (-1.0, 1.0), samples=1000, seed=0)
        assert 1.0 <= est <= 1.5

    def test_linear_estimate_zero(self):
        obj = ob.SmoothObjective(
            dim=2, eval=lambda x: ad.dot(np.array([1.0, 2.0]), x),
            grad=lambda x: np.array([1.0, 2.0]), beta=0.0, lower_bound="unknown-but-bounded")
        est = ob.estimate_beta(obj, (-1.0, 1.0), samples=500, seed=0)
        assert est <= 1e-12

    def test_trig_estimate_bracket(self):
        obj = ob.trig_quadratic_objective(np.array([[1.0]]), np.array([0.0]), 0.1, 2.0)
        est = ob.estimate_beta(obj, (-3.0, 3.0), samples=4000, seed=0)
        assert 1.0 <= est <= 2.1

    def test_monotone_in_sample_count(self):
        obj = ob.make_nonconvex_family(3, "trig-perturbed-quadratic", seed=6)
        estimates = [ob.estimate_beta(obj, (-2.0, 2.0), samples=n, seed=13)
                     for n in (10, 100, 400, 1000)]
        assert all(a <= b + 1e-15 for a, b in zip(estimates, estimates[1:]))

    def test_degenerate_box_rejected(self):
        obj = ob.make_quadratic(2, 5, seed=0)
        with pytest.raises(ob.ObjectiveError, match="degenerate"):
            ob.estimate_beta(obj, (np.array([0.0, 0.0]), np.array([1.0, 0.0])), 100, 0)

    def test_too_few_samples_rejected(self):
        obj = ob.make_quadratic(2, 5, seed=0)
        with pytest.raises(ob.ObjectiveError):
            ob.estimate_beta(obj, (-1.0, 1.0), samples=1, seed=0)


def test_effective_beta_prefers_declared():
    obj = ob.make_quadratic(3, 5, seed=0)
    assert ob.effective_beta(obj) == obj.beta
    obj.beta = "empirical"
    obj.beta_estimate = 2.5
    assert ob.effective_beta(obj) == 2.5
    obj.beta_estimate = None
    with pytest.raises(ob.ObjectiveError):
        ob.effective_beta(obj)


def test_shift_to_zero_minimum_preserves_dynamics():
    obj = ob.make_quadratic(4, 12, seed=9)
    shifted = ob.shift_to_zero_minimum(obj)
    x = np.random.default_rng(0).normal(size=4)
    assert np.array_equal(shifted.grad(x), obj.grad(x))
    assert shifted.lower_bound == 0.0
    assert shifted.eval(obj.meta["minimizer"]) == pytest.approx(0.0, abs=1e-12)
