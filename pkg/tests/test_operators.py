import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cl2o import operators as op
from cl2o.autodiff import AutodiffError


def linear_scalar_operator(a_eff=0.5, gamma=0.95):
    # invert the contraction map so the effective recurrence is exactly a_eff
    a_raw = a_eff / (gamma - a_eff)
    z = op.ContractingRecurrentOperator(1, 1, state_dim=1, depth=1, gamma=gamma,
                                        activation="identity")
    segs = {"z0.A": np.array([a_raw]), "z0.B": np.array([1.0]),
            "z0.C": np.array([1.0])}
    return z, segs


class TestContractingOperator:
    def test_zero_bias_zero_input_zero_output(self):
        z = op.ContractingRecurrentOperator(2, 2, state_dim=3, depth=2, gamma=0.9)
        segs = z.init_segments(np.random.default_rng(0))
        state, out = op.z_step(z, segs, z.initial_state(), np.zeros(2))
        assert np.all(out == 0.0)
        assert all(np.all(h == 0.0) for h in state)

    def test_pure_bias_response(self):
        z = op.ContractingRecurrentOperator(2, 2, state_dim=3, depth=1, gamma=0.9,
                                            bias=0.7)
        segs = z.init_segments(np.random.default_rng(3))
        _, out = op.z_step(z, segs, z.initial_state(), np.zeros(2))
        C = segs["z0.C"].reshape(2, 3)
        assert out == pytest.approx(C @ np.tanh(np.full(3, 0.7)))

    def test_dimension_mismatch_rejected(self):
        z = op.ContractingRecurrentOperator(2, 2, state_dim=3, depth=1, gamma=0.9)
        segs = z.init_segments(np.random.default_rng(0))
        with pytest.raises(AutodiffError, match="shape"):
            op.z_step(z, segs, z.initial_state(), np.zeros(3))

    def test_linear_instance_impulse_energy(self):
        # post-update state readout: z_t = 0.5^t, energy = 4/3
        z, segs = linear_scalar_operator()
        resp = z.impulse_response(segs, np.array([1.0]), 400)[:, 0]
        assert resp[0] == pytest.approx(1.0)
        assert resp[1] == pytest.approx(0.5)
        assert np.sum(resp**2) == pytest.approx(4.0 / 3.0, rel=1e-12)

    def test_impulse_partial_sums_cauchy(self):
        eng = op.InnovationEngine(4, state_dim=3, depth=3, gamma=0.95)
        theta = eng.init_params(7)
        zn = eng.z_norm_schedule(theta, np.ones(4), 10_000)
        energy = np.cumsum(zn**2)
        assert np.isfinite(energy[-1])
        # geometric envelope with ratio gamma^2 after the transient
        tail = energy[-1] - energy[199]
        assert tail <= energy[-1] * 0.95 ** (2 * 150)

    def test_invalid_gamma_rejected(self):
        with pytest.raises(AutodiffError):
            op.ContractingRecurrentOperator(1, 1, gamma=1.0)

    @given(st.integers(min_value=0, max_value=10_000),
           st.floats(min_value=0.1, max_value=5.0))
    @settings(max_examples=200, deadline=None)
    def test_contraction_certificate_property(self, seed, scale):
        z = op.ContractingRecurrentOperator(3, 3, state_dim=3, depth=1, gamma=0.95)
        A_raw = scale * np.random.default_rng(seed).normal(size=(3, 3))
        a_eff = z.effective_recurrence(A_raw)
        assert np.linalg.norm(a_eff, 2) <= 0.95

    def test_l2_stability_random_parameters_and_inputs(self):
        # truncated geometric-envelope inputs, 100 random parameter draws
        z = op.ContractingRecurrentOperator(3, 2, state_dim=3, depth=2, gamma=0.95)
        for trial in range(100):
            rng = np.random.default_rng(trial)
            segs = {k: 3.0 * rng.normal(size=np.prod(s))
                    for k, s in z.segment_shapes().items()}
            layers = z.bind(segs)
            state = z.initial_state()
            outputs = []
            for t in range(400):
                inp = (0.9 ** t) * rng.normal(size=3) if t < 60 else np.zeros(3)
                state, out = z.step(layers, state, inp)
                outputs.append(out)
            energy = np.cumsum([o @ o for o in outputs])
            assert np.isfinite(energy[-1])
            tail = energy[-1] - energy[199]
            assert tail <= 1e-6 * energy[-1] + 1e-300


class TestSpectralNormPower:
    def test_matches_svd_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            A = rng.normal(size=(4, 4))
            assert op.spectral_norm_power(A) == pytest.approx(
                np.linalg.norm(A, 2), rel=1e-8)

    def test_zero_matrix(self):
        assert op.spectral_norm_power(np.zeros((3, 3))) == 0.0


class TestInnovationCombinators:
    def test_full_worked_example(self):
        v = op.innovation_full(np.array([2.0, 0.0]), np.array([3.0, 4.0]))
        assert v == pytest.approx([1.2, 1.6])

    def test_batch_worked_example(self):
        v = op.innovation_batch(np.array([2.0, 0.0]), np.array([3.0, 4.0]), 0.1)
        assert v == pytest.approx([0.12, 0.16])

    def test_degenerate_direction_exact_zero(self):
        z = np.array([1.0, 1.0])
        assert np.all(op.innovation_full(z, np.zeros(2)) == 0.0)
        assert np.all(op.innovation_batch(z, np.zeros(2), 0.5) == 0.0)

    def test_zero_magnitude_exact_zero(self):
        w = np.array([1.0, -1.0])
        assert np.all(op.innovation_full(np.zeros(2), w) == 0.0)
        assert np.all(op.innovation_batch(np.zeros(2), w, 0.5) == 0.0)

    def test_batch_eta_homogeneity(self):
        z = np.array([0.3, -1.2, 0.5])
        w = np.array([1.0, 2.0, -0.5])
        assert np.array_equal(2.0 * op.innovation_batch(z, w, 0.1),
                              op.innovation_batch(z, w, 0.2))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(AutodiffError, match="dims differ"):
            op.innovation_full(np.ones(2), np.ones(3))

    def test_nonpositive_eta_rejected(self):
        with pytest.raises(AutodiffError):
            op.innovation_batch(np.ones(2), np.ones(2), 0.0)

    @given(st.integers(min_value=1, max_value=64),
           st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=300, deadline=None)
    def test_magnitude_identity_within_4_ulp(self, dim, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=dim) * 10.0 ** rng.integers(-3, 4)
        w = rng.normal(size=dim) * 10.0 ** rng.integers(-3, 4)
        nz, nw = np.linalg.norm(z), np.linalg.norm(w)
        if nw <= op.DEGENERATE_DIRECTION or nz == 0.0:
            return
        v = op.innovation_full(z, w)
        assert abs(np.linalg.norm(v) - nz) <= 4 * math.ulp(nz)


class TestFeatures:
    def test_zero_padded_first_step(self):
        f = op.assemble_features(np.ones(3), 2.0 * np.ones(3), 0.5)
        assert f.shape == (op.feature_length(3),)
        assert np.all(f[-3:] == 0.0)

    def test_length_is_3d_plus_1(self):
        for d in (1, 4, 9):
            f = op.assemble_features(np.ones(d), np.ones(d), 1.0, np.ones(d))
            assert f.shape == (3 * d + 1,)

    def test_deterministic(self):
        x, g, u = np.ones(2), np.full(2, 0.5), np.full(2, -0.1)
        assert np.array_equal(op.assemble_features(x, g, 1.0, u),
                              op.assemble_features(x, g, 1.0, u))


class TestFeatureNetwork:
    def test_finite_output_for_finite_input(self):
        net = op.FeatureNetwork(7, 3, hidden=5)
        segs = net.init_segments(np.random.default_rng(0))
        out = net.forward(net.bind(segs), 100.0 * np.ones(7))
        assert np.all(np.isfinite(out))
        assert out.shape == (3,)


class TestCheckpointIO:
    def test_round_trip_bit_exact(self, tmp_path):
        eng = op.InnovationEngine(3, mode="full")
        theta = eng.init_params(5)
        path = tmp_path / "params.ckpt"
        op.save_checkpoint(path, theta, meta=eng.describe())
        loaded, meta = op.load_checkpoint(path)
        assert np.array_equal(loaded.values, theta.values)
        assert loaded.layout == theta.layout
        assert meta["gamma"] == 0.95 and meta["depth"] == 3

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(AutodiffError, match="magic"):
            op.load_checkpoint(path)

    def test_write_is_deterministic(self, tmp_path):
        eng = op.InnovationEngine(2, mode="batch")
        theta = eng.init_params(1)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        op.save_checkpoint(p1, theta, meta=eng.describe())
        op.save_checkpoint(p2, theta, meta=eng.describe())
        assert p1.read_bytes() == p2.read_bytes()


def test_impulse_signal():
    sig = op.ImpulseSignal(np.array([3.0, 4.0]))
    assert sig.energy == 25.0
    assert np.array_equal(sig.at(0), [3.0, 4.0])
    assert np.all(sig.at(5) == 0.0)
