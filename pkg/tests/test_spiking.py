import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikefield import diffcore as dc
from spikefield import spiking
from spikefield.errors import InputError
from spikefield.spiking import (FifNeuron, attach, fif_forward,
                                fif_grad_input, fif_grad_input_full,
                                fif_grad_threshold)


class TestForward:
    def test_pass_branch(self):
        assert fif_forward(2.0, FifNeuron(theta_th=1.0)) == 2.0

    def test_cut_branch(self):
        assert fif_forward(0.5, FifNeuron(theta_th=1.0)) == 0.0

    def test_boundary_passes_through(self):
        assert fif_forward(1.0, FifNeuron(theta_th=1.0)) == 1.0

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        neuron = FifNeuron(theta_th=0.7)
        sigma = rng.uniform(0, 3, size=200)
        once = fif_forward(sigma, neuron)
        assert np.array_equal(fif_forward(once, neuron), once)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        sigma = rng.uniform(0, 3, size=200)
        lo = fif_forward(sigma, FifNeuron(theta_th=0.3))
        hi = fif_forward(sigma, FifNeuron(theta_th=1.1))
        assert (hi <= lo).all()

    def test_zero_threshold_is_identity(self):
        rng = np.random.default_rng(2)
        neuron = FifNeuron(theta_th=0.0)
        sigma = rng.uniform(0, 3, size=100)
        assert np.array_equal(fif_forward(sigma, neuron), sigma)
        assert np.array_equal(fif_grad_input(sigma, neuron), np.ones(100))

    def test_invalid_hyperparameters(self):
        with pytest.raises(InputError):
            FifNeuron(k=0.0)
        with pytest.raises(InputError):
            FifNeuron(r=-1.0)


class TestThresholdGradient:
    def test_zero_outside_band(self):
        neuron = FifNeuron(theta_th=1.0, k=1.0, r=1.0)
        assert fif_grad_threshold(2.5, neuron) == 0.0
        assert fif_grad_threshold(0.0, neuron) == 0.0

    def test_at_threshold(self):
        neuron = FifNeuron(theta_th=1.0, k=1.0, r=1.0)
        assert fif_grad_threshold(1.0, neuron) == pytest.approx(-1.0)

    def test_in_band_value(self):
        neuron = FifNeuron(theta_th=1.0, k=1.0, r=1.0)
        assert fif_grad_threshold(1.5, neuron) == pytest.approx(-0.75)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 3), st.floats(0, 3), st.floats(0.1, 2), st.floats(0.1, 2))
    def test_never_positive(self, sigma, theta, k, r):
        assert fif_grad_threshold(sigma, FifNeuron(theta, k, r)) <= 0.0


class TestInputGradient:
    def test_above(self):
        assert fif_grad_input(2.0, FifNeuron(theta_th=1.0)) == 1.0

    def test_below(self):
        assert fif_grad_input(0.5, FifNeuron(theta_th=1.0)) == 0.0

    def test_boundary_convention(self):
        assert fif_grad_input(1.0, FifNeuron(theta_th=1.0)) == 1.0

    def test_full_variant_at_threshold(self):
        assert fif_grad_input_full(1.0, FifNeuron(1.0, 1.0, 1.0)) == pytest.approx(2.0)

    def test_full_variant_outside_band_above(self):
        assert fif_grad_input_full(2.5, FifNeuron(1.0, 1.0, 1.0)) == pytest.approx(1.0)

    def test_full_variant_below(self):
        assert fif_grad_input_full(0.5, FifNeuron(1.0, 1.0, 1.0)) == pytest.approx(0.25)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0.1, 2), st.floats(0.1, 2))
    def test_window_support(self, sigma, theta, k, r):
        # both the threshold surrogate and the full-input window term vanish
        # outside |sigma - theta| < k
        neuron = FifNeuron(theta, k, r)
        if abs(sigma - theta) >= k:
            assert fif_grad_threshold(sigma, neuron) == 0.0
            step = 1.0 if sigma >= theta else 0.0
            assert fif_grad_input_full(sigma, neuron) == step


class TestTapeAttachment:
    def make(self, sigma_val, theta_val, **kwargs):
        p = dc.FlatParams()
        p.add("sigma", sigma_val)
        p.add("theta_th", theta_val)
        t = dc.Tape(p)
        out = attach(t.param("sigma"), t.param("theta_th"), **kwargs)
        return p, t, out

    def test_default_op_kind_and_gradients(self):
        sigma = np.array([0.5, 1.0, 2.0])
        p, t, out = self.make(sigma, 1.0)
        assert t.ops().count("fif") == 1
        assert "fif_full" not in t.ops()
        grad = t.backward(dc.sum(out))
        np.testing.assert_array_equal(grad[p.slice_of("sigma")], [0.0, 1.0, 1.0])
        expected_theta = fif_grad_threshold(sigma, FifNeuron(1.0)).sum()
        assert grad[p.slice_of("theta_th")][0] == pytest.approx(expected_theta)

    def test_full_variant_records_distinct_op(self):
        p, t, out = self.make(np.array([1.2]), 1.0, full_input_grad=True)
        assert "fif_full" in t.ops()
        grad = t.backward(dc.sum(out))
        expected = fif_grad_input_full(np.array([1.2]), FifNeuron(1.0))[0]
        assert grad[p.slice_of("sigma")][0] == pytest.approx(expected)

    def test_threshold_surrogate_can_be_disabled(self):
        p, t, out = self.make(np.array([1.0]), 1.0, threshold_surrogate=False)
        grad = t.backward(dc.sum(out))
        assert grad[p.slice_of("theta_th")][0] == 0.0

    def test_matches_eq_forms_on_grid(self):
        # closed-form comparison on a grid of (sigma, theta) pairs
        k, r = 0.8, 1.3
        sigma, theta = np.meshgrid(np.linspace(0, 3, 31), np.linspace(0, 3, 31))
        for s, th in zip(sigma.ravel(), theta.ravel()):
            neuron = FifNeuron(th, k, r)
            window = max(0.0, (k - abs(s - th)) / k ** 2)
            step = 1.0 if s >= th else 0.0
            assert fif_grad_threshold(s, neuron) == pytest.approx(-r * window * s, abs=1e-15)
            assert fif_grad_input_full(s, neuron) == pytest.approx(r * window * s + step, abs=1e-15)
            assert fif_grad_input(s, neuron) == step
