"""Tests for network layers, the Gaussian head and the optimizer"""
import pytest
import numpy as np

from autodiff import gradient_check, parameter
from exceptions import CheckpointError, ConfigError
from layers import (MLP, Adam, AdamState, GaussianDistribution, GaussianLayer, GRUCell, Linear, adam_step,
                    clip_grad_norm, gaussian_kl, gaussian_sample, gru_cell_forward, linear_forward, one_hot)


class TestLinear:
    """Test the affine layer"""

    def test_shapes(self, rng):
        layer = Linear(4, 3, rng)
        assert layer(np.ones((5, 4))).shape == (5, 3)
        assert layer(np.ones(4)).shape == (3,)

    def test_dimension_mismatch(self, rng):
        layer = Linear(4, 3, rng)
        with pytest.raises(ConfigError):
            layer(np.ones((2, 5)))

    def test_bias_mismatch(self):
        with pytest.raises(ConfigError):
            linear_forward(np.ones((1, 2)), parameter(np.ones((2, 3))), parameter(np.ones(2)))

    def test_gradient(self, rng):
        x, w, b = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(4, 2))), parameter(rng.normal(size=2))
        assert gradient_check(lambda: (linear_forward(x, w, b) ** 2).sum(), [x, w, b]) < 1e-6


class TestGRUCell:
    """Test the recurrent cell"""

    def test_zero_update_gate_takes_candidate(self, rng):
        """With the update gate saturated at 0 the output is the candidate"""
        cell = GRUCell(2, 3, rng)
        cell.bias_ih.data[3:6] = -50.0
        h_prev = np.ones((1, 3))
        out = cell(np.zeros((1, 2)), h_prev)
        assert np.all(np.abs(out.data) < 1.0)

    def test_saturated_update_gate_keeps_state(self, rng):
        """With the update gate at 1 the previous state passes through"""
        cell = GRUCell(2, 3, rng)
        cell.bias_ih.data[3:6] = 50.0
        h_prev = np.array([[0.3, -0.7, 0.9]])
        out = gru_cell_forward(np.zeros((1, 2)), h_prev, cell)
        np.testing.assert_allclose(out.data, h_prev, atol=1e-12)

    def test_hidden_mismatch(self, rng):
        cell = GRUCell(2, 3, rng)
        with pytest.raises(ConfigError):
            cell(np.zeros((1, 2)), np.zeros((1, 4)))

    def test_gradient(self, rng):
        cell = GRUCell(3, 4, rng)
        x, h = parameter(rng.normal(size=(2, 3))), parameter(rng.normal(size=(2, 4)))
        weights = rng.normal(size=(2, 4))
        assert gradient_check(lambda: (cell(x, h) * weights).sum(), [x, h] + cell.parameters()) < 1e-5


class TestGaussian:
    """Test the diagonal Gaussian, sampling and KL"""

    def test_kl_of_identical_is_zero(self, rng):
        mean, log_std = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)) * 0.1
        p = GaussianDistribution(mean, log_std)
        assert gaussian_kl(p, GaussianDistribution(mean.copy(), log_std.copy())).item() == pytest.approx(0.0, abs=1e-12)

    def test_kl_closed_form_unit_variance(self):
        """Unit variances: KL = |mu_p - mu_q|^2 / 2"""
        p = GaussianDistribution(np.array([[1.0, 2.0]]), np.zeros((1, 2)))
        q = GaussianDistribution(np.zeros((1, 2)), np.zeros((1, 2)))
        assert gaussian_kl(p, q).item() == pytest.approx(2.5)

    def test_kl_is_non_negative(self, rng):
        for _ in range(20):
            p = GaussianDistribution(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
            q = GaussianDistribution(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
            assert np.all(gaussian_kl(p, q, reduce=False).data >= -1e-12)

    def test_kl_unreduced_shape(self, rng):
        p = GaussianDistribution(rng.normal(size=(5, 3)), np.zeros((5, 3)))
        assert gaussian_kl(p, p, reduce=False).shape == (5,)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            GaussianDistribution(np.zeros(3), np.zeros(2))
        with pytest.raises(ConfigError):
            gaussian_kl(GaussianDistribution(np.zeros((1, 2)), np.zeros((1, 2))),
                        GaussianDistribution(np.zeros((1, 3)), np.zeros((1, 3))))

    def test_reparameterized_sample(self):
        dist = GaussianDistribution(np.array([[1.0]]), np.array([[np.log(2.0)]]))
        assert gaussian_sample(dist, np.array([[0.5]])).item() == pytest.approx(2.0)

    def test_sample_noise_shape_checked(self):
        dist = GaussianDistribution(np.zeros((1, 2)), np.zeros((1, 2)))
        with pytest.raises(ConfigError):
            gaussian_sample(dist, np.zeros((1, 3)))

    def test_layer_clamps_log_std(self, rng):
        layer = GaussianLayer(2, 3, rng)
        layer.log_std_head.bias.data[:] = 100.0
        dist = layer(np.zeros((1, 2)))
        assert np.all(dist.log_std.data <= layer.log_std_max)

    def test_kl_gradient(self, rng):
        tensors = [parameter(rng.normal(size=(3, 2)) * 0.5) for _ in range(4)]
        fn = lambda: gaussian_kl(GaussianDistribution(tensors[0], tensors[1]),
                                 GaussianDistribution(tensors[2], tensors[3]))
        assert gradient_check(fn, tensors) < 1e-6


class TestModule:
    """Test parameter discovery and state handling"""

    def test_named_parameters_nested(self, rng):
        mlp = MLP([2, 3, 1], rng)
        names = [name for name, _ in mlp.named_parameters()]
        assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]

    def test_copy_is_independent(self, rng):
        layer = Linear(2, 2, rng)
        clone = layer.copy()
        clone.weight.data[:] = 0.0
        assert not np.all(layer.weight.data == 0.0)

    def test_load_state_dict_mismatch(self, rng):
        layer = Linear(2, 2, rng)
        state = layer.state_dict()
        state["weight"] = np.zeros((3, 2))
        with pytest.raises(CheckpointError):
            layer.load_state_dict(state)
        with pytest.raises(CheckpointError):
            layer.load_state_dict({})

    def test_one_hot(self):
        out = one_hot(np.array([[0, 2]]), 3)
        np.testing.assert_array_equal(out, [[[1, 0, 0], [0, 0, 1]]])


class TestAdam:
    """Test the optimizer and gradient clipping"""

    def test_first_step_moves_by_lr(self):
        """Bias correction makes the first step exactly lr * sign(grad)"""
        p = parameter(np.array([1.0, -1.0]))
        state = AdamState(learning_rate=0.1, epsilon=0.0)
        adam_step(state, {"p": p}, {"p": np.array([0.5, -2.0])})
        np.testing.assert_allclose(p.data, [0.9, -0.9])

    def test_minimizes_quadratic(self):
        p = parameter(np.array([3.0]))
        optimizer = Adam({"p": p}, lr=0.1)
        for _ in range(300):
            optimizer.zero_grad()
            ((p - 1.0) ** 2).sum().backward()
            optimizer.step()
        assert p.data[0] == pytest.approx(1.0, abs=1e-2)

    def test_lr_setter(self):
        optimizer = Adam({"p": parameter(np.zeros(1))}, lr=0.1)
        optimizer.lr = 0.05
        assert optimizer.state.learning_rate == 0.05

    def test_clip_grad_norm(self):
        a, b = parameter(np.zeros(2)), parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        norm = clip_grad_norm([a, b], 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2))
        assert total == pytest.approx(1.0)

    def test_clip_leaves_small_gradients(self):
        a = parameter(np.zeros(2))
        a.grad = np.array([0.3, 0.4])
        clip_grad_norm([a], 10.0)
        np.testing.assert_allclose(a.grad, [0.3, 0.4])
