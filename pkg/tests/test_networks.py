"""Tests for agent, mixing and inference networks"""
import pytest
import numpy as np

from autodiff import gradient_check, no_grad, parameter
from exceptions import ConfigError
from networks import AgentNetwork, InferenceNetwork, MixingNetwork, agent_forward, inference_forward, mixing_forward


class TestAgentNetwork:
    """Test the recurrent Q-network"""

    def test_output_shapes(self, rng):
        net = AgentNetwork(obs_dim=7, n_actions=5, rng=rng, hidden_dim=8, latent_dim=3)
        out = agent_forward(net, np.zeros((4, 7)), np.zeros((4, 5)), net.initial_hidden(4))
        assert out.q_values.shape == (4, 5)
        assert out.hidden.shape == (4, 8)
        assert out.latent_dist.shape == (4, 3)

    def test_mean_used_without_noise(self, rng):
        net = AgentNetwork(7, 5, rng, hidden_dim=8, latent_dim=3)
        out = net(np.ones((2, 7)), np.zeros((2, 5)), net.initial_hidden(2))
        np.testing.assert_array_equal(out.latent_sample.data, out.latent_dist.mean.data)

    def test_noise_changes_q(self, rng):
        net = AgentNetwork(7, 5, rng, hidden_dim=8, latent_dim=3)
        obs, last, h = np.ones((2, 7)), np.zeros((2, 5)), net.initial_hidden(2)
        with no_grad():
            mean_q = agent_forward(net, obs, last, h).q_values.data
            noisy_q = agent_forward(net, obs, last, h, noise=np.full((2, 3), 2.0)).q_values.data
        assert not np.allclose(mean_q, noisy_q)

    def test_dimension_checks(self, rng):
        net = AgentNetwork(7, 5, rng, hidden_dim=8, latent_dim=3)
        with pytest.raises(ConfigError):
            agent_forward(net, np.zeros((1, 6)), np.zeros((1, 5)), net.initial_hidden(1))
        with pytest.raises(ConfigError):
            agent_forward(net, np.zeros((1, 7)), np.zeros((1, 4)), net.initial_hidden(1))

    def test_hidden_state_carries_history(self, rng):
        net = AgentNetwork(3, 2, rng, hidden_dim=4, latent_dim=2)
        h0 = net.initial_hidden(1)
        h1 = net(np.ones((1, 3)), np.zeros((1, 2)), h0).hidden
        a = net(np.zeros((1, 3)), np.zeros((1, 2)), h0).q_values.data
        b = net(np.zeros((1, 3)), np.zeros((1, 2)), h1).q_values.data
        assert not np.allclose(a, b)


class TestMixingNetwork:
    """Test the monotonic mixer"""

    def test_batch_and_vector_input(self, rng):
        mixer = MixingNetwork(3, 5, rng, embed_dim=4, hypernet_embed_dim=6)
        assert mixer(np.zeros((7, 3)), np.zeros((7, 5))).shape == (7,)
        assert mixer(np.zeros(3), np.zeros(5)).shape == ()

    def test_monotone_in_each_agent(self, rng):
        mixer = MixingNetwork(3, 5, rng, embed_dim=4, hypernet_embed_dim=6)
        with no_grad():
            for _ in range(50):
                q, state = rng.normal(size=(1, 3)), rng.normal(size=(1, 5))
                base = mixing_forward(mixer, q, state).item()
                for i in range(3):
                    bumped = q.copy()
                    bumped[0, i] += 0.1
                    assert mixing_forward(mixer, bumped, state).item() >= base

    def test_non_negative_q_gradient(self, rng):
        mixer = MixingNetwork(3, 5, rng, embed_dim=4, hypernet_embed_dim=6)
        q = parameter(rng.normal(size=(4, 3)))
        mixing_forward(mixer, q, rng.normal(size=(4, 5))).sum().backward()
        assert np.all(q.grad >= 0.0)

    def test_shape_checks(self, rng):
        mixer = MixingNetwork(3, 5, rng)
        with pytest.raises(ConfigError):
            mixer(np.zeros((2, 4)), np.zeros((2, 5)))
        with pytest.raises(ConfigError):
            mixer(np.zeros((2, 3)), np.zeros((3, 5)))

    def test_gradient(self, rng):
        mixer = MixingNetwork(2, 3, rng, embed_dim=3, hypernet_embed_dim=4)
        q, state = parameter(rng.normal(size=(2, 2))), parameter(rng.normal(size=(2, 3)))
        weights = rng.normal(size=2)
        assert gradient_check(lambda: (mixer(q, state) * weights).sum(), [q, state] + mixer.parameters()) < 1e-5


class TestInferenceNetwork:
    """Test the variational posterior"""

    def test_output_distribution(self, rng):
        net = InferenceNetwork(latent_dim=3, hidden_dim=5, rng=rng)
        dist = inference_forward(net, np.zeros((4, 3)), np.zeros((4, 5)))
        assert dist.shape == (4, 3)

    def test_input_checks(self, rng):
        net = InferenceNetwork(3, 5, rng)
        with pytest.raises(ConfigError):
            net(np.zeros((1, 2)), np.zeros((1, 5)))
