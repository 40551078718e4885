"""Agent, mixing and inference networks"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from autodiff import Tensor, as_tensor, concat
from config import Config
from exceptions import ConfigError
from layers import GaussianDistribution, GaussianLayer, GRUCell, Linear, MLP, Module, gaussian_sample


@dataclass
class AgentOutput:
    q_values: Tensor
    hidden: Tensor
    latent_dist: GaussianDistribution
    latent_sample: Tensor


class AgentNetwork(Module):
    """Recurrent Q-network shared by the agents of one group.

    obs + last action -> MLP -> GRU -> Gaussian latent -> 2-layer MLP, whose output is
    concatenated with the GRU hidden state before the Q head.
    """

    def __init__(self, obs_dim: int, n_actions: int, rng: np.random.Generator,
                 hidden_dim: int = Config.HIDDEN_DIM, latent_dim: int = Config.LATENT_DIM,
                 group_id: int = 0):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.group_id = group_id
        self.encoder = Linear(obs_dim + n_actions, hidden_dim, rng)
        self.rnn = GRUCell(hidden_dim, hidden_dim, rng)
        self.latent = GaussianLayer(hidden_dim, latent_dim, rng)
        self.decoder = MLP([latent_dim, hidden_dim, hidden_dim], rng, activate_last=True)
        self.q_head = Linear(2 * hidden_dim, n_actions, rng)

    def initial_hidden(self, batch: int) -> Tensor:
        return self.rnn.initial_state(batch)

    def __call__(self, obs, last_action_onehot, hidden_prev, noise=None) -> AgentOutput:
        return agent_forward(self, obs, last_action_onehot, hidden_prev, noise)


def agent_forward(net: AgentNetwork, obs, last_action_onehot, hidden_prev,
                  noise: Optional[Union[Tensor, np.ndarray]] = None) -> AgentOutput:
    """One recurrent step for a batch of agents; ``noise=None`` uses the latent mean"""
    obs, last_action_onehot = as_tensor(obs), as_tensor(last_action_onehot)
    if obs.shape[-1] != net.obs_dim:
        raise ConfigError(f"observation dim {obs.shape[-1]} != network input {net.obs_dim}")
    if last_action_onehot.shape[-1] != net.n_actions:
        raise ConfigError(f"last-action dim {last_action_onehot.shape[-1]} != network actions {net.n_actions}")
    x = net.encoder(concat([obs, last_action_onehot], axis=-1)).relu()
    hidden = net.rnn(x, hidden_prev)
    dist = net.latent(hidden)
    sample = dist.mean if noise is None else gaussian_sample(dist, noise)
    features = net.decoder(sample)
    q_values = net.q_head(concat([features, hidden], axis=-1))
    return AgentOutput(q_values, hidden, dist, sample)


class MixingNetwork(Module):
    """Monotonic mixer whose weights come from state-conditioned hyper-networks"""

    def __init__(self, n_agents: int, state_dim: int, rng: np.random.Generator,
                 embed_dim: int = Config.MIXING_EMBED_DIM,
                 hypernet_embed_dim: int = Config.HYPERNET_EMBED_DIM):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed_dim = embed_dim
        self.hyper_w1 = MLP([state_dim, hypernet_embed_dim, n_agents * embed_dim], rng)
        self.hyper_b1 = Linear(state_dim, embed_dim, rng)
        self.hyper_w2 = MLP([state_dim, hypernet_embed_dim, embed_dim], rng)
        self.hyper_b2 = MLP([state_dim, embed_dim, 1], rng)

    def __call__(self, group_q_chosen, state) -> Tensor:
        return mixing_forward(self, group_q_chosen, state)


def mixing_forward(net: MixingNetwork, group_q_chosen, state) -> Tensor:
    """Q_G = |w2(s)| . elu(|w1(s)| q + b1(s)) + b2(s); one value per row"""
    q, state = as_tensor(group_q_chosen), as_tensor(state)
    if q.ndim == 1:
        return mixing_forward(net, q.reshape(1, -1), state.reshape(1, -1)).reshape(())
    if q.shape[-1] != net.n_agents:
        raise ConfigError(f"mixer expects {net.n_agents} agent values, got {q.shape[-1]}")
    if state.shape[-1] != net.state_dim or state.shape[0] != q.shape[0]:
        raise ConfigError(f"mixer state shape {state.shape} incompatible with q shape {q.shape}")
    n, e = q.shape[0], net.embed_dim
    w1 = net.hyper_w1(state).abs().reshape(n, net.n_agents, e)
    b1 = net.hyper_b1(state).reshape(n, 1, e)
    hidden = (q.reshape(n, 1, net.n_agents) @ w1 + b1).elu()
    w2 = net.hyper_w2(state).abs().reshape(n, e, 1)
    b2 = net.hyper_b2(state).reshape(n, 1, 1)
    return (hidden @ w2 + b2).reshape(n)


class InferenceNetwork(Module):
    """Variational posterior over a group's latent given another group's latent and own hidden state"""

    def __init__(self, latent_dim: int, hidden_dim: int, rng: np.random.Generator, group_id: int = 0):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.group_id = group_id
        self.body = Linear(latent_dim + hidden_dim, hidden_dim, rng)
        self.head = GaussianLayer(hidden_dim, latent_dim, rng)

    def __call__(self, other_group_latent, own_hidden) -> GaussianDistribution:
        return inference_forward(self, other_group_latent, own_hidden)


def inference_forward(net: InferenceNetwork, other_group_latent, own_hidden) -> GaussianDistribution:
    other_group_latent, own_hidden = as_tensor(other_group_latent), as_tensor(own_hidden)
    if other_group_latent.shape[-1] != net.latent_dim or own_hidden.shape[-1] != net.hidden_dim:
        raise ConfigError(
            f"inference inputs {other_group_latent.shape}/{own_hidden.shape} do not match "
            f"latent {net.latent_dim} / hidden {net.hidden_dim}"
        )
    x = net.body(concat([other_group_latent, own_hidden], axis=-1)).relu()
    return net.head(x)
