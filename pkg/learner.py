"""Grouped hybrid Q-learning: per-group TD losses, inter-group MI loss, controller and targets"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import Tensor, no_grad, stack
from checkpoint_manager import load_checkpoint_file
from combat_env import CombatEnv
from config import AlgorithmVariant, TrainConfig
from exceptions import CheckpointError, ConfigError, ContractViolation, UsageError
from grouping import group_by_ideal_object, masked_argmax, single_group, validate_jtc
from layers import Adam, GaussianDistribution, Module, clip_grad_norm, gaussian_kl, one_hot
from logger import get_logger
from maps import MapConfig
from networks import AgentNetwork, InferenceNetwork, MixingNetwork, agent_forward
from replay_buffer import EpisodeBatch

logger = get_logger()

MIX_MONOTONIC = "qmix"
MIX_ADDITIVE = "vdn"
MIX_INDEPENDENT = "iql"

_BASELINE_MIXING = {
    AlgorithmVariant.IQL: MIX_INDEPENDENT,
    AlgorithmVariant.VDN: MIX_ADDITIVE,
    AlgorithmVariant.QMIX_SHARED: MIX_MONOTONIC,
}


@dataclass
class GroupNets:
    members: List[int]
    agent: AgentNetwork
    mixer: Optional[MixingNetwork] = None
    inference: Optional[InferenceNetwork] = None

    def target_copy(self) -> "GroupNets":
        return GroupNets(
            members=list(self.members),
            agent=self.agent.copy(),
            mixer=self.mixer.copy() if self.mixer is not None else None,
        )

    def modules(self) -> Dict[str, Module]:
        named = {"agent": self.agent}
        if self.mixer is not None:
            named["mixer"] = self.mixer
        if self.inference is not None:
            named["inference"] = self.inference
        return named


@dataclass
class Unroll:
    """Per-step outputs of a group's agent network over a batch, stacked as [B, T+1, m, ...]"""
    q_values: Tensor
    hiddens: Tensor
    latent_mean: Tensor
    latent_log_std: Tensor
    latent_samples: Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    td: List[float] = field(default_factory=list)
    mi: List[float] = field(default_factory=list)

    def as_dict(self, labels: Sequence[str]) -> Dict[str, float]:
        out = {f"td[{labels[g]}]": v for g, v in enumerate(self.td)}
        out.update({f"mi[{labels[g]}]": v for g, v in enumerate(self.mi)})
        out["total"] = float(self.total.item())
        return out


# ---- losses ----------------------------------------------------------------

def unroll_group(agent: AgentNetwork, batch: EpisodeBatch, members: Sequence[int],
                 noise_rng: Optional[np.random.Generator] = None) -> Unroll:
    B, steps = batch.observations.shape[:2]
    m, d = len(members), agent.n_actions
    members = list(members)
    observations = batch.observations[:, :, members]
    last_actions = np.zeros((B, steps, m, d))
    last_actions[:, 1:] = one_hot(batch.actions[:, :, members], d)
    hidden = agent.initial_hidden(B * m)
    q, h, mean, log_std, samples = [], [], [], [], []
    for t in range(steps):
        noise = noise_rng.standard_normal((B * m, agent.latent_dim)) if noise_rng is not None else None
        out = agent_forward(agent, observations[:, t].reshape(B * m, -1),
                            last_actions[:, t].reshape(B * m, d), hidden, noise)
        hidden = out.hidden
        q.append(out.q_values.reshape(B, m, d))
        h.append(out.hidden.reshape(B, m, -1))
        mean.append(out.latent_dist.mean.reshape(B, m, -1))
        log_std.append(out.latent_dist.log_std.reshape(B, m, -1))
        samples.append(out.latent_sample.reshape(B, m, -1))
    return Unroll(stack(q, 1), stack(h, 1), stack(mean, 1), stack(log_std, 1), stack(samples, 1))


def chosen_action_values(q_values: Tensor, actions: np.ndarray) -> Tensor:
    """Q of the taken actions: q_values [B, T+1, m, d], actions [B, T, m] -> [B, T, m]"""
    d = q_values.shape[-1]
    return (q_values[:, :-1] * one_hot(actions, d)).sum(axis=-1)


def target_max_values(q_values: np.ndarray, avail_actions: np.ndarray) -> np.ndarray:
    """Max next-step Q over available actions: [B, T+1, m, d] -> [B, T, m]"""
    d = q_values.shape[-1]
    masked = np.where(avail_actions[:, 1:, :, :d] > 0, q_values[:, 1:], -np.inf)
    return masked.max(axis=-1)


def masked_td_loss(q_taken: Tensor, targets: np.ndarray, filled: np.ndarray) -> Tensor:
    """Mean squared TD error over filled entries; filled broadcasts against q_taken"""
    mask = np.broadcast_to(filled, q_taken.shape).astype(np.float64)
    count = mask.sum()
    if count == 0:
        raise UsageError("TD loss over a batch with no filled steps")
    error = (q_taken - targets) * mask
    return (error * error).sum() * (1.0 / count)


def group_td_loss(batch: EpisodeBatch, group: GroupNets, target: GroupNets, gamma: float,
                  mixing: str = MIX_MONOTONIC, noise_rng: Optional[np.random.Generator] = None,
                  online: Optional[Unroll] = None) -> Tensor:
    """One-step TD loss of a group trained against the shared team reward"""
    if batch.batch_size == 0 or batch.filled.sum() == 0:
        raise UsageError("TD loss needs a non-empty batch")
    members = group.members
    online = online or unroll_group(group.agent, batch, members, noise_rng)
    with no_grad():
        target_q = unroll_group(target.agent, batch, members).q_values.data
    chosen = chosen_action_values(online.q_values, batch.actions[:, :, members])
    next_max = target_max_values(target_q, batch.avail_actions[:, :, members])
    not_done = 1.0 - batch.terminated
    B, T = batch.rewards.shape

    if mixing == MIX_INDEPENDENT:
        y = batch.rewards[..., None] + gamma * not_done[..., None] * next_max
        return masked_td_loss(chosen, y, batch.filled[..., None])
    if mixing == MIX_ADDITIVE:
        q_total = chosen.sum(axis=-1)
        next_total = next_max.sum(axis=-1)
    elif mixing == MIX_MONOTONIC:
        m = len(members)
        q_total = group.mixer(chosen.reshape(B * T, m), batch.states[:, :-1].reshape(B * T, -1)).reshape(B, T)
        with no_grad():
            next_total = target.mixer(next_max.reshape(B * T, m),
                                      batch.states[:, 1:].reshape(B * T, -1)).data.reshape(B, T)
    else:
        raise ConfigError(f"Unknown mixing mode '{mixing}'")
    y = batch.rewards + gamma * not_done * next_total
    return masked_td_loss(q_total, y, batch.filled)


def group_latent(unroll: Unroll, steps: int) -> Tuple[Tensor, GaussianDistribution, Tensor]:
    """Group-level hidden state, latent distribution and latent sample (means over members)"""
    hidden = unroll.hiddens[:, :steps].mean(axis=2)
    dist = GaussianDistribution(unroll.latent_mean[:, :steps].mean(axis=2),
                                unroll.latent_log_std[:, :steps].mean(axis=2))
    sample = unroll.latent_samples[:, :steps].mean(axis=2)
    return hidden, dist, sample


def igmi_loss(batch: EpisodeBatch, online_m: Unroll, online_n: Unroll, inference_m: InferenceNetwork) -> Tensor:
    """KL(p(l_m) || q_m(l_m | l_n, h_m)) over filled steps, with l_n detached"""
    B, T = batch.rewards.shape
    hidden_m, prior_m, _ = group_latent(online_m, T)
    _, _, latent_n = group_latent(online_n, T)
    latent_n = latent_n.detach()
    L = prior_m.mean.shape[-1]
    posterior = inference_m(latent_n.reshape(B * T, L), hidden_m.reshape(B * T, -1))
    prior = GaussianDistribution(prior_m.mean.reshape(B * T, L), prior_m.log_std.reshape(B * T, L))
    kl = gaussian_kl(prior, posterior, reduce=False).reshape(B, T)
    filled = batch.filled
    return (kl * filled).sum() * (1.0 / filled.sum())


# ---- action selection -------------------------------------------------------

def epsilon_greedy(q_values: Sequence[np.ndarray], masks: Sequence[np.ndarray], epsilon: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Per agent: uniform over available actions with prob epsilon, masked argmax otherwise"""
    actions = np.zeros(len(q_values), dtype=np.int64)
    for i, (q, mask) in enumerate(zip(q_values, masks)):
        available = np.flatnonzero(np.asarray(mask) > 0)
        if len(available) == 0:
            raise ContractViolation(f"Agent {i} has no available action")
        if rng.random() < epsilon:
            actions[i] = int(rng.choice(available))
        else:
            actions[i] = masked_argmax(q, mask)
    return actions


class AgentController:
    """Decentralized execution: carries each agent's recurrent state and last action"""

    def __init__(self, learner: "Learner"):
        self.learner = learner
        self.reset()

    def reset(self):
        self.hidden = [g.agent.initial_hidden(len(g.members)) for g in self.learner.groups]
        self.last_actions = np.zeros(self.learner.n_agents, dtype=np.int64)
        self.started = False

    def q_values(self, observations: np.ndarray,
                 noise_rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
        q: List[Optional[np.ndarray]] = [None] * self.learner.n_agents
        with no_grad():
            for g, group in enumerate(self.learner.groups):
                members, agent = group.members, group.agent
                last = np.zeros((len(members), agent.n_actions))
                if self.started:
                    last = one_hot(self.last_actions[members], agent.n_actions)
                noise = None
                if noise_rng is not None:
                    noise = noise_rng.standard_normal((len(members), agent.latent_dim))
                out = agent_forward(agent, observations[members], last, self.hidden[g], noise)
                self.hidden[g] = out.hidden
                for k, agent_index in enumerate(members):
                    q[agent_index] = out.q_values.data[k]
        return q

    def select_actions(self, observations: np.ndarray, masks: np.ndarray, epsilon: float,
                       rng: np.random.Generator, noise_rng: Optional[np.random.Generator] = None) -> np.ndarray:
        q = self.q_values(observations, noise_rng)
        agent_masks = [masks[i, :len(q[i])] for i in range(self.learner.n_agents)]
        actions = epsilon_greedy(q, agent_masks, epsilon, rng)
        self.last_actions = actions
        self.started = True
        return actions


class GreedyPolicy:
    """Evaluation policy: epsilon 0, latent mean"""

    def __init__(self, learner: "Learner"):
        self.controller = AgentController(learner)
        self._rng = np.random.default_rng(0)

    def reset(self):
        self.controller.reset()

    def act(self, observations: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return self.controller.select_actions(observations, masks, 0.0, self._rng)


# ---- learner ---------------------------------------------------------------

class Learner:
    """Owns online/target networks and the optimizer for one algorithm variant"""

    def __init__(self, map_config: MapConfig, config: TrainConfig, rng: np.random.Generator,
                 noise_rng: Optional[np.random.Generator] = None):
        self.map_config = map_config
        self.config = config
        self.variant = AlgorithmVariant(config.algo)
        env = CombatEnv(map_config)
        self.obs_dim, self.state_dim, self.padded_actions = env.obs_dim, env.state_dim, env.n_actions
        self.n_agents = map_config.n_allies

        if self.variant.grouped:
            self.assignment = group_by_ideal_object(map_config, config.split_by_kind)
            if not validate_jtc(self.assignment, self.n_agents):
                raise ConfigError(f"Grouping of map '{map_config.name}' violates the joint trajectory condition")
            self.mixing = MIX_MONOTONIC
            dims = [self.assignment.action_dim(g) for g in range(self.assignment.n_groups)]
        else:
            self.assignment = single_group(map_config)
            self.mixing = _BASELINE_MIXING[self.variant]
            dims = [self.padded_actions]

        self.use_mi = self.variant.uses_mi and self.assignment.n_groups >= 2
        if self.variant.uses_mi and not self.use_mi:
            logger.warning(f"Map '{map_config.name}' has a single group; inter-group MI loss disabled")

        self.groups: List[GroupNets] = []
        for g, members in enumerate(self.assignment.groups):
            agent = AgentNetwork(self.obs_dim, dims[g], rng, config.hidden_dim, config.latent_dim, group_id=g)
            mixer = None
            if self.mixing == MIX_MONOTONIC:
                mixer = MixingNetwork(len(members), self.state_dim, rng,
                                      config.mixing_embed_dim, config.hypernet_embed_dim)
            inference = InferenceNetwork(config.latent_dim, config.hidden_dim, rng, group_id=g) if self.use_mi else None
            self.groups.append(GroupNets(list(members), agent, mixer, inference))

        self.noise_rng = noise_rng or np.random.default_rng()
        self.optimizer = Adam(self.named_parameters(), lr=config.lr)
        self.targets: List[GroupNets] = []
        self.train_steps = 0
        self.target_updates = 0
        self.update_targets()

    # ---- parameters ---------------------------------------------------------

    @property
    def group_labels(self) -> List[str]:
        return [self.assignment.label(g) for g in range(self.assignment.n_groups)]

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {}
        for g, group in enumerate(self.groups):
            for role, module in group.modules().items():
                for name, p in module.named_parameters():
                    params[f"group{g}.{role}.{name}"] = p
        return params

    def group_parameters(self, g: int, roles: Sequence[str] = ("agent", "mixer", "inference")) -> List[Tensor]:
        modules = self.groups[g].modules()
        return [p for role in roles if role in modules for p in modules[role].parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = self.named_parameters()
        missing = sorted(set(own) - set(state))
        if missing:
            raise CheckpointError(f"Checkpoint lacks {len(missing)} parameters, e.g. {missing[0]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise CheckpointError(f"Shape mismatch for {name}: {value.shape} vs {p.data.shape}")
            p.data[...] = value
        self.update_targets()

    def checkpoint_meta(self) -> Dict[str, Any]:
        return {
            "algo": self.variant.value,
            "map": self.map_config.name,
            "obs_dim": self.obs_dim,
            "state_dim": self.state_dim,
            "n_actions": [g.agent.n_actions for g in self.groups],
            "assignment": self.assignment.to_dict(),
            "train_config": self.config.model_dump(mode="json"),
        }

    @classmethod
    def from_checkpoint(cls, path: Path, map_config: MapConfig) -> "Learner":
        params, meta = load_checkpoint_file(path)
        if not meta:
            raise CheckpointError(f"Checkpoint {path} carries no metadata")
        env = CombatEnv(map_config)
        if meta.get("obs_dim") != env.obs_dim or meta.get("state_dim") != env.state_dim:
            raise CheckpointError(
                f"Checkpoint built for obs/state dims {meta.get('obs_dim')}/{meta.get('state_dim')}, "
                f"map '{map_config.name}' has {env.obs_dim}/{env.state_dim}"
            )
        config = TrainConfig(**meta.get("train_config", {"algo": meta.get("algo", "ghq")}))
        learner = cls(map_config, config, np.random.default_rng(0))
        if [g.agent.n_actions for g in learner.groups] != meta.get("n_actions"):
            raise CheckpointError(f"Checkpoint action dims {meta.get('n_actions')} do not fit map '{map_config.name}'")
        learner.load_state_dict(params)
        return learner

    # ---- training -----------------------------------------------------------

    def update_targets(self):
        """Hard copy of online agent and mixer parameters"""
        self.targets = [g.target_copy() for g in self.groups]
        self.target_updates += 1

    def decay_lr(self, factor: float) -> float:
        self.optimizer.lr = self.optimizer.lr * factor
        return self.optimizer.lr

    def unroll_all(self, batch: EpisodeBatch) -> List[Unroll]:
        return [unroll_group(g.agent, batch, g.members, self.noise_rng) for g in self.groups]

    def total_loss(self, batch: EpisodeBatch) -> LossBreakdown:
        """lambda_td * sum of group TD losses + lambda_mi * sum of group MI losses.

        A group's MI loss is the mean of its KL terms over every partner group, so with
        three or more groups each group's MI weight stays independent of the group count.
        """
        cfg = self.config
        online = self.unroll_all(batch)
        td_terms = [
            group_td_loss(batch, group, self.targets[g], cfg.gamma, self.mixing, online=online[g])
            for g, group in enumerate(self.groups)
        ]
        total = cfg.lambda_td * _sum(td_terms)
        breakdown = LossBreakdown(total=total, td=[t.item() for t in td_terms])
        if self.use_mi and cfg.lambda_mi > 0:
            mi_terms = []
            for m, group in enumerate(self.groups):
                partners = [n for n in range(len(self.groups)) if n != m]
                pair_losses = [igmi_loss(batch, online[m], online[n], group.inference) for n in partners]
                mi_terms.append(_sum(pair_losses) * (1.0 / len(partners)))
            breakdown.total = total + cfg.lambda_mi * _sum(mi_terms)
            breakdown.mi = [t.item() for t in mi_terms]
        return breakdown

    def train(self, batch: EpisodeBatch) -> Tuple[LossBreakdown, float]:
        self.optimizer.zero_grad()
        losses = self.total_loss(batch)
        losses.total.backward()
        grad_norm = clip_grad_norm(list(self.optimizer.params.values()), self.config.grad_clip_norm)
        self.optimizer.step()
        self.train_steps += 1
        return losses, grad_norm


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total
