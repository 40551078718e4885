"""Episode storage and padded batch sampling"""
from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional, Sequence

import numpy as np

from config import Config
from exceptions import ConfigError, UsageError


@dataclass
class Episode:
    """One trajectory: T+1 observations/states/masks around T actions/rewards"""
    observations: np.ndarray    # [T+1, K, obs_dim]
    states: np.ndarray          # [T+1, state_dim]
    avail_actions: np.ndarray   # [T+1, K, A]
    actions: np.ndarray         # [T, K]
    rewards: np.ndarray         # [T]
    terminated: np.ndarray      # [T], set only on true termination

    def __post_init__(self):
        steps = len(self.actions)
        if steps < 1:
            raise ConfigError("An episode needs at least one step")
        for name in ("observations", "states", "avail_actions"):
            if len(getattr(self, name)) != steps + 1:
                raise ConfigError(f"{name} must hold {steps + 1} entries, got {len(getattr(self, name))}")
        if len(self.rewards) != steps or len(self.terminated) != steps:
            raise ConfigError("rewards and terminated flags must hold one entry per step")

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class EpisodeBatch:
    observations: np.ndarray    # [B, T+1, K, obs_dim]
    actions: np.ndarray         # [B, T, K]
    rewards: np.ndarray         # [B, T]
    states: np.ndarray          # [B, T+1, state_dim]
    avail_actions: np.ndarray   # [B, T+1, K, A]
    terminated: np.ndarray      # [B, T]
    filled: np.ndarray          # [B, T]

    @property
    def batch_size(self) -> int:
        return self.actions.shape[0]

    @property
    def max_steps(self) -> int:
        return self.actions.shape[1]

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "EpisodeBatch":
        if not episodes:
            raise UsageError("Cannot build a batch from zero episodes")
        B = len(episodes)
        T = max(e.length for e in episodes)
        first = episodes[0]
        K, obs_dim = first.observations.shape[1:]
        A = first.avail_actions.shape[-1]
        observations = np.zeros((B, T + 1, K, obs_dim))
        states = np.zeros((B, T + 1, first.states.shape[-1]))
        avail = np.zeros((B, T + 1, K, A), dtype=np.int64)
        avail[..., 0] = 1  # padding steps: only the null action
        actions = np.zeros((B, T, K), dtype=np.int64)
        rewards = np.zeros((B, T))
        terminated = np.zeros((B, T))
        filled = np.zeros((B, T))
        for b, e in enumerate(episodes):
            L = e.length
            observations[b, :L + 1] = e.observations
            states[b, :L + 1] = e.states
            avail[b, :L + 1] = e.avail_actions
            actions[b, :L] = e.actions
            rewards[b, :L] = e.rewards
            terminated[b, :L] = e.terminated
            filled[b, :L] = 1.0
        return cls(observations, actions, rewards, states, avail, terminated, filled)


class EpisodeBuffer:
    """FIFO of complete episodes, sampled uniformly without replacement"""

    def __init__(self, capacity: int = Config.BUFFER_CAPACITY, rng: Optional[np.random.Generator] = None):
        if capacity < 1:
            raise ConfigError("Buffer capacity must be positive")
        self.capacity = capacity
        self.episodes: Deque[Episode] = deque(maxlen=capacity)
        self.rng = rng or np.random.default_rng()
        self.inserted = 0

    def __len__(self) -> int:
        return len(self.episodes)

    def insert(self, episode: Episode):
        self.episodes.append(episode)
        self.inserted += 1

    def can_sample(self, batch_size: int) -> bool:
        return len(self.episodes) >= batch_size

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if not self.can_sample(batch_size):
            raise UsageError(f"Buffer holds {len(self.episodes)} episodes, cannot sample {batch_size}")
        return self.rng.choice(len(self.episodes), size=batch_size, replace=False)

    def sample(self, batch_size: int) -> EpisodeBatch:
        return EpisodeBatch.from_episodes([self.episodes[i] for i in self.sample_indices(batch_size)])
