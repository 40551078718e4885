from enum import Enum
from typing import Optional
from pathlib import Path
import os

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

load_dotenv()


class Config:
    # Training hyper-parameters
    LEARNING_RATE = 3e-4
    LR_DECAY_FACTOR = 0.5
    LR_DECAY_INTERVAL = 50_000      # episodes
    TOTAL_STEPS = 5_000_000
    MAX_EPISODE_STEPS = 200
    GAMMA = 0.99
    EPSILON_START = 1.0
    EPSILON_END = 0.05
    EPSILON_ANNEAL_STEPS = 50_000
    BUFFER_CAPACITY = 5000          # episodes
    BATCH_SIZE = 32
    LAMBDA_TD = 1.0
    LAMBDA_MI = 1.0

    TARGET_UPDATE_INTERVAL = 200    # training episodes
    GRAD_CLIP_NORM = 10.0

    # Network sizes
    HIDDEN_DIM = 64
    LATENT_DIM = 16
    MIXING_EMBED_DIM = 32
    HYPERNET_EMBED_DIM = 64
    LOG_STD_MIN = -5.0
    LOG_STD_MAX = 2.0

    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPSILON = 1e-8

    # Evaluation
    TEST_EPISODES = 32
    EVAL_INTERVAL = 10_000          # env steps
    HEATMAP_EPISODES = 50
    HEALTH_BINS = 11

    # Environment defaults
    MAP_SIZE = 32.0
    SIGHT_RANGE = 9.0
    STEP_DURATION = 1.0
    MOVE_AMOUNT = 1.0
    WEAPON_COOLDOWN = 1.0
    CLUSTER_SPACING = 12.0
    KILL_REWARD = 10.0
    WIN_REWARD = 200.0

    # Paths
    OUTPUT_ROOT = Path(os.getenv("GHQ_OUTPUT_ROOT", "runs"))
    MAPS_DIR = Path(__file__).parent / "maps"

    # Logging configuration
    LOG_FILE = os.getenv("GHQ_LOG_FILE", "ghq.log")
    LOG_MAX_BYTES = 10 * 1024 * 1024  # 10MB
    LOG_BACKUP_COUNT = 5


class AlgorithmVariant(str, Enum):
    GHQ = "ghq"
    GHQ_NO_MI = "ghq-nomi"
    IQL = "iql"
    VDN = "vdn"
    QMIX_SHARED = "qmix"

    @property
    def grouped(self) -> bool:
        return self in (AlgorithmVariant.GHQ, AlgorithmVariant.GHQ_NO_MI)

    @property
    def uses_mi(self) -> bool:
        return self is AlgorithmVariant.GHQ


class TrainConfig(BaseModel):
    """Training hyper-parameters; defaults are the full-scale experiment settings."""

    algo: AlgorithmVariant = AlgorithmVariant.GHQ
    total_steps: int = Field(default=Config.TOTAL_STEPS, gt=0)
    max_episode_steps: Optional[int] = Field(default=None, gt=0)  # overrides the map limit when set
    lr: float = Field(default=Config.LEARNING_RATE, gt=0)
    lr_decay_factor: float = Field(default=Config.LR_DECAY_FACTOR, gt=0, le=1)
    lr_decay_interval: int = Field(default=Config.LR_DECAY_INTERVAL, gt=0)
    gamma: float = Field(default=Config.GAMMA, gt=0, le=1)
    epsilon_start: float = Config.EPSILON_START
    epsilon_end: float = Config.EPSILON_END
    epsilon_anneal_steps: int = Field(default=Config.EPSILON_ANNEAL_STEPS, gt=0)
    buffer_capacity: int = Field(default=Config.BUFFER_CAPACITY, gt=0)
    batch_size: int = Field(default=Config.BATCH_SIZE, gt=0)
    lambda_td: float = Field(default=Config.LAMBDA_TD, ge=0)
    lambda_mi: float = Field(default=Config.LAMBDA_MI, ge=0)
    target_update_interval: int = Field(default=Config.TARGET_UPDATE_INTERVAL, gt=0)
    grad_clip_norm: float = Field(default=Config.GRAD_CLIP_NORM, gt=0)
    eval_interval: int = Field(default=Config.EVAL_INTERVAL, gt=0)
    test_episodes: int = Field(default=Config.TEST_EPISODES, gt=0)
    hidden_dim: int = Field(default=Config.HIDDEN_DIM, gt=0)
    latent_dim: int = Field(default=Config.LATENT_DIM, gt=0)
    mixing_embed_dim: int = Field(default=Config.MIXING_EMBED_DIM, gt=0)
    hypernet_embed_dim: int = Field(default=Config.HYPERNET_EMBED_DIM, gt=0)
    split_by_kind: bool = False

    @field_validator("epsilon_start", "epsilon_end")
    @classmethod
    def _epsilon_in_range(cls, value: float) -> float:
        if not Config.EPSILON_END <= value <= 1.0:
            raise ValueError(f"epsilon must lie in [{Config.EPSILON_END}, 1.0], got {value}")
        return value

    @model_validator(mode="after")
    def _epsilon_decreasing(self) -> "TrainConfig":
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must not exceed epsilon_start")
        return self

    def epsilon_at(self, env_step: int) -> float:
        """Linear annealing from epsilon_start to epsilon_end."""
        frac = min(1.0, max(0, env_step) / self.epsilon_anneal_steps)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
