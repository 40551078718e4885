"""Pytest fixtures for GHQ tests"""
import pytest
import tempfile
import shutil
from pathlib import Path
import sys

import numpy as np

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import TrainConfig
from combat_env import CombatEnv
from learner import AgentController, Learner
from maps import load_map
from replay_buffer import EpisodeBatch
from trainer import collect_episode


@pytest.fixture(autouse=True)
def reset_logging():
    """Reset logging between tests"""
    import logging
    logging.getLogger().handlers.clear()
    logging.getLogger("ghq").handlers.clear()
    yield


@pytest.fixture
def temp_run_dir():
    """Temporary run directory"""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_map():
    """Two marines and a medivac against three weakened marines"""
    return load_map("2m1m_3m")


@pytest.fixture
def desk_map():
    return load_map("3m1m_5m")


@pytest.fixture
def mmm_map():
    """Three unit kinds, two ideal-object groups"""
    return load_map("mmm2_desk")


@pytest.fixture
def homogeneous_map():
    return load_map("3m")


@pytest.fixture
def tiny_config():
    """Small networks and short schedules for fast learner tests"""
    return TrainConfig(
        algo="ghq",
        total_steps=300,
        hidden_dim=8,
        latent_dim=4,
        mixing_embed_dim=4,
        hypernet_embed_dim=8,
        batch_size=2,
        buffer_capacity=16,
        target_update_interval=2,
        eval_interval=150,
        test_episodes=2,
        epsilon_anneal_steps=200,
    )


@pytest.fixture
def tiny_learner(mmm_map, tiny_config):
    return Learner(mmm_map, tiny_config, np.random.default_rng(0), noise_rng=np.random.default_rng(1))


@pytest.fixture
def sample_episodes(mmm_map, tiny_learner, tiny_config):
    """Three random-action episodes with varying lengths"""
    env = CombatEnv(mmm_map)
    controller = AgentController(tiny_learner)
    explore = np.random.default_rng(7)
    return [collect_episode(env, controller, tiny_config, 0, seed, explore)[0] for seed in (11, 12, 13)]


@pytest.fixture
def sample_batch(sample_episodes):
    return EpisodeBatch.from_episodes(sample_episodes)
