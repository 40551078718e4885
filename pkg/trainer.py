"""Training loop: rollout, store, sample, update, with periodic greedy evaluation"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from checkpoint_manager import CheckpointManager
from combat_env import CombatEnv
from config import TrainConfig
from evaluation import evaluate_policy
from learner import AgentController, Learner
from logger import get_logger
from maps import MapConfig
from replay_buffer import Episode, EpisodeBuffer

logger = get_logger()

EVAL_SEED_OFFSET = 1_000_003


@dataclass
class RolloutStats:
    length: int
    episode_return: float
    won: bool


@dataclass
class TrainingResult:
    learner: Learner
    metrics: List[Dict[str, Any]] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    env_steps: int = 0
    episodes: int = 0


def collect_episode(env: CombatEnv, controller: AgentController, config: TrainConfig, env_step: int,
                    seed: int, rng: np.random.Generator,
                    noise_rng: Optional[np.random.Generator] = None) -> Tuple[Episode, RolloutStats]:
    """One epsilon-greedy rollout; epsilon follows the global env-step schedule"""
    state, observations, state_vector = env.reset(seed)
    controller.reset()
    obs_seq, state_seq, mask_seq = [observations], [state_vector], [env.available_actions()]
    actions, rewards, terminated = [], [], []
    episode_return = 0.0
    while True:
        epsilon = config.epsilon_at(env_step + len(actions))
        chosen = controller.select_actions(obs_seq[-1], mask_seq[-1], epsilon, rng, noise_rng)
        result = env.step(chosen)
        actions.append(chosen)
        rewards.append(result.reward)
        terminated.append(float(result.terminated and not result.info["truncated"]))
        episode_return += result.reward
        obs_seq.append(result.observations)
        state_seq.append(result.state_vector)
        mask_seq.append(env.available_actions())
        if result.terminated:
            break
    episode = Episode(
        observations=np.stack(obs_seq),
        states=np.stack(state_seq),
        avail_actions=np.stack(mask_seq),
        actions=np.stack(actions),
        rewards=np.array(rewards),
        terminated=np.array(terminated),
    )
    return episode, RolloutStats(len(actions), episode_return, bool(result.info["won"]))


def run_training(config: TrainConfig, map_config: MapConfig, seed: int,
                 run_dir: Optional[Path] = None, show_progress: bool = False) -> TrainingResult:
    """Train one variant on one map; metrics go to run_dir/metrics.jsonl when run_dir is given"""
    map_config = map_config.with_episode_limit(config.max_episode_steps)
    init_seq, env_seq, explore_seq, noise_seq, buffer_seq = np.random.SeedSequence(seed).spawn(5)
    env_rng = np.random.default_rng(env_seq)
    explore_rng = np.random.default_rng(explore_seq)
    noise_rng = np.random.default_rng(noise_seq)

    learner = Learner(map_config, config, np.random.default_rng(init_seq), noise_rng=noise_rng)
    controller = AgentController(learner)
    buffer = EpisodeBuffer(config.buffer_capacity, np.random.default_rng(buffer_seq))
    env = CombatEnv(map_config)
    manager = CheckpointManager(run_dir) if run_dir is not None else None
    if manager:
        manager.reset_metrics()

    logger.info(
        f"Training [bold]{config.algo.value}[/bold] on {map_config.name} (seed {seed}): "
        f"{learner.assignment.n_groups} group(s) {learner.group_labels}"
    )
    result = TrainingResult(learner=learner)
    env_step, episode, next_eval = 0, 0, 0
    since_eval: List[Dict[str, List[float]]] = []
    logger.log_target_update(0)

    def evaluate():
        record, _ = evaluate_policy(learner, map_config, config.test_episodes,
                                    seed=seed + EVAL_SEED_OFFSET, env_step=env_step)
        record.episode = episode
        record.seed = seed
        record.epsilon = config.epsilon_at(env_step)
        record.lr = learner.optimizer.lr
        record.td_losses, record.mi_losses = _mean_losses(since_eval, learner.group_labels)
        since_eval.clear()
        row = record.to_dict()
        result.metrics.append(row)
        if manager:
            manager.append_metrics(row)

    progress = tqdm(total=config.total_steps, desc=f"{config.algo.value}/{map_config.name}",
                    unit="step", disable=not show_progress)
    while env_step < config.total_steps:
        if env_step >= next_eval:
            evaluate()
            while env_step >= next_eval:
                next_eval += config.eval_interval
        episode_seed = int(env_rng.integers(2**31 - 1))
        data, stats = collect_episode(env, controller, config, env_step, episode_seed, explore_rng, noise_rng)
        buffer.insert(data)
        env_step += stats.length
        episode += 1
        progress.update(stats.length)
        logger.log_episode(episode, env_step, stats.length, stats.episode_return, stats.won,
                           config.epsilon_at(env_step))

        if buffer.can_sample(config.batch_size):
            losses, grad_norm = learner.train(buffer.sample(config.batch_size))
            since_eval.append({"td": losses.td, "mi": losses.mi})
            logger.log_update(episode, losses.as_dict(learner.group_labels), grad_norm)

        if episode % config.target_update_interval == 0:
            learner.update_targets()
            logger.log_target_update(episode)
        if episode % config.lr_decay_interval == 0:
            logger.log_lr_decay(episode, learner.decay_lr(config.lr_decay_factor))
    progress.close()
    evaluate()

    result.env_steps, result.episodes = env_step, episode
    if manager:
        result.checkpoint_path = manager.save_checkpoint(learner.state_dict(), learner.checkpoint_meta())
    return result


def _mean_losses(history: List[Dict[str, List[float]]], labels: List[str]):
    td: Dict[str, float] = {}
    mi: Dict[str, float] = {}
    for key, target in (("td", td), ("mi", mi)):
        rows = [h[key] for h in history if h[key]]
        if rows:
            means = np.mean(np.array(rows), axis=0)
            target.update({labels[g]: float(v) for g, v in enumerate(means)})
    return td, mi
