"""Win-rate evaluation, map difficulty criteria, significance tests and heat-map diagnostics"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from combat_env import CombatEnv, NULL_ACTION
from config import Config
from exceptions import UsageError
from learner import GreedyPolicy, Learner
from logger import get_logger
from maps import MapConfig, UnitKind

logger = get_logger()


class Policy(Protocol):
    def reset(self) -> None: ...

    def act(self, observations: np.ndarray, masks: np.ndarray) -> np.ndarray: ...


class StopPolicy:
    """Scripted baseline: every living agent issues stop"""

    def reset(self):
        pass

    def act(self, observations: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return np.where(masks[:, 1] > 0, 1, 0)


class RandomPolicy:
    """Uniform over available actions"""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def reset(self):
        pass

    def act(self, observations: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return np.array([int(self.rng.choice(np.flatnonzero(m))) for m in masks])


@dataclass
class MetricsRecord:
    env_step: int
    win_rate: float
    mean_return: float
    n_episodes: int
    seed: int
    episode: int = 0
    epsilon: float = 0.0
    lr: float = 0.0
    td_losses: Dict[str, float] = field(default_factory=dict)
    mi_losses: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "env_step": self.env_step,
            "episode": self.episode,
            "test_win_rate": self.win_rate,
            "mean_return": self.mean_return,
            "n_episodes": self.n_episodes,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "lr": self.lr,
            "td_loss": self.td_losses,
            "mi_loss": self.mi_losses,
        }


# ---- map criteria ----------------------------------------------------------------

def compute_pos(config: MapConfig) -> float:
    """Proportion of supporting units among the allies"""
    if config.n_allies == 0:
        raise UsageError(f"Map '{config.name}' has no allied units")
    return config.count("ally", UnitKind.SUPPORTER) / config.n_allies


def compute_es(config: MapConfig, weights: Optional[Mapping[str, float]] = None) -> float:
    """Weighted enemy attackers over weighted ally attackers; weights keyed by unit name, default 1"""
    weights = weights or {}

    def weighted(units) -> float:
        return sum(weights.get(u.stats.name, 1.0) for u in units if u.stats.is_attacker)

    ally = weighted(config.ally_units)
    if ally <= 0:
        raise UsageError(f"Map '{config.name}' has no weighted ally attackers")
    return weighted(config.enemy_units) / ally


# ---- evaluation ----------------------------------------------------------------------

def run_episode(env: CombatEnv, policy: Policy, seed: int) -> Dict[str, Any]:
    """Play one episode, recording per-step ally health fractions and chosen actions"""
    state, observations, _ = env.reset(seed)
    policy.reset()
    health, actions = [], []
    total_return, raw_return = 0.0, 0.0
    while True:
        masks = env.available_actions()
        chosen = policy.act(observations, masks)
        health.append([u.health_fraction for u in state.allies])
        actions.append([int(a) for a in chosen])
        result = env.step(chosen)
        total_return += result.reward
        raw_return += result.info["raw_reward"]
        observations = result.observations
        if result.terminated:
            break
    return {
        "seed": int(seed),
        "won": bool(result.info["won"]),
        "return": total_return,
        "raw_return": raw_return,
        "length": len(actions),
        "unit_names": [u.stats.name for u in env.config.ally_units],
        "n_actions": env.n_actions,
        "health": health,
        "actions": actions,
    }


def evaluate_policy(policy: Union[Policy, Any, Path, str], map_config: MapConfig,
                    n_episodes: int = Config.TEST_EPISODES, seed: int = 0,
                    env_step: int = 0) -> Tuple[MetricsRecord, List[Dict[str, Any]]]:
    """Greedy test episodes seeded seed, seed+1, ...; WR = wins / n_episodes"""
    if isinstance(policy, (str, Path)):
        policy = Learner.from_checkpoint(Path(policy), map_config)
    if isinstance(policy, Learner):
        policy = GreedyPolicy(policy)
    if n_episodes < 1:
        raise UsageError("Evaluation needs at least one episode")
    env = CombatEnv(map_config)
    trajectories = [run_episode(env, policy, seed + i) for i in range(n_episodes)]
    wins = sum(1 for t in trajectories if t["won"])
    record = MetricsRecord(
        env_step=env_step,
        win_rate=wins / n_episodes,
        mean_return=float(np.mean([t["return"] for t in trajectories])),
        n_episodes=n_episodes,
        seed=seed,
    )
    logger.log_eval(env_step, record.win_rate, record.mean_return, n_episodes)
    return record, trajectories


# ---- heat-maps -------------------------------------------------------------------------

def health_bin(fraction: float, alive: bool) -> int:
    if not alive:
        return 0
    return min(Config.HEALTH_BINS - 1, int(math.floor(fraction * (Config.HEALTH_BINS - 1))))


@dataclass
class HeatmapAccumulator:
    """Counts of units per (health decile, step) and per (action ID, step) for one unit kind"""
    unit_kind: str
    health_counts: np.ndarray
    action_counts: np.ndarray
    units_per_step: np.ndarray
    first_death_step: Optional[int] = None

    def to_frames(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        columns = [f"t{t}" for t in range(self.health_counts.shape[1])]
        bins = Config.HEALTH_BINS - 1
        health = pd.DataFrame(self.health_counts, columns=columns,
                              index=[f"hp_{100 * b // bins}%" for b in range(Config.HEALTH_BINS)])
        action = pd.DataFrame(self.action_counts, columns=columns,
                              index=[f"action_{a}" for a in range(self.action_counts.shape[0])])
        return health, action


def accumulate_heatmaps(trajectories: Sequence[Dict[str, Any]], unit_kind: str) -> HeatmapAccumulator:
    if not trajectories:
        raise UsageError("No trajectories to accumulate")
    horizon = max(t["length"] for t in trajectories)
    n_actions = max(t["n_actions"] for t in trajectories)
    health_counts = np.zeros((Config.HEALTH_BINS, horizon), dtype=np.int64)
    action_counts = np.zeros((n_actions, horizon), dtype=np.int64)
    units_per_step = np.zeros(horizon, dtype=np.int64)
    first_death: Optional[int] = None
    for trajectory in trajectories:
        units = [i for i, name in enumerate(trajectory["unit_names"]) if name == unit_kind]
        for t in range(trajectory["length"]):
            for i in units:
                fraction = trajectory["health"][t][i]
                alive = fraction > 0
                health_counts[health_bin(fraction, alive), t] += 1
                action_counts[trajectory["actions"][t][i], t] += 1
                units_per_step[t] += 1
                if not alive and (first_death is None or t < first_death):
                    first_death = t
    return HeatmapAccumulator(unit_kind, health_counts, action_counts, units_per_step, first_death)


def check_heatmap_structure(acc: HeatmapAccumulator) -> Dict[str, bool]:
    """Conservation of both matrices and an action-0 row that is silent before the first death"""
    death = acc.first_death_step if acc.first_death_step is not None else acc.action_counts.shape[1]
    return {
        "health_conserved": bool(np.array_equal(acc.health_counts.sum(axis=0), acc.units_per_step)),
        "actions_conserved": bool(np.array_equal(acc.action_counts.sum(axis=0), acc.units_per_step)),
        "null_action_after_death_only": bool(acc.action_counts[NULL_ACTION, :death].sum() == 0),
    }


# ---- statistics -------------------------------------------------------------------------

def welch_t_test(mean_a: float, std_a: float, mean_b: float, std_b: float, n: int,
                 mode: str = "closed_form", rng: Optional[np.random.Generator] = None) -> Tuple[float, float]:
    """Unequal-variance two-sample t-test from summary statistics.

    ``mode="sample"`` synthesizes n normal draws per side and tests those instead.
    """
    if std_a < 0 or std_b < 0 or n < 2:
        raise UsageError("welch_t_test needs std >= 0 and n >= 2")
    if std_a == 0 and std_b == 0:
        if mean_a == mean_b:
            return 0.0, 1.0
        return math.copysign(math.inf, mean_a - mean_b), 0.0
    if mode == "closed_form":
        result = stats.ttest_ind_from_stats(mean_a, std_a, n, mean_b, std_b, n, equal_var=False)
    elif mode == "sample":
        rng = rng or np.random.default_rng(0)
        result = stats.ttest_ind(rng.normal(mean_a, std_a, n), rng.normal(mean_b, std_b, n), equal_var=False)
    else:
        raise UsageError(f"Unknown t-test mode '{mode}'")
    return float(result.statistic), float(result.pvalue)


def final_win_rates(runs: Mapping[str, Sequence[Sequence[Dict[str, Any]]]]) -> Dict[str, List[float]]:
    """Last recorded test WR of every seed, per algorithm"""
    return {algo: [records[-1]["test_win_rate"] for records in seeds if records] for algo, seeds in runs.items()}


def compare_runs(runs: Mapping[str, Sequence[Sequence[Dict[str, Any]]]], reference: str = "ghq",
                 mode: str = "closed_form") -> pd.DataFrame:
    """Final WR mean/std per algorithm and a Welch test of the reference against each other one"""
    finals = final_win_rates(runs)
    rows = []
    ref = np.array(finals.get(reference, []), dtype=np.float64)
    for algo, values in finals.items():
        values = np.array(values, dtype=np.float64)
        row = {"algo": algo, "seeds": len(values),
               "wr_mean": float(values.mean()) if len(values) else float("nan"),
               "wr_std": float(values.std()) if len(values) else float("nan"),
               "t_vs_ref": float("nan"), "p_vs_ref": float("nan")}
        n = min(len(values), len(ref))
        if algo != reference and n >= 2:
            t, p = welch_t_test(ref.mean(), ref.std(), values.mean(), values.std(), n, mode=mode)
            row["t_vs_ref"], row["p_vs_ref"] = t, p
        rows.append(row)
    return pd.DataFrame(rows).set_index("algo")


def win_rate_curves(runs: Mapping[str, Sequence[Sequence[Dict[str, Any]]]]) -> pd.DataFrame:
    """Long-format per-seed WR curves"""
    rows = [
        {"algo": algo, "seed": record.get("seed", s), "env_step": record["env_step"],
         "test_win_rate": record["test_win_rate"]}
        for algo, seeds in runs.items()
        for s, records in enumerate(seeds)
        for record in records
    ]
    return pd.DataFrame(rows, columns=["algo", "seed", "env_step", "test_win_rate"])
