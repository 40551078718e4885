"""Deterministic heterogeneous micro-combat simulator (decentralized, partially observable)"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from exceptions import ConfigError, ContractViolation
from logger import get_logger
from maps import MapConfig, UnitStats

logger = get_logger()

# Action IDs shared by every unit kind
NULL_ACTION = 0
STOP_ACTION = 1
MOVE_UP, MOVE_DOWN, MOVE_LEFT, MOVE_RIGHT = 2, 3, 4, 5
COMMON_ACTION_DIM = 6

_DIRECTIONS = {
    MOVE_UP: np.array([0.0, 1.0]),
    MOVE_DOWN: np.array([0.0, -1.0]),
    MOVE_LEFT: np.array([-1.0, 0.0]),
    MOVE_RIGHT: np.array([1.0, 0.0]),
}

ALLY = "ally"
ENEMY = "enemy"


@dataclass(frozen=True)
class ActionSpace:
    common_dim: int
    interactive_dim: int

    @property
    def total(self) -> int:
        return self.common_dim + self.interactive_dim


def action_space_for(config: MapConfig, stats: UnitStats) -> ActionSpace:
    return ActionSpace(COMMON_ACTION_DIM, config.interactive_dim(stats))


def padded_dim_for(config: MapConfig) -> int:
    return COMMON_ACTION_DIM + max(config.interactive_dim(u.stats) for u in config.ally_units)


@dataclass
class UnitState:
    stats: UnitStats
    position: np.ndarray
    health: float
    weapon_cooldown: float
    side: str

    @property
    def alive(self) -> bool:
        return self.health > 0

    @property
    def health_fraction(self) -> float:
        return self.health / self.stats.max_health

    def copy(self) -> "UnitState":
        return UnitState(self.stats, self.position.copy(), self.health, self.weapon_cooldown, self.side)


@dataclass
class EnvState:
    units: List[UnitState]
    n_allies: int
    step: int = 0
    terminated: bool = False
    won: bool = False

    @property
    def allies(self) -> List[UnitState]:
        return self.units[:self.n_allies]

    @property
    def enemies(self) -> List[UnitState]:
        return self.units[self.n_allies:]

    def copy(self) -> "EnvState":
        return EnvState([u.copy() for u in self.units], self.n_allies, self.step, self.terminated, self.won)


@dataclass
class StepResult:
    state: EnvState
    reward: float
    terminated: bool
    observations: np.ndarray
    state_vector: np.ndarray
    info: Dict[str, Any] = field(default_factory=dict)


@dataclass
class _Intent:
    """What one unit does this step, resolved against the start-of-step state"""
    move: Optional[np.ndarray] = None
    damage_target: Optional[int] = None
    heal_target: Optional[int] = None
    amount: float = 0.0


class CombatEnv:
    """Allies are learning agents; enemies follow an attack-nearest script.

    Units are indexed allies first, then enemies. Action IDs: 0 null (dead only),
    1 stop, 2-5 move up/down/left/right, 6+j interact with target j (enemy j for
    attackers, ally j for supporters).
    """

    def __init__(self, config: MapConfig):
        self.config = config
        self.unit_types = config.unit_type_names
        self.n_allies = config.n_allies
        self.n_enemies = config.n_enemies
        self.n_actions = padded_dim_for(config)
        self.action_spaces = [action_space_for(config, u.stats) for u in config.ally_units]
        self.reward_scale = (
            sum(u.stats.max_health for u in config.enemy_units)
            + Config.KILL_REWARD * self.n_enemies
            + Config.WIN_REWARD
        )
        self.state: Optional[EnvState] = None
        self._rng = np.random.default_rng()

    # ---- dimensions ------------------------------------------------------

    @property
    def obs_dim(self) -> int:
        feat = 5 + len(self.unit_types)
        return 4 + (self.n_allies - 1) * feat + self.n_enemies * feat + 1 + len(self.unit_types)

    @property
    def state_dim(self) -> int:
        t = len(self.unit_types)
        return self.n_allies * (4 + t) + self.n_enemies * (3 + t)

    def _type_one_hot(self, stats: UnitStats) -> np.ndarray:
        out = np.zeros(len(self.unit_types))
        out[self.unit_types.index(stats.name)] = 1.0
        return out

    # ---- episode control -------------------------------------------------

    def reset(self, seed: Optional[int] = None) -> Tuple[EnvState, np.ndarray, np.ndarray]:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        size = self.config.map_size
        jitter = self.config.spawn_jitter
        units = []
        for side, spawns in ((ALLY, self.config.ally_units), (ENEMY, self.config.enemy_units)):
            for spawn in spawns:
                position = np.array(spawn.position, dtype=np.float64)
                if jitter > 0:
                    position = position + self._rng.uniform(-jitter, jitter, size=2)
                units.append(UnitState(
                    stats=spawn.stats,
                    position=np.clip(position, 0.0, size),
                    health=float(spawn.stats.max_health),
                    weapon_cooldown=0.0,
                    side=side,
                ))
        self.state = EnvState(units=units, n_allies=self.n_allies)
        return self.state, self.get_observations(), self.build_state()

    def _require_state(self) -> EnvState:
        if self.state is None:
            raise ConfigError("Environment used before reset()")
        return self.state

    # ---- masks -----------------------------------------------------------

    def _targets(self, state: EnvState, index: int) -> List[UnitState]:
        return state.enemies if state.units[index].stats.is_attacker else state.allies

    def _target_available(self, state: EnvState, index: int, target_index: int) -> bool:
        unit = state.units[index]
        targets = self._targets(state, index)
        target = targets[target_index]
        if not target.alive or target is unit:
            return False
        reach = self.config.sight_range if self.config.attack_move else unit.stats.shot_range
        return _distance(unit, target) <= reach

    def available_actions(self, state: Optional[EnvState] = None) -> np.ndarray:
        """Binary matrix [n_allies, padded action dim]"""
        state = state or self._require_state()
        masks = np.zeros((self.n_allies, self.n_actions), dtype=np.int64)
        for i, unit in enumerate(state.allies):
            if not unit.alive:
                masks[i, NULL_ACTION] = 1
                continue
            masks[i, STOP_ACTION:COMMON_ACTION_DIM] = 1
            for j in range(self.action_spaces[i].interactive_dim):
                if self._target_available(state, i, j):
                    masks[i, COMMON_ACTION_DIM + j] = 1
        return masks

    # ---- observations ----------------------------------------------------

    def _relative_feature(self, viewer: UnitState, other: UnitState) -> np.ndarray:
        t = len(self.unit_types)
        feature = np.zeros(5 + t)
        if not other.alive:
            return feature
        distance = _distance(viewer, other)
        sight = self.config.sight_range
        if distance > sight:
            return feature
        delta = other.position - viewer.position
        feature[0] = 1.0
        feature[1] = other.health_fraction
        feature[2:2 + t] = self._type_one_hot(other.stats)
        feature[2 + t] = distance / sight
        feature[3 + t:5 + t] = delta / sight
        return feature

    def build_observation(self, agent_index: int, state: Optional[EnvState] = None) -> np.ndarray:
        state = state or self._require_state()
        unit = state.units[agent_index]
        if not unit.alive:
            return np.zeros(self.obs_dim)
        size = self.config.map_size
        moving = np.array([
            float(unit.position[1] < size), float(unit.position[1] > 0.0),
            float(unit.position[0] > 0.0), float(unit.position[0] < size),
        ])
        parts = [moving]
        parts += [self._relative_feature(unit, ally) for j, ally in enumerate(state.allies) if j != agent_index]
        parts += [self._relative_feature(unit, enemy) for enemy in state.enemies]
        parts.append(np.concatenate([[unit.health_fraction], self._type_one_hot(unit.stats)]))
        return np.concatenate(parts)

    def get_observations(self) -> np.ndarray:
        state = self._require_state()
        return np.stack([self.build_observation(i, state) for i in range(self.n_allies)])

    def build_state(self, state: Optional[EnvState] = None) -> np.ndarray:
        state = state or self._require_state()
        size = self.config.map_size
        t = len(self.unit_types)
        blocks = []
        for unit in state.allies:
            block = np.zeros(4 + t)
            if unit.alive:
                block[0] = unit.health_fraction
                block[1] = min(1.0, unit.weapon_cooldown / Config.WEAPON_COOLDOWN)
                block[2:2 + t] = self._type_one_hot(unit.stats)
                block[2 + t:] = unit.position / size
            blocks.append(block)
        for unit in state.enemies:
            block = np.zeros(3 + t)
            if unit.alive:
                block[0] = unit.health_fraction
                block[1:1 + t] = self._type_one_hot(unit.stats)
                block[1 + t:] = unit.position / size
            blocks.append(block)
        return np.concatenate(blocks)

    # ---- dynamics ----------------------------------------------------------

    def _step_length(self, unit: UnitState) -> float:
        return self.config.move_amount * unit.stats.speed * self.config.step_duration

    def _approach(self, unit: UnitState, target: UnitState) -> np.ndarray:
        delta = target.position - unit.position
        distance = float(np.linalg.norm(delta))
        travel = min(self._step_length(unit), max(0.0, distance - unit.stats.shot_range))
        if distance == 0.0 or travel == 0.0:
            return np.zeros(2)
        return delta / distance * travel

    def _interact(self, index: int, target_global: int) -> _Intent:
        state = self._require_state()
        unit = state.units[index]
        target = state.units[target_global]
        if _distance(unit, target) > unit.stats.shot_range:
            return _Intent(move=self._approach(unit, target))
        if unit.stats.is_attacker:
            if unit.weapon_cooldown > 0:
                return _Intent()
            return _Intent(damage_target=target_global, amount=unit.stats.dps * self.config.step_duration)
        return _Intent(heal_target=target_global, amount=unit.stats.dps * self.config.step_duration)

    def _ally_intent(self, index: int, action: int) -> _Intent:
        if action in _DIRECTIONS:
            unit = self._require_state().units[index]
            return _Intent(move=_DIRECTIONS[action] * self._step_length(unit))
        if action < COMMON_ACTION_DIM:
            return _Intent()
        target = action - COMMON_ACTION_DIM
        offset = self.n_allies if self.state.units[index].stats.is_attacker else 0
        return self._interact(index, offset + target)

    def scripted_intent(self, index: int) -> _Intent:
        """Attack (or heal) the nearest valid target, approaching when out of range"""
        state = self._require_state()
        unit = state.units[index]
        if unit.stats.is_attacker:
            candidates = [(k, u) for k, u in enumerate(state.units[:self.n_allies]) if u.alive]
        else:
            candidates = [
                (self.n_allies + k, u) for k, u in enumerate(state.enemies)
                if u.alive and u is not unit and u.health < u.stats.max_health
            ]
        if not candidates:
            return _Intent()
        distances = [_distance(unit, u) for _, u in candidates]
        nearest = candidates[int(np.argmin(distances))][0]
        return self._interact(index, nearest)

    def step(self, joint_action: Sequence[int]) -> StepResult:
        state = self._require_state()
        if state.terminated:
            raise ContractViolation("step() called on a terminated episode; call reset()")
        actions = [int(a) for a in joint_action]
        if len(actions) != self.n_allies:
            raise ContractViolation(f"Expected {self.n_allies} actions, got {len(actions)}")
        masks = self.available_actions()
        for i, action in enumerate(actions):
            if not 0 <= action < self.n_actions or not masks[i, action]:
                raise ContractViolation(f"Agent {i} chose unavailable action {action}")

        for unit in state.units:
            if unit.alive:
                unit.weapon_cooldown = max(0.0, unit.weapon_cooldown - self.config.step_duration)

        intents: Dict[int, _Intent] = {}
        for i, action in enumerate(actions):
            if state.units[i].alive:
                intents[i] = self._ally_intent(i, action)
        for k in range(self.n_allies, len(state.units)):
            if state.units[k].alive:
                intents[k] = self.scripted_intent(k)

        damage = np.zeros(len(state.units))
        healing = np.zeros(len(state.units))
        for index, intent in intents.items():
            unit = state.units[index]
            if intent.damage_target is not None:
                damage[intent.damage_target] += intent.amount
                unit.weapon_cooldown = Config.WEAPON_COOLDOWN
            elif intent.heal_target is not None:
                healing[intent.heal_target] += intent.amount
        size = self.config.map_size
        for index, intent in intents.items():
            if intent.move is not None:
                unit = state.units[index]
                unit.position = np.clip(unit.position + intent.move, 0.0, size)

        enemy_health_lost = 0.0
        kills = 0
        for index, unit in enumerate(state.units):
            if not unit.alive:
                continue
            before = unit.health
            unit.health = max(0.0, unit.health - damage[index])
            if unit.health <= 0.0:
                unit.health = 0.0
                unit.weapon_cooldown = 0.0
                if unit.side == ENEMY:
                    kills += 1
            elif healing[index] > 0:
                unit.health = min(unit.stats.max_health, unit.health + healing[index])
            if unit.side == ENEMY:
                enemy_health_lost += before - unit.health

        state.step += 1
        won = all(not u.alive for u in state.enemies)
        lost = all(not u.alive for u in state.allies)
        timeout = state.step >= self.config.max_episode_steps
        state.won = won
        state.terminated = won or lost or timeout

        raw_reward = enemy_health_lost + Config.KILL_REWARD * kills + (Config.WIN_REWARD if won else 0.0)
        reward = raw_reward / self.reward_scale if self.config.normalize_reward else raw_reward
        info = {
            "won": won,
            "raw_reward": raw_reward,
            "kills": kills,
            "truncated": timeout and not (won or lost),
        }
        return StepResult(state, reward, state.terminated, self.get_observations(), self.build_state(), info)


def _distance(a: UnitState, b: UnitState) -> float:
    return float(np.linalg.norm(a.position - b.position))
