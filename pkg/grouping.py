"""Ideal-object grouping, joint-trajectory checks and action padding"""
import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from combat_env import COMMON_ACTION_DIM, padded_dim_for
from exceptions import ContractViolation
from maps import MapConfig

ENEMY_OBJECT = "enemy"
ALLY_OBJECT = "ally"


@dataclass
class GroupAssignment:
    """Partition of the allied agents; members of a group share ideal object and interactive dim"""
    groups: List[List[int]]
    interactive_dims: List[int]
    ideal_objects: List[str]
    unit_names: List[List[str]]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def action_dim(self, group: int) -> int:
        return COMMON_ACTION_DIM + self.interactive_dims[group]

    def group_of(self, agent: int) -> int:
        for g, members in enumerate(self.groups):
            if agent in members:
                return g
        raise KeyError(agent)

    def label(self, group: int) -> str:
        return f"{'+'.join(self.unit_names[group])}->{self.ideal_objects[group]}[{self.interactive_dims[group]}]"

    def to_dict(self) -> Dict:
        return {
            "groups": self.groups,
            "interactive_dims": self.interactive_dims,
            "ideal_objects": self.ideal_objects,
            "unit_names": self.unit_names,
        }


def group_by_ideal_object(config: MapConfig, split_by_kind: bool = False) -> GroupAssignment:
    """One group per (ideal object, interactive dim), in order of first appearance.

    ``split_by_kind`` additionally separates unit kinds that share an ideal object.
    """
    keys: Dict[Tuple, int] = {}
    groups: List[List[int]] = []
    dims: List[int] = []
    objects: List[str] = []
    names: List[List[str]] = []
    for agent, spawn in enumerate(config.ally_units):
        ideal_object = ENEMY_OBJECT if spawn.stats.is_attacker else ALLY_OBJECT
        dim = config.interactive_dim(spawn.stats)
        key = (ideal_object, dim, spawn.stats.name) if split_by_kind else (ideal_object, dim)
        if key not in keys:
            keys[key] = len(groups)
            groups.append([])
            dims.append(dim)
            objects.append(ideal_object)
            names.append([])
        g = keys[key]
        groups[g].append(agent)
        if spawn.stats.name not in names[g]:
            names[g].append(spawn.stats.name)
    return GroupAssignment(groups, dims, objects, names)


def single_group(config: MapConfig) -> GroupAssignment:
    """All agents in one group with the padded action dim (shared-parameter baselines)"""
    kinds = []
    for spawn in config.ally_units:
        if spawn.stats.name not in kinds:
            kinds.append(spawn.stats.name)
    return GroupAssignment(
        groups=[list(range(config.n_allies))],
        interactive_dims=[padded_dim_for(config) - COMMON_ACTION_DIM],
        ideal_objects=["mixed"],
        unit_names=[kinds],
    )


def validate_jtc(assignment: GroupAssignment, n_agents: int) -> bool:
    """True iff the groups are pairwise disjoint and together cover every agent exactly"""
    seen = set()
    for members in assignment.groups:
        for agent in members:
            if agent in seen or not 0 <= agent < n_agents:
                return False
            seen.add(agent)
    return seen == set(range(n_agents))


def padded_action_dim(config: MapConfig) -> int:
    return padded_dim_for(config)


def masked_argmax(q_values: np.ndarray, mask: np.ndarray) -> int:
    """Argmax over available actions; ties go to the lowest action ID"""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractViolation("No available action to choose from")
    masked = np.where(mask, q_values, -np.inf)
    return int(np.argmax(masked))


def exhaustive_joint_argmax(q_values: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                            assignment: GroupAssignment,
                            mixers: Sequence[Callable[[np.ndarray], float]]) -> Tuple[int, ...]:
    """Joint action maximizing the sum of group values, by enumerating every available joint action"""
    choices = [np.flatnonzero(np.asarray(m, dtype=bool)) for m in masks]
    if any(len(c) == 0 for c in choices):
        raise ContractViolation("An agent has no available action")
    best_value = -np.inf
    best: Tuple[int, ...] = ()
    for joint in itertools.product(*choices):
        value = 0.0
        for g, members in enumerate(assignment.groups):
            chosen = np.array([q_values[i][joint[i]] for i in members])
            value += mixers[g](chosen)
        if value > best_value:
            best_value = value
            best = tuple(int(a) for a in joint)
    return best


def greedy_joint_action(q_values: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> Tuple[int, ...]:
    return tuple(masked_argmax(q, m) for q, m in zip(q_values, masks))
