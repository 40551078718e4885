"""Scenario descriptions: unit registry, MapConfig schema, built-in maps and map files"""
import json
import math
import re
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import Config
from exceptions import ConfigError
from logger import get_logger

logger = get_logger()


class UnitKind(str, Enum):
    ATTACKER = "attacker"      # interacts with enemies
    SUPPORTER = "supporter"    # interacts with allies


class UnitStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    max_health: float = Field(gt=0)
    shot_range: float = Field(gt=0)
    dps: float = Field(gt=0)
    speed: float = Field(gt=0)
    unit_kind: UnitKind
    flying: bool = False

    @property
    def is_attacker(self) -> bool:
        return self.unit_kind is UnitKind.ATTACKER

    def with_overrides(self, overrides: Dict[str, float]) -> "UnitStats":
        unknown = set(overrides) - {"max_health", "shot_range", "dps", "speed"}
        if unknown:
            raise ConfigError(f"Unknown unit stat overrides for {self.name}: {sorted(unknown)}")
        try:
            return UnitStats(**{**self.model_dump(), **overrides})
        except ValidationError as e:
            raise ConfigError(f"Invalid overrides for {self.name}: {e}")


UNIT_REGISTRY: Dict[str, UnitStats] = {
    "marine": UnitStats(name="marine", max_health=45, shot_range=5, dps=6.97, speed=2.25,
                        unit_kind=UnitKind.ATTACKER),
    "marauder": UnitStats(name="marauder", max_health=125, shot_range=6, dps=6.67, speed=2.25,
                          unit_kind=UnitKind.ATTACKER),
    "medivac": UnitStats(name="medivac", max_health=150, shot_range=4, dps=9.0, speed=2.75,
                         unit_kind=UnitKind.SUPPORTER, flying=True),
}


class UnitSpawn(BaseModel):
    model_config = ConfigDict(frozen=True)

    stats: UnitStats
    position: Tuple[float, float]


class MapConfig(BaseModel):
    """Declarative scenario: both rosters with spawn positions plus episode/geometry settings"""

    name: str
    ally_units: List[UnitSpawn]
    enemy_units: List[UnitSpawn]
    max_episode_steps: int = Field(default=Config.MAX_EPISODE_STEPS, ge=1)
    sight_range: float = Field(default=Config.SIGHT_RANGE, gt=0)
    step_duration: float = Field(default=Config.STEP_DURATION, gt=0)
    move_amount: float = Field(default=Config.MOVE_AMOUNT, gt=0)
    map_size: float = Field(default=Config.MAP_SIZE, gt=0)
    spawn_jitter: float = Field(default=0.0, ge=0)
    attack_move: bool = False
    normalize_reward: bool = True

    @model_validator(mode="after")
    def _both_sides_can_win(self) -> "MapConfig":
        for side, units in (("ally", self.ally_units), ("enemy", self.enemy_units)):
            if not any(u.stats.is_attacker for u in units):
                raise ValueError(f"{side} side of map '{self.name}' has no attacking unit")
        return self

    @property
    def n_allies(self) -> int:
        return len(self.ally_units)

    @property
    def n_enemies(self) -> int:
        return len(self.enemy_units)

    @property
    def unit_type_names(self) -> List[str]:
        """Distinct unit kinds on the map, registry order first"""
        present = {u.stats.name for u in self.ally_units + self.enemy_units}
        ordered = [name for name in UNIT_REGISTRY if name in present]
        return ordered + sorted(present - set(ordered))

    @property
    def n_unit_types(self) -> int:
        return len(self.unit_type_names)

    def interactive_dim(self, stats: UnitStats) -> int:
        return self.n_enemies if stats.is_attacker else self.n_allies

    def count(self, side: str, kind: UnitKind) -> int:
        units = self.ally_units if side == "ally" else self.enemy_units
        return sum(1 for u in units if u.stats.unit_kind is kind)

    def with_episode_limit(self, max_episode_steps: Optional[int]) -> "MapConfig":
        if max_episode_steps is None or max_episode_steps == self.max_episode_steps:
            return self
        return self.model_copy(update={"max_episode_steps": max_episode_steps})


# ---- layout ------------------------------------------------------------------

def cluster_positions(count: int, front_x: float, direction: float, center_y: float) -> List[Tuple[float, float]]:
    """Column grid one unit apart; first column on the front line, later columns behind it"""
    cols = max(1, math.ceil(math.sqrt(count)))
    rows = math.ceil(count / cols)
    positions = []
    for i in range(count):
        col, row = divmod(i, rows)
        positions.append((front_x + direction * col, center_y + row - (rows - 1) / 2.0))
    return positions


def build_map(name: str,
              allies: List[Tuple[str, int, Dict[str, float]]],
              enemies: List[Tuple[str, int, Dict[str, float]]],
              cluster_spacing: float = Config.CLUSTER_SPACING,
              **settings) -> MapConfig:
    """Expand (kind, count, overrides) rosters into a MapConfig with clustered spawns"""
    map_size = settings.get("map_size", Config.MAP_SIZE)
    center = map_size / 2.0

    def roster(entries, front_x, direction) -> List[UnitSpawn]:
        stats = []
        for kind, count, overrides in entries:
            if kind not in UNIT_REGISTRY:
                raise ConfigError(f"Unknown unit kind '{kind}' in map '{name}'")
            if count < 1:
                raise ConfigError(f"Unit count for '{kind}' in map '{name}' must be positive")
            base = UNIT_REGISTRY[kind].with_overrides(overrides) if overrides else UNIT_REGISTRY[kind]
            stats.extend([base] * count)
        positions = cluster_positions(len(stats), front_x, direction, center)
        return [UnitSpawn(stats=s, position=p) for s, p in zip(stats, positions)]

    try:
        return MapConfig(
            name=name,
            ally_units=roster(allies, center - cluster_spacing / 2.0, -1.0),
            enemy_units=roster(enemies, center + cluster_spacing / 2.0, 1.0),
            **settings,
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid map '{name}': {e}")


# ---- built-in maps -------------------------------------------------------------

_HETERO = re.compile(r"^(\d+)m(\d+)m_(\d+)m$")
_HOMO = re.compile(r"^(\d+)m_(\d+)m$")
_SYMMETRIC = re.compile(r"^(\d+)m$")

# Asymmetric heterogeneous maps: marines + medivacs against marines, plus the mixed MMM2 battle
HETEROGENEOUS_MAPS = ["6m2m_15m", "6m2m_16m", "6m2m_17m", "7m2m_15m", "8m3m_19m", "8m3m_21m",
                      "8m4m_23m", "12m4m_30m", "15m2m_28m", "16m2m_28m", "16m2m_30m", "17m2m_30m", "MMM2"]
HOMOGENEOUS_MAPS = ["11m_15m", "12m_15m", "13m_15m", "15m_20m", "16m_20m", "17m_20m",
                    "24m_30m", "25m_30m", "26m_30m"]

# Weakened enemies so learning is feasible within a few hundred thousand steps
DESK_ENEMY = {"max_health": 30.0, "dps": 2.5}
DESK_JITTER = 0.5


def _parse_generic(name: str) -> Optional[MapConfig]:
    match = _HETERO.match(name)
    if match:
        marines, medivacs, enemies = map(int, match.groups())
        return build_map(name, [("marine", marines, {}), ("medivac", medivacs, {})],
                         [("marine", enemies, {})])
    match = _HOMO.match(name)
    if match:
        allies, enemies = map(int, match.groups())
        return build_map(name, [("marine", allies, {})], [("marine", enemies, {})])
    match = _SYMMETRIC.match(name)
    if match:
        n = int(match.group(1))
        return build_map(name, [("marine", n, {})], [("marine", n, {})])
    return None


def _desk_maps() -> Dict[str, Callable[[], MapConfig]]:
    return {
        "3m": lambda: build_map("3m", [("marine", 3, {})], [("marine", 3, {})], max_episode_steps=60, spawn_jitter=DESK_JITTER),
        "3m1m_5m": lambda: build_map(
            "3m1m_5m", [("marine", 3, {}), ("medivac", 1, {})], [("marine", 5, DESK_ENEMY)],
            max_episode_steps=60, spawn_jitter=DESK_JITTER),
        "2m1m_3m": lambda: build_map(
            "2m1m_3m", [("marine", 2, {}), ("medivac", 1, {})], [("marine", 3, DESK_ENEMY)],
            max_episode_steps=50, spawn_jitter=DESK_JITTER),
        "mmm2_desk": lambda: build_map(
            "mmm2_desk", [("marine", 2, {}), ("marauder", 1, {}), ("medivac", 1, {})],
            [("marine", 5, {})], max_episode_steps=120, spawn_jitter=DESK_JITTER),
    }


DESK_MAPS = _desk_maps()

# Full-strength mixed rosters that the XmYm_Zm naming cannot express
NAMED_MAPS: Dict[str, Callable[[], MapConfig]] = {
    "MMM2": lambda: build_map(
        "MMM2", [("marine", 7, {}), ("marauder", 2, {}), ("medivac", 1, {})],
        [("marine", 8, {}), ("marauder", 3, {}), ("medivac", 1, {})], max_episode_steps=180),
}


def builtin_map_names() -> List[str]:
    return HETEROGENEOUS_MAPS + HOMOGENEOUS_MAPS + list(DESK_MAPS)


# ---- map files -------------------------------------------------------------------

class RosterEntry(BaseModel):
    kind: str
    count: int = Field(ge=1)
    overrides: Dict[str, float] = Field(default_factory=dict)


class MapFile(BaseModel):
    """On-disk JSON schema for a scenario"""

    name: str
    allies: List[RosterEntry]
    enemies: List[RosterEntry]
    max_episode_steps: int = Config.MAX_EPISODE_STEPS
    sight_range: float = Config.SIGHT_RANGE
    step_duration: float = Config.STEP_DURATION
    move_amount: float = Config.MOVE_AMOUNT
    map_size: float = Config.MAP_SIZE
    cluster_spacing: float = Config.CLUSTER_SPACING
    spawn_jitter: float = 0.0
    attack_move: bool = False
    normalize_reward: bool = True

    def to_map_config(self) -> MapConfig:
        settings = self.model_dump(exclude={"name", "allies", "enemies", "cluster_spacing"})
        return build_map(
            self.name,
            [(e.kind, e.count, e.overrides) for e in self.allies],
            [(e.kind, e.count, e.overrides) for e in self.enemies],
            cluster_spacing=self.cluster_spacing,
            **settings,
        )


def load_map_file(path: Path) -> MapConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Map file not found: {path}")
    try:
        with open(path, "r") as f:
            document = json.load(f)
        config = MapFile(**document).to_map_config()
    except json.JSONDecodeError as e:
        raise ConfigError(f"Map file {path} is not valid JSON: {e}")
    except (ValidationError, TypeError) as e:
        raise ConfigError(f"Map file {path} does not match the map schema: {e}")
    logger.debug(f"Loaded map file {path}: {config.n_allies} allies vs {config.n_enemies} enemies")
    return config


def load_map(name_or_path: Union[str, Path]) -> MapConfig:
    """Resolve a built-in name, a generic XmYm_Zm / Xm_Ym name, or a JSON map file"""
    text = str(name_or_path)
    if text in DESK_MAPS:
        return DESK_MAPS[text]()
    if text in NAMED_MAPS:
        return NAMED_MAPS[text]()
    generic = _parse_generic(text)
    if generic is not None:
        return generic
    bundled = Config.MAPS_DIR / f"{text}.json"
    if bundled.exists():
        return load_map_file(bundled)
    if text.endswith(".json") or Path(text).suffix or "/" in text:
        return load_map_file(Path(text))
    raise ConfigError(f"Unknown map '{text}' (not built in and no file at {Path(text)})")
