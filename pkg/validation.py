"""Invariant and oracle checks behind the ``validate`` command"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from autodiff import gradient_check, no_grad, parameter
from combat_env import CombatEnv
from config import Config, TrainConfig
from exceptions import ValidationError
from grouping import GroupAssignment, exhaustive_joint_argmax, greedy_joint_action
from layers import GaussianDistribution, GRUCell, gaussian_kl, gaussian_sample, linear_forward
from learner import AgentController, Learner, group_td_loss
from logger import get_logger
from maps import DESK_MAPS, builtin_map_names, load_map
from networks import MixingNetwork, mixing_forward
from replay_buffer import EpisodeBatch
from trainer import collect_episode

logger = get_logger()

GRADIENT_TOLERANCE = 1e-4
KL_TOLERANCE = 0.02
KL_ABS_TOLERANCE = 5e-3
CONSERVATION_TOLERANCE = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    tolerance: str
    detail: str = ""


def _record(name: str, passed: bool, tolerance: str, detail: str) -> CheckResult:
    logger.log_check(name, passed, detail)
    return CheckResult(name, bool(passed), tolerance, detail)


# ---- gradient checks -----------------------------------------------------------

def _worst_gradient_error(build: Callable[[np.random.Generator], tuple], instances: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        fn, inputs = build(rng)
        worst = max(worst, gradient_check(fn, inputs))
    return worst


def _linear_case(rng):
    x, w, b = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(4, 2))), parameter(rng.normal(size=2))
    weights = rng.normal(size=(3, 2))
    return (lambda: (linear_forward(x, w, b) * weights).sum()), [x, w, b]


def _gru_case(rng):
    cell = GRUCell(3, 4, rng)
    x, h = parameter(rng.normal(size=(2, 3))), parameter(rng.normal(size=(2, 4)) * 0.5)
    weights = rng.normal(size=(2, 4))
    return (lambda: (cell(x, h) * weights).sum()), [x, h] + cell.parameters()


def _sample_case(rng):
    mean, log_std = parameter(rng.normal(size=(2, 3))), parameter(rng.uniform(-1, 1, size=(2, 3)))
    noise = rng.normal(size=(2, 3))
    weights = rng.normal(size=(2, 3))
    return (lambda: (gaussian_sample(GaussianDistribution(mean, log_std), noise) * weights).sum()), [mean, log_std]


def _kl_case(rng):
    tensors = [parameter(rng.normal(size=(3, 2)) * s) for s in (1.0, 0.5, 1.0, 0.5)]
    p_mean, p_log_std, q_mean, q_log_std = tensors
    return (lambda: gaussian_kl(GaussianDistribution(p_mean, p_log_std),
                                GaussianDistribution(q_mean, q_log_std))), tensors


def _mixing_case(rng):
    mixer = MixingNetwork(3, 4, rng, embed_dim=4, hypernet_embed_dim=5)
    q, state = parameter(rng.normal(size=(2, 3))), parameter(rng.normal(size=(2, 4)))
    weights = rng.normal(size=2)
    return (lambda: (mixing_forward(mixer, q, state) * weights).sum()), [q, state] + mixer.parameters()


GRADIENT_CASES = {
    "linear": _linear_case,
    "gru_cell": _gru_case,
    "gaussian_sample": _sample_case,
    "gaussian_kl": _kl_case,
    "mixing": _mixing_case,
}


def check_gradients(instances: int = 20, seed: int = 0) -> List[CheckResult]:
    results = []
    for offset, (name, build) in enumerate(GRADIENT_CASES.items()):
        worst = _worst_gradient_error(build, instances, seed + offset)
        results.append(_record(f"gradient/{name}", worst < GRADIENT_TOLERANCE,
                               f"rel err < {GRADIENT_TOLERANCE:g}",
                               f"worst {worst:.2e} over {instances} instances"))
    return results


# ---- mixing monotonicity --------------------------------------------------------------

def check_monotonicity(draws: int = 100, delta: float = 0.1, seed: int = 0,
                       map_names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Every preset map unless map_names narrows the set"""
    results = []
    rng = np.random.default_rng(seed)
    for name in map_names or builtin_map_names():
        env = CombatEnv(load_map(name))
        mixer = MixingNetwork(env.n_allies, env.state_dim, rng)
        violations = 0
        with no_grad():
            for _ in range(draws):
                state = rng.uniform(0, 1, size=(1, env.state_dim))
                q = rng.normal(size=(1, env.n_allies))
                base = mixing_forward(mixer, q, state).item()
                for i in range(env.n_allies):
                    bumped = q.copy()
                    bumped[0, i] += delta
                    if mixing_forward(mixer, bumped, state).item() < base:
                        violations += 1
        results.append(_record(f"monotonicity/{name}", violations == 0, "exact",
                               f"{violations} decreases over {draws} draws"))
    return results


# ---- grouped greedy consistency ------------------------------------------------------------

def check_grouped_argmax(instances: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    assignment = GroupAssignment(groups=[[0, 1], [2, 3]], interactive_dims=[0, 0],
                                 ideal_objects=["enemy", "ally"], unit_names=[["a"], ["b"]])
    agreements = 0
    for _ in range(instances):
        n_actions = [int(rng.integers(2, 6)) for _ in range(4)]
        q_values = [rng.normal(size=n) for n in n_actions]
        masks = []
        for n in n_actions:
            mask = rng.integers(0, 2, size=n)
            mask[rng.integers(n)] = 1
            masks.append(mask)
        state = rng.normal(size=(1, 3))
        mixers = [MixingNetwork(2, 3, rng, embed_dim=4, hypernet_embed_dim=4) for _ in range(2)]

        def value_fn(mixer):
            return lambda chosen: mixing_forward(mixer, chosen.reshape(1, -1), state).item()

        with no_grad():
            fns = [value_fn(m) for m in mixers]
            greedy = greedy_joint_action(q_values, masks)
            best = exhaustive_joint_argmax(q_values, masks, assignment, fns)
            value = lambda joint: sum(fns[g](np.array([q_values[i][joint[i]] for i in members]))
                                      for g, members in enumerate(assignment.groups))
            if greedy == best or abs(value(greedy) - value(best)) <= 1e-12:
                agreements += 1
    return _record("gigm/brute_force", agreements == instances, "exact",
                   f"{agreements}/{instances} instances agree")


# ---- KL oracle --------------------------------------------------------------------------

def check_kl_monte_carlo(pairs: int = 50, samples: int = 100_000, latent_dim: int = 4,
                         mean_range: float = 1.5, log_std_range: float = 0.3, seed: int = 0) -> CheckResult:
    """Closed-form KL against a sampled estimate; tolerance is relative plus a small absolute floor"""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        p_mean, q_mean = rng.uniform(-mean_range, mean_range, size=(2, latent_dim))
        p_log_std, q_log_std = rng.uniform(-log_std_range, log_std_range, size=(2, latent_dim))
        closed = gaussian_kl(GaussianDistribution(p_mean[None], p_log_std[None]),
                             GaussianDistribution(q_mean[None], q_log_std[None])).item()
        x = p_mean + np.exp(p_log_std) * rng.standard_normal((samples, latent_dim))
        log_p = -p_log_std - 0.5 * ((x - p_mean) / np.exp(p_log_std)) ** 2
        log_q = -q_log_std - 0.5 * ((x - q_mean) / np.exp(q_log_std)) ** 2
        estimate = float(np.mean(np.sum(log_p - log_q, axis=1)))
        allowed = KL_TOLERANCE * closed + KL_ABS_TOLERANCE
        worst = max(worst, abs(estimate - closed) / allowed)
    return _record("kl/monte_carlo", worst <= 1.0, f"err <= {KL_TOLERANCE:.0%} rel + {KL_ABS_TOLERANCE:g}",
                   f"worst {worst:.2f} of allowed over {pairs} pairs, {samples} samples")


# ---- environment conservation -----------------------------------------------------------

def check_env_conservation(episodes: int = 1000, seed: int = 0,
                           map_names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Damage, kill and win rewards add up to the enemy health actually removed, on every preset map"""
    results = []
    rng = np.random.default_rng(seed)
    for name in map_names or builtin_map_names():
        env = CombatEnv(load_map(name))
        violations = []
        wins = 0
        for episode in range(episodes):
            state, _, _ = env.reset(seed + episode)
            initial = sum(u.health for u in state.enemies)
            dead = set()
            raw = 0.0
            while not state.terminated:
                masks = env.available_actions()
                for i in dead:
                    if masks[i].sum() != 1 or masks[i, 0] != 1:
                        violations.append(f"ep{episode}: dead agent {i} mask")
                actions = [int(rng.choice(np.flatnonzero(m))) for m in masks]
                result = env.step(actions)
                raw += result.info["raw_reward"]
                for u in state.units:
                    if not 0.0 <= u.health <= u.stats.max_health:
                        violations.append(f"ep{episode}: health out of bounds")
                dead = {i for i, u in enumerate(state.allies) if not u.alive}
            remaining = sum(u.health for u in state.enemies)
            kills = sum(1 for u in state.enemies if not u.alive)
            expected = (initial - remaining) + Config.KILL_REWARD * kills + (Config.WIN_REWARD if state.won else 0.0)
            if abs(raw - expected) > CONSERVATION_TOLERANCE * max(1.0, expected):
                violations.append(f"ep{episode}: reward {raw} != {expected}")
            wins += int(state.won)
        results.append(_record(f"env/conservation/{name}", not violations, f"abs err <= {CONSERVATION_TOLERANCE:g}",
                               f"{episodes} episodes, {wins} wins" + (f"; {violations[0]}" if violations else "")))
    return results


# ---- group parameter isolation ----------------------------------------------------------

def check_parameter_isolation(map_name: str = "mmm2_desk", seed: int = 0) -> CheckResult:
    """With the MI term off, a group's TD loss leaves every other group's gradients at zero"""
    map_config = load_map(map_name)
    config = TrainConfig(algo="ghq-nomi", lambda_mi=0.0, hidden_dim=8, latent_dim=4,
                         mixing_embed_dim=4, hypernet_embed_dim=8)
    rng = np.random.default_rng(seed)
    learner = Learner(map_config, config, rng, noise_rng=np.random.default_rng(seed + 1))
    env, controller = CombatEnv(map_config), AgentController(learner)
    episodes = [collect_episode(env, controller, config, 0, seed + k, rng)[0] for k in range(2)]
    batch = EpisodeBatch.from_episodes(episodes)
    if len(learner.groups) < 2:
        return _record("isolation/td_per_group", False, "exact zero",
                       f"map '{map_name}' forms a single group")
    leaks = 0
    for g, group in enumerate(learner.groups):
        learner.optimizer.zero_grad()
        group_td_loss(batch, group, learner.targets[g], config.gamma, learner.mixing, learner.noise_rng).backward()
        for other in range(len(learner.groups)):
            if other != g:
                leaks += sum(int(p.grad is not None and np.any(p.grad != 0)) for p in learner.group_parameters(other))
    return _record("isolation/td_per_group", leaks == 0, "exact zero", f"{leaks} leaking tensors")


def run_validation(quick: bool = False) -> List[CheckResult]:
    """Every oracle check; ``quick`` shrinks instance counts and keeps to the desk maps"""
    scale = 0.25 if quick else 1.0
    map_names = list(DESK_MAPS) if quick else builtin_map_names()
    results: List[CheckResult] = []
    results += check_gradients(instances=max(2, int(20 * scale)))
    results += check_monotonicity(draws=max(10, int(100 * scale)), map_names=map_names)
    results.append(check_grouped_argmax(instances=max(20, int(200 * scale))))
    results.append(check_kl_monte_carlo(pairs=max(5, int(50 * scale))))
    results += check_env_conservation(episodes=12 if quick else 1000, map_names=map_names)
    results.append(check_parameter_isolation())
    return results


def ensure_passed(results: List[CheckResult]):
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ValidationError(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
