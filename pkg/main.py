import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pydantic
from pydantic import BaseModel, Field, field_validator
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from checkpoint_manager import CheckpointManager, load_checkpoint_file
from combat_env import CombatEnv
from config import AlgorithmVariant, Config, TrainConfig
from evaluation import (RandomPolicy, StopPolicy, accumulate_heatmaps, check_heatmap_structure,
                        compare_runs, compute_es, compute_pos, evaluate_policy, win_rate_curves)
from exceptions import ConfigError, GHQError, UsageError, ValidationError
from grouping import group_by_ideal_object, padded_action_dim, validate_jtc
from logger import get_logger, setup_logging
from maps import load_map
from trainer import run_training
from validation import ensure_passed, run_validation

console = Console()
logger = get_logger()

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2


class RunManifest(BaseModel):
    """Everything needed to reproduce a set of training runs"""
    map: str
    algo: AlgorithmVariant = AlgorithmVariant.GHQ
    seeds: List[int] = Field(default_factory=lambda: [0])
    out_dir: str = str(Config.OUTPUT_ROOT)
    overrides: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("overrides")
    @classmethod
    def _known_fields(cls, value: Dict[str, Any]) -> Dict[str, Any]:
        allowed = set(TrainConfig.model_fields) - {"algo"}
        unknown = sorted(set(value) - allowed)
        if unknown:
            raise ValueError(f"Unknown training overrides: {', '.join(unknown)}")
        return value

    @field_validator("seeds")
    @classmethod
    def _some_seeds(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("At least one seed is required")
        return value

    def train_config(self) -> TrainConfig:
        return TrainConfig(algo=self.algo, **self.overrides)

    def run_dir(self, seed: int) -> Path:
        map_name = Path(self.map).stem
        return Path(self.out_dir) / map_name / self.algo.value / f"seed_{seed}"


def _config_error(e: pydantic.ValidationError, source: str) -> ConfigError:
    first = e.errors()[0]
    where = ".".join(str(p) for p in first.get("loc", ()))
    return ConfigError(f"Invalid configuration in {source}: {where}: {first.get('msg')}")


def parse_seeds(seed: Optional[int], seeds: Optional[str]) -> Optional[List[int]]:
    if seeds:
        try:
            return [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds expects a comma-separated list of integers, got '{seeds}'")
    if seed is not None:
        return [seed]
    return None


def build_manifest(args: argparse.Namespace) -> RunManifest:
    """CLI flags over manifest file over built-in defaults"""
    data: Dict[str, Any] = {}
    if args.manifest:
        path = Path(args.manifest)
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Manifest not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Manifest {path} is not valid JSON: {e}")
    overrides = dict(data.get("overrides", {}))
    flag_overrides = {
        "total_steps": args.steps,
        "lambda_mi": args.lambda_mi,
        "lambda_td": args.lambda_td,
        "eval_interval": args.eval_interval,
    }
    overrides.update({k: v for k, v in flag_overrides.items() if v is not None})
    data["overrides"] = overrides
    for key, value in (("map", args.map), ("algo", args.algo), ("out_dir", args.out)):
        if value is not None:
            data[key] = value
    seeds = parse_seeds(args.seed, args.seeds)
    if seeds is not None:
        data["seeds"] = seeds
    if "map" not in data:
        raise ConfigError("No map given: pass --map or a manifest with a 'map' entry")
    try:
        manifest = RunManifest(**data)
        manifest.train_config()
    except pydantic.ValidationError as e:
        raise _config_error(e, args.manifest or "command line")
    return manifest


def train_seed(manifest_data: Dict[str, Any], seed: int, show_progress: bool = False) -> Dict[str, Any]:
    """Train one seed of a manifest; importable so it can run in a worker process"""
    manifest = RunManifest(**manifest_data)
    run_dir = manifest.run_dir(seed)
    manager = CheckpointManager(run_dir)
    manager.save_manifest({**manifest.model_dump(mode="json"), "seeds": [seed]})
    result = run_training(manifest.train_config(), load_map(manifest.map), seed,
                          run_dir=run_dir, show_progress=show_progress)
    final = result.metrics[-1] if result.metrics else {}
    return {
        "seed": seed,
        "run_dir": str(run_dir),
        "win_rate": final.get("test_win_rate", float("nan")),
        "env_steps": result.env_steps,
        "episodes": result.episodes,
    }


def cmd_train(args: argparse.Namespace) -> int:
    manifest = build_manifest(args)
    logger.set_log_dir(Path(manifest.out_dir))
    load_map(manifest.map)
    data = manifest.model_dump(mode="json")
    console.print(Panel(
        f"[bold]Map:[/bold] {manifest.map}\n[bold]Algorithm:[/bold] {manifest.algo.value}\n"
        f"[bold]Seeds:[/bold] {manifest.seeds}\n[bold]Output:[/bold] {manifest.out_dir}",
        title="Training", border_style="cyan",
    ))
    if args.parallel and len(manifest.seeds) > 1:
        workers = min(len(manifest.seeds), os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(train_seed, [data] * len(manifest.seeds), manifest.seeds))
    else:
        summaries = [train_seed(data, seed, show_progress=not args.debug) for seed in manifest.seeds]

    table = Table(title=f"{manifest.algo.value} on {manifest.map}")
    table.add_column("Seed", justify="right")
    table.add_column("Final WR", justify="right")
    table.add_column("Env steps", justify="right")
    table.add_column("Episodes", justify="right")
    table.add_column("Run directory", justify="left")
    for s in summaries:
        table.add_row(str(s["seed"]), f"{s['win_rate']:.3f}", str(s["env_steps"]), str(s["episodes"]), s["run_dir"])
    console.print(table)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if args.checkpoint:
        checkpoint = Path(args.checkpoint)
        _, meta = load_checkpoint_file(checkpoint)
        map_name = args.map or meta.get("map")
        if not map_name:
            raise ConfigError(f"Checkpoint {checkpoint} names no map; pass --map")
        policy: Any = checkpoint
        out_dir = Path(args.out) if args.out else checkpoint.parent / "eval"
        label = str(checkpoint)
        episode_limit = meta.get("train_config", {}).get("max_episode_steps")
    elif args.baseline:
        if not args.map:
            raise UsageError("A baseline evaluation needs --map")
        map_name = args.map
        policy = RandomPolicy(np.random.default_rng(args.seed)) if args.baseline == "random" else StopPolicy()
        out_dir = Path(args.out) if args.out else Config.OUTPUT_ROOT / Path(map_name).stem / f"baseline_{args.baseline}"
        label = f"{args.baseline} baseline"
        episode_limit = None
    else:
        raise UsageError("eval needs --checkpoint or --baseline")

    logger.set_log_dir(out_dir)
    map_config = load_map(map_name).with_episode_limit(episode_limit)
    n_episodes = args.episodes or (Config.HEATMAP_EPISODES if args.heatmaps else Config.TEST_EPISODES)
    record, trajectories = evaluate_policy(policy, map_config, n_episodes, seed=args.seed)
    manager = CheckpointManager(out_dir)
    manager.save_trajectories(trajectories)
    console.print(Panel(
        f"[bold]Policy:[/bold] {label}\n[bold]Map:[/bold] {map_config.name}\n"
        f"[bold]Win rate:[/bold] {record.win_rate:.3f} over {n_episodes} episodes\n"
        f"[bold]Mean return:[/bold] {record.mean_return:.3f}",
        title="Evaluation", border_style="green" if record.win_rate > 0 else "yellow",
    ))

    if args.heatmaps:
        kinds = []
        for spawn in map_config.ally_units:
            if spawn.stats.name not in kinds:
                kinds.append(spawn.stats.name)
        for kind in kinds:
            acc = accumulate_heatmaps(trajectories, kind)
            health, actions = acc.to_frames()
            manager.save_table(health, f"heatmap_{kind}_health.csv")
            manager.save_table(actions, f"heatmap_{kind}_actions.csv")
            checks = check_heatmap_structure(acc)
            status = ", ".join(f"{'✅' if ok else '❌'} {name}" for name, ok in checks.items())
            console.print(f"  [bold]{kind}[/bold]: {status}")
        console.print(f"[green]✓ Heat-maps written to {out_dir}[/green]")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    logger.set_log_dir(Config.OUTPUT_ROOT)
    map_config = load_map(args.map)
    assignment = group_by_ideal_object(map_config, split_by_kind=args.split_by_kind)
    env = CombatEnv(map_config)
    jtc = validate_jtc(assignment, map_config.n_allies)

    console.print(Panel(
        f"[bold]Allies:[/bold] {map_config.n_allies}   [bold]Enemies:[/bold] {map_config.n_enemies}\n"
        f"[bold]ES:[/bold] {compute_es(map_config):.2f}   [bold]POS:[/bold] {compute_pos(map_config):.1%}\n"
        f"[bold]Observation dim:[/bold] {env.obs_dim}   [bold]State dim:[/bold] {env.state_dim}\n"
        f"[bold]Padded action dim:[/bold] {padded_action_dim(map_config)}\n"
        f"[bold]JTC:[/bold] {'[green]valid[/green]' if jtc else '[red]violated[/red]'}",
        title=f"Map {map_config.name}", border_style="cyan",
    ))
    table = Table(title="Ideal-object groups")
    table.add_column("Group", justify="right")
    table.add_column("Units", justify="left")
    table.add_column("Ideal object", justify="left")
    table.add_column("Agents", justify="left")
    table.add_column("Action dim", justify="right")
    for g, members in enumerate(assignment.groups):
        table.add_row(str(g), "+".join(assignment.unit_names[g]), assignment.ideal_objects[g],
                      ",".join(str(i) for i in members), str(assignment.action_dim(g)))
    console.print(table)
    if assignment.n_groups == 1:
        console.print("[yellow]Single group: the inter-group MI loss is disabled on this map[/yellow]")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    logger.set_log_dir(Config.OUTPUT_ROOT)
    results = run_validation(quick=args.quick)
    table = Table(title="Validation")
    table.add_column("", justify="center")
    table.add_column("Check", justify="left")
    table.add_column("Tolerance", justify="left")
    table.add_column("Detail", justify="left")
    for r in results:
        table.add_row("✅" if r.passed else "❌", r.name, r.tolerance, r.detail,
                      style=None if r.passed else "red")
    console.print(table)
    ensure_passed(results)
    console.print(f"[green]🎉 All {len(results)} checks passed[/green]")
    return EXIT_OK


def discover_runs(paths: List[str]) -> Dict[str, List[List[Dict[str, Any]]]]:
    """Metrics logs below the given directories, grouped by the algorithm named in each manifest"""
    runs: Dict[str, List[List[Dict[str, Any]]]] = {}
    for root in paths:
        root = Path(root)
        if not root.exists():
            raise ConfigError(f"Run directory not found: {root}")
        for metrics_path in sorted(root.rglob(CheckpointManager.METRICS_FILE)):
            manager = CheckpointManager(metrics_path.parent)
            try:
                algo = manager.load_manifest().get("algo", metrics_path.parent.parent.name)
            except ConfigError:
                algo = metrics_path.parent.parent.name
            records = manager.load_metrics()
            if records:
                runs.setdefault(algo, []).append(records)
    if not runs:
        raise ConfigError(f"No metrics logs found under {', '.join(paths)}")
    return runs


def cmd_compare(args: argparse.Namespace) -> int:
    runs = discover_runs(args.runs)
    manager = CheckpointManager(Path(args.out) if args.out else Config.OUTPUT_ROOT / "comparison")
    logger.set_log_dir(manager.run_dir)
    reference = args.reference if args.reference in runs else next(iter(runs))
    summary = compare_runs(runs, reference=reference, mode=args.ttest)
    manager.save_table(summary, "comparison.csv")
    manager.save_table(win_rate_curves(runs), "win_rate_curves.csv", index=False)

    table = Table(title=f"Final win rates (reference: {reference})")
    for column in ("Algorithm", "Seeds", "WR mean", "WR std", "t", "p"):
        table.add_column(column, justify="left" if column == "Algorithm" else "right")
    for algo, row in summary.iterrows():
        table.add_row(algo, str(int(row["seeds"])), f"{row['wr_mean']:.3f}", f"{row['wr_std']:.3f}",
                      f"{row['t_vs_ref']:.3f}", f"{row['p_vs_ref']:.4f}")
    console.print(table)
    console.print(f"[green]✓ Tables written to {manager.run_dir}[/green]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Grouped Hybrid Q-Learning for heterogeneous cooperative combat")
    parser.add_argument("-d", "--debug", action="store_true", help="Enable debug mode with detailed logging")
    sub = parser.add_subparsers(dest="command")

    train = sub.add_parser("train", help="Train one algorithm variant on a map for one or more seeds")
    train.add_argument("--map", type=str, help="Built-in map name or path to a map JSON file")
    train.add_argument("--algo", choices=[v.value for v in AlgorithmVariant], help="Algorithm variant")
    train.add_argument("--steps", type=int, help="Total environment steps")
    train.add_argument("--seed", type=int, help="Single seed")
    train.add_argument("--seeds", type=str, help="Comma-separated seeds, e.g. 1,2,3")
    train.add_argument("--out", type=str, help="Output root directory")
    train.add_argument("--lambda-mi", type=float, help="Weight of the inter-group MI loss")
    train.add_argument("--lambda-td", type=float, help="Weight of the TD loss")
    train.add_argument("--eval-interval", type=int, help="Env steps between greedy evaluations")
    train.add_argument("--manifest", type=str, help="Run manifest JSON; flags override its entries")
    train.add_argument("--parallel", action="store_true", help="Run seeds in parallel worker processes")

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint (or a scripted baseline) with greedy episodes")
    evaluate.add_argument("--checkpoint", type=str, help="Path to checkpoint.npz")
    evaluate.add_argument("--baseline", choices=["random", "stop"], help="Evaluate a scripted baseline instead")
    evaluate.add_argument("--map", type=str, help="Map (defaults to the checkpoint's map)")
    evaluate.add_argument("--episodes", type=int, help="Number of test episodes")
    evaluate.add_argument("--seed", type=int, default=0, help="First episode seed")
    evaluate.add_argument("--out", type=str, help="Directory for trajectories and heat-maps")
    evaluate.add_argument("--heatmaps", action="store_true", help="Write health/action heat-map CSVs per unit kind")

    analyze = sub.add_parser("analyze", help="Print ES, POS, grouping and action dims of a map")
    analyze.add_argument("--map", type=str, required=True, help="Built-in map name or path to a map JSON file")
    analyze.add_argument("--split-by-kind", action="store_true", help="Separate unit kinds sharing an ideal object")

    validate = sub.add_parser("validate", help="Run gradient, monotonicity, consistency and environment checks")
    validate.add_argument("--quick", action="store_true", help="Fewer instances per check")

    compare = sub.add_parser("compare", help="Compare final win rates across run directories")
    compare.add_argument("runs", nargs="+", help="Directories containing run metrics logs")
    compare.add_argument("--reference", type=str, default=AlgorithmVariant.GHQ.value, help="Reference algorithm")
    compare.add_argument("--ttest", choices=["closed_form", "sample"], default="closed_form", help="Welch test mode")
    compare.add_argument("--out", type=str, help="Directory for the comparison tables")
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "validate": cmd_validate,
    "compare": cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_OK

    setup_logging(debug=args.debug)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        console.print(f"[red]❌ {e}[/red]")
        return EXIT_CHECK_FAILED
    except (ConfigError, UsageError) as e:
        console.print(f"[red]Error: {e}[/red]")
        return EXIT_CONFIG_ERROR
    except GHQError as e:
        logger.error(str(e), exc_info=args.debug)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
