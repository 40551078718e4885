"""Run-directory persistence: manifests, metrics logs, checkpoints, trajectories, heat-maps"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from exceptions import CheckpointError, ConfigError
from logger import get_logger

logger = get_logger()

META_KEY = "__meta__"


class CheckpointManager:
    """Owns every file written for one training/evaluation run"""

    MANIFEST_FILE = "manifest.json"
    METRICS_FILE = "metrics.jsonl"
    CHECKPOINT_FILE = "checkpoint.npz"
    TRAJECTORIES_FILE = "trajectories.json"

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / self.METRICS_FILE

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / self.CHECKPOINT_FILE

    # ---- manifest ---------------------------------------------------------

    def save_manifest(self, manifest: Dict[str, Any]) -> Path:
        path = self.run_dir / self.MANIFEST_FILE
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        logger.debug(f"Wrote manifest: {path}")
        return path

    def load_manifest(self) -> Dict[str, Any]:
        path = self.run_dir / self.MANIFEST_FILE
        try:
            with open(path, "r") as f:
                return json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Manifest not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Manifest {path} is not valid JSON: {e}")

    # ---- metrics log ------------------------------------------------------

    def reset_metrics(self):
        if self.metrics_path.exists():
            self.metrics_path.unlink()

    def append_metrics(self, record: Dict[str, Any]):
        """Append one JSON line; keys sorted so identical runs give identical bytes"""
        with open(self.metrics_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def load_metrics(self) -> List[Dict[str, Any]]:
        if not self.metrics_path.exists():
            return []
        records = []
        with open(self.metrics_path, "r") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    logger.error(f"Skipping corrupt metrics line {line_no} in {self.metrics_path}: {e}")
        return records

    # ---- checkpoints ------------------------------------------------------

    def save_checkpoint(self, params: Dict[str, np.ndarray], meta: Dict[str, Any],
                        path: Optional[Path] = None) -> Path:
        """Flat name -> float64 records plus a JSON metadata record"""
        path = Path(path) if path else self.checkpoint_path
        if META_KEY in params:
            raise CheckpointError(f"Parameter name {META_KEY} is reserved")
        arrays = {name: np.asarray(value, dtype=np.float64) for name, value in params.items()}
        arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
        with open(path, "wb") as f:
            np.savez(f, **arrays)
        logger.info(f"Saved checkpoint: {path} ({len(params)} tensors)")
        return path

    def load_checkpoint(self, path: Optional[Path] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        path = Path(path) if path else self.checkpoint_path
        return load_checkpoint_file(path)

    # ---- evaluation artefacts ---------------------------------------------

    def save_trajectories(self, trajectories: List[Dict[str, Any]], name: str = TRAJECTORIES_FILE) -> Path:
        path = self.run_dir / name
        with open(path, "w") as f:
            json.dump(trajectories, f)
        logger.debug(f"Wrote {len(trajectories)} trajectories: {path}")
        return path

    def save_table(self, frame: pd.DataFrame, name: str, index: bool = True) -> Path:
        path = self.run_dir / name
        frame.to_csv(path, index=index)
        logger.debug(f"Wrote table: {path}")
        return path


def load_checkpoint_file(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            params = {name: archive[name].copy() for name in archive.files if name != META_KEY}
            meta = json.loads(str(archive[META_KEY])) if META_KEY in archive.files else {}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}")
    return params, meta
