"""Structured logging system for the GHQ framework"""
import logging
import os
from pathlib import Path
from logging.handlers import RotatingFileHandler
from typing import Dict, Optional
from rich.logging import RichHandler
from rich.console import Console

from config import Config

console = Console()


class GHQLogger:
    """Centralized logging system with console and file output"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if hasattr(self, '_initialized'):
            return
        self._initialized = True
        self.logger = logging.getLogger("ghq")
        self.debug_mode = False
        self._file_handler: Optional[RotatingFileHandler] = None

    def setup(self, debug: bool = False, log_dir: Optional[Path] = None):
        """Setup the console handler, plus the file handler when log_dir is given"""
        self.debug_mode = debug
        log_level = logging.DEBUG if debug else logging.INFO

        self.logger.handlers.clear()
        self.logger.setLevel(logging.DEBUG)
        self._file_handler = None

        console_handler = RichHandler(
            console=console,
            rich_tracebacks=True,
            tracebacks_show_locals=debug,
            markup=True
        )
        console_handler.setLevel(log_level)
        console_handler.setFormatter(logging.Formatter("%(message)s"))
        self.logger.addHandler(console_handler)

        if log_dir is not None:
            self.set_log_dir(log_dir)
        self.debug(f"Logger initialized (debug={'ON' if debug else 'OFF'})")

    def set_log_dir(self, log_dir: Path) -> Path:
        """Route the rotating file log into log_dir; returns the log file path"""
        log_path = Path(log_dir) / Config.LOG_FILE
        current = self._file_handler
        if current is not None and current in self.logger.handlers:
            if current.baseFilename == os.path.abspath(log_path):
                return log_path
        if current is not None:
            self.logger.removeHandler(current)
            current.close()

        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_path,
            maxBytes=Config.LOG_MAX_BYTES,
            backupCount=Config.LOG_BACKUP_COUNT
        )
        file_handler.setLevel(logging.DEBUG)  # Always DEBUG for files
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(module)s:%(funcName)s:%(lineno)d - %(message)s'
        ))
        self.logger.addHandler(file_handler)
        self._file_handler = file_handler
        return log_path

    def debug(self, message: str, **kwargs):
        self.logger.debug(message, extra=kwargs)

    def info(self, message: str, **kwargs):
        self.logger.info(message, extra=kwargs)

    def warning(self, message: str, **kwargs):
        self.logger.warning(message, extra=kwargs)

    def error(self, message: str, exc_info: bool = False, **kwargs):
        self.logger.error(message, exc_info=exc_info, extra=kwargs)

    def critical(self, message: str, exc_info: bool = True, **kwargs):
        self.logger.critical(message, exc_info=exc_info, extra=kwargs)

    def log_episode(self, episode: int, env_step: int, length: int, ret: float, won: bool, epsilon: float):
        """Log a finished training rollout"""
        self.debug(
            f"Episode {episode} | steps={length} | total={env_step} | return={ret:.3f} "
            f"| won={won} | eps={epsilon:.3f}"
        )

    def log_update(self, episode: int, losses: Dict[str, float], grad_norm: float):
        """Log one learner update"""
        parts = " ".join(f"{k}={v:.4f}" for k, v in losses.items())
        self.debug(f"Update @ep {episode} | {parts} | grad_norm={grad_norm:.3f}")

    def log_eval(self, env_step: int, win_rate: float, mean_return: float, n_episodes: int):
        """Log a greedy evaluation round"""
        self.info(
            f"Eval @{env_step} steps | WR={win_rate:.3f} over {n_episodes} episodes "
            f"| mean return={mean_return:.3f}"
        )

    def log_target_update(self, episode: int):
        self.debug(f"Target networks synchronized at episode {episode}")

    def log_lr_decay(self, episode: int, lr: float):
        self.info(f"Learning rate decayed to {lr:.2e} at episode {episode}")

    def log_check(self, name: str, passed: bool, detail: str = ""):
        """Log oracle check result"""
        status = "✓" if passed else "✗"
        msg = f"Check {status} {name}"
        if detail:
            msg += f" | {detail}"
        if passed:
            self.debug(msg)
        else:
            self.warning(msg)


# Global logger instance
_logger = GHQLogger()


def get_logger() -> GHQLogger:
    """Get the global logger instance"""
    return _logger


def setup_logging(debug: bool = False, log_dir: Optional[Path] = None):
    """Setup the global logger"""
    _logger.setup(debug, log_dir)
