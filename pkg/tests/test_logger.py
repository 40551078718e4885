"""Tests for the structured logger"""
import logging

from config import Config
from logger import get_logger, setup_logging


class TestLogFile:
    """Test where the rotating log file goes"""

    def test_console_only_without_dir(self):
        setup_logging()
        handlers = logging.getLogger("ghq").handlers
        assert len(handlers) == 1

    def test_file_under_log_dir(self, temp_run_dir):
        setup_logging(log_dir=temp_run_dir)
        get_logger().info("hello")
        assert "hello" in (temp_run_dir / Config.LOG_FILE).read_text()

    def test_redirect_replaces_file_handler(self, temp_run_dir):
        setup_logging(log_dir=temp_run_dir / "first")
        logger = get_logger()
        path = logger.set_log_dir(temp_run_dir / "second")
        logger.info("moved")
        assert path == temp_run_dir / "second" / Config.LOG_FILE
        assert "moved" in path.read_text()
        assert "moved" not in (temp_run_dir / "first" / Config.LOG_FILE).read_text()
        assert len(logging.getLogger("ghq").handlers) == 2

    def test_same_dir_keeps_handler(self, temp_run_dir):
        setup_logging(log_dir=temp_run_dir)
        logger = get_logger()
        before = list(logging.getLogger("ghq").handlers)
        logger.set_log_dir(temp_run_dir)
        assert logging.getLogger("ghq").handlers == before
