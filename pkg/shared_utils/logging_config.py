"""
Unified logging configuration for safe RL-MPC experiments.
Console output is colored by level; library modules log under their package names.
"""

import logging
import sys
from typing import Any, Mapping, Optional, Tuple
from colorama import Fore, Style, init

# Initialize colorama
init()

APP_LOGGER = "safe_rl_mpc"
LIBRARY_LOGGERS = ("safe_rl", "harness", "shared_utils")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ColoredFormatter(logging.Formatter):
    """Formatter that colors log messages by level."""

    COLORS = {
        'DEBUG': Fore.CYAN,
        'INFO': Fore.GREEN,
        'WARNING': Fore.YELLOW,
        'ERROR': Fore.RED,
        'CRITICAL': Fore.MAGENTA + Style.BRIGHT,
    }

    def format(self, record):
        color = self.COLORS.get(record.levelname, '')
        reset = Style.RESET_ALL if color else ''
        formatted = super().format(record)
        return f"{color}{formatted}{reset}"


class SafeRLLogger:
    """Centralized logging setup for the application and library loggers."""

    def __init__(self,
                 name: str = APP_LOGGER,
                 level: str = "INFO",
                 use_colors: bool = True,
                 log_to_file: Optional[str] = None):
        """Initialize the logging system.

        Args:
            name: Application logger name
            level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
            use_colors: Whether to use colored output for console
            log_to_file: Optional file path to also log to
        """
        self.logger = logging.getLogger(name)
        self.use_colors = use_colors
        self.handlers = [self._console_handler()]
        if log_to_file:
            self.handlers.append(self._file_handler(log_to_file))

        for logger_name in (name,) + LIBRARY_LOGGERS:
            target = logging.getLogger(logger_name)
            target.setLevel(getattr(logging, level.upper()))
            target.handlers.clear()
            target.propagate = False
            for handler in self.handlers:
                target.addHandler(handler)

    def _console_handler(self) -> logging.Handler:
        console_handler = logging.StreamHandler(sys.stdout)
        fmt = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        if self.use_colors:
            formatter = ColoredFormatter(fmt, datefmt='%H:%M:%S')
        else:
            formatter = logging.Formatter(fmt, datefmt='%H:%M:%S')
        console_handler.setFormatter(formatter)
        return console_handler

    def _file_handler(self, log_file: str) -> logging.Handler:
        """File handler for persistent logging."""
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
        ))
        return file_handler

    def get_logger(self) -> logging.Logger:
        return self.logger


def setup_logging(level: str = "INFO",
                  use_colors: bool = True,
                  log_to_file: Optional[str] = None,
                  logger_name: str = APP_LOGGER) -> logging.Logger:
    """Set up logging and return the application logger."""
    return SafeRLLogger(
        name=logger_name,
        level=level,
        use_colors=use_colors,
        log_to_file=log_to_file
    ).get_logger()


def get_logger(name: str = APP_LOGGER) -> logging.Logger:
    """Get a logger instance (creates default setup if needed)."""
    logger = logging.getLogger(name)
    if not logger.handlers:
        logger = setup_logging(logger_name=name)
    return logger


def print_success(message: str, logger: Optional[logging.Logger] = None):
    """Log a finished artifact."""
    (logger or get_logger()).info(f"✓ {message}")


def print_progress(current: int, total: int, message: str = "",
                   logger: Optional[logging.Logger] = None):
    """Log progress information."""
    percentage = (current / total * 100) if total > 0 else 0
    progress_msg = f"Progress: {current}/{total} ({percentage:.1f}%)"
    if message:
        progress_msg += f" - {message}"
    (logger or get_logger()).info(progress_msg)


def logging_settings(progress: Mapping[str, Any],
                     level: Optional[str] = None,
                     no_color: bool = False) -> Tuple[str, bool]:
    """Resolve (level, use_colors) from the progress config section.

    An explicit level and no_color from the command line win over the config;
    an unknown level falls back to INFO.
    """
    chosen = (level or progress.get("log_level") or "INFO").upper()
    if chosen not in LOG_LEVELS:
        logging.getLogger(APP_LOGGER).warning(f"Unknown log level '{chosen}', using INFO")
        chosen = "INFO"
    use_colors = bool(progress.get("colored_output", True)) and not no_color
    return chosen, use_colors
