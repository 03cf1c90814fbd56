#!/usr/bin/env python3
"""
partint utility functions
Environment variables, logging setup, interactive detection and seeding
"""

import sys
import os
import logging
import hashlib
import random
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
import torch

LOG_FORMAT = "[%(name)s] [%(levelname)s] %(message)s"

_logger = logging.getLogger("partint.utils")


def is_interactive() -> bool:
    """
    Detect if running in an interactive context (terminal with TTY)

    Returns:
        True if both stdin and stdout are connected to a TTY, False otherwise

    The trainer uses this to decide whether per-batch progress goes to INFO
    (terminal) or DEBUG (background runs, CI).
    """
    return sys.stdin.isatty() and sys.stdout.isatty()


def get_env_int(var_name: str, default: Optional[int] = None) -> Optional[int]:
    """
    Get an integer value from environment variable

    Args:
        var_name: Environment variable name
        default: Default value if not set or invalid

    Returns:
        Integer value from environment or default
    """
    value = os.getenv(var_name)
    if value is None:
        return default

    try:
        return int(value)
    except ValueError:
        _logger.warning(f"Invalid value for {var_name}='{value}', using default: {default}")
        return default


def get_env_bool(var_name: str, default: bool = False) -> bool:
    """
    Get a boolean value from environment variable

    Accepts: true/false, yes/no, 1/0 (case insensitive)
    """
    value = os.getenv(var_name)
    if value is None:
        return default

    value_lower = value.lower()
    if value_lower in ('true', 'yes', '1'):
        return True
    elif value_lower in ('false', 'no', '0'):
        return False
    else:
        _logger.warning(f"Invalid boolean value for {var_name}='{value}', using default: {default}")
        return default


def get_env_str(var_name: str, default: Optional[str] = None) -> Optional[str]:
    """Get a string value from environment variable"""
    return os.getenv(var_name, default)


def configure_logging(level: Union[int, str, None] = None,
                      log_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    """
    Configure the `partint` logger hierarchy

    Level precedence: explicit argument > PARTINT_LOG_LEVEL > INFO.
    When log_file is given, records are also appended to it (the run
    directory's train.log).
    """
    if level is None:
        level = get_env_str("PARTINT_LOG_LEVEL", "INFO")
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    root = logging.getLogger("partint")
    root.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)

    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in root.handlers):
        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(formatter)
        root.addHandler(console)

    if log_file is not None:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        resolved = str(log_path.resolve())
        if not any(isinstance(h, logging.FileHandler) and h.baseFilename == resolved
                   for h in root.handlers):
            file_handler = logging.FileHandler(resolved)
            file_handler.setFormatter(formatter)
            root.addHandler(file_handler)

    return root


@contextmanager
def run_log(log_file: Union[str, Path]) -> Iterator[logging.FileHandler]:
    """
    Send `partint` records to log_file for the duration of one run

    The handler is removed and closed on exit, so consecutive runs in one
    process each keep their own train.log.
    """
    root = configure_logging()
    log_path = Path(log_file)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(str(log_path.resolve()))
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        handler.close()


def get_logger(component: str) -> logging.Logger:
    """Logger for one component, e.g. get_logger("train") -> partint.train"""
    return logging.getLogger(f"partint.{component}")


def derive_seed(root_seed: int, *keys: Union[int, str]) -> int:
    """
    Derive an independent 32-bit seed from a root seed and a key path

    Stable across processes and Python versions (no hash randomization), so
    per-scene generation in worker processes reproduces the serial run.
    """
    material = ":".join([str(int(root_seed))] + [str(k) for k in keys]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:4], "little")


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    """Seed python, numpy and torch; returns a torch generator for samplers"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
