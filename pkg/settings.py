"""
settings.py: Environment-backed defaults and logging setup.
"""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

# Read run defaults from environment
default_seed = int(os.getenv("QMAMBA_SEED", "0"))
default_out_dir = os.getenv("QMAMBA_OUT", "runs")
log_level = os.getenv("QMAMBA_LOG_LEVEL", "INFO").upper()
reservoir_capacity = int(os.getenv("QMAMBA_RESERVOIR_CAPACITY", "65536"))
show_progress = os.getenv("QMAMBA_PROGRESS", "1").lower() not in ("0", "false", "no")


def setup_logging(level=None):
    """
    Configure the root logger with the bracketed module prefix.
    Args:
        level (str | int | None): Log level; falls back to QMAMBA_LOG_LEVEL.
    """
    logging.basicConfig(
        format="[%(name)s] %(message)s",
        level=level or log_level,
        force=True,
    )


def progress_disabled():
    return not show_progress
