"""
Configuration Management
Handles paths, numeric precision, ledger location and logging setup
"""
import os
import sys
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from loguru import logger

from errors import ConfigError

# Load environment variables
load_dotenv()

__version__ = "1.0.0"

# ============================================================================
# PATHS
# ============================================================================
PROJECT_ROOT = Path(__file__).parent
CONFIGS_DIR = PROJECT_ROOT / "configs"
OUTPUT_DIR = Path(os.getenv("MACO_OUTPUT_DIR", str(PROJECT_ROOT / "runs")))
LOGS_DIR = OUTPUT_DIR / "logs"

# ============================================================================
# NUMERIC PRECISION
# ============================================================================
VALID_PRECISIONS = ["float32", "float64"]

TRAIN_PRECISION = os.getenv("MACO_TRAIN_PRECISION", "float32")
CHECK_PRECISION = os.getenv("MACO_CHECK_PRECISION", "float64")

for _name, _value in [("MACO_TRAIN_PRECISION", TRAIN_PRECISION), ("MACO_CHECK_PRECISION", CHECK_PRECISION)]:
    if _value not in VALID_PRECISIONS:
        raise ConfigError(
            f"Invalid {_name}: '{_value}'\n"
            f"Valid options: {VALID_PRECISIONS}"
        )

# ============================================================================
# INGESTION
# ============================================================================
try:
    INGEST_WORKERS = int(os.getenv("MACO_INGEST_WORKERS", "4"))
except ValueError as e:
    raise ConfigError(f"MACO_INGEST_WORKERS must be an integer: {e}") from e

if INGEST_WORKERS < 1:
    raise ConfigError(f"MACO_INGEST_WORKERS must be >= 1, got {INGEST_WORKERS}")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# ============================================================================
# EXPERIMENT LEDGER
# ============================================================================
# SQLite file next to the run outputs unless overridden (any SQLAlchemy URL works)
DATABASE_URL = os.getenv("MACO_DATABASE_URL", f"sqlite:///{OUTPUT_DIR / 'ledger.db'}")

# ============================================================================
# LOGGING
# ============================================================================
LOG_LEVEL = os.getenv("MACO_LOG_LEVEL", "INFO")
LOG_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>"


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """
    Install the stderr sink (and optionally a rotating file sink).

    Args:
        level: Log level for stderr (default: MACO_LOG_LEVEL)
        log_file: File name under LOGS_DIR for a DEBUG sink, or None
    """
    logger.remove()  # Remove default handler
    logger.add(
        sys.stderr,
        format=LOG_FORMAT,
        level=level or LOG_LEVEL,
        colorize=True
    )
    if log_file:
        LOGS_DIR.mkdir(parents=True, exist_ok=True)
        logger.add(
            LOGS_DIR / log_file,
            rotation="1 day",
            retention="7 days",
            level="DEBUG"
        )


def describe() -> str:
    """One-line summary of the active process configuration."""
    return (
        f"maco {__version__} | output={OUTPUT_DIR} | ledger={DATABASE_URL} | "
        f"precision train={TRAIN_PRECISION} check={CHECK_PRECISION} | ingest_workers={INGEST_WORKERS}"
    )
