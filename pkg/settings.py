"""
Environment-driven defaults for the measurement-error variable selection tools.
Values are read from the process environment after loading a local .env file.
"""

import os
import logging
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _env_int(name, default):
    value = os.environ.get(name)
    if value is None or value == "":
        return default
    try:
        return int(value)
    except ValueError:
        logging.getLogger(__name__).warning(f"Ignoring non-integer {name}={value!r}, using {default}")
        return default


LOG_LEVEL = os.environ.get("MEPEN_LOG_LEVEL", "INFO").upper()
LOG_FILE = os.environ.get("MEPEN_LOG_FILE")
CACHE_DIR = os.environ.get("MEPEN_CACHE_DIR", ".mepen_cache")
RESULTS_DIR = os.environ.get("MEPEN_RESULTS_DIR", "results")
N_JOBS = _env_int("MEPEN_N_JOBS", 1)
GRID_SIZE = _env_int("MEPEN_GRID_SIZE", 25)
W_QUAD_SIZE = _env_int("MEPEN_W_QUAD", 20)


def configure_logging(level=None, log_file=None):
    """Configure root logging the same way for every entry point"""
    handlers = [logging.StreamHandler()]
    log_file = log_file or LOG_FILE
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )
