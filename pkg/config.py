import logging
import math
import os
import sys
from typing import Any, Optional

import yaml

from errors import ConfigError, DataError

# Configure logging
LOG_LEVEL = os.environ.get("CAUSAL_ACT_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = os.environ.get(
    "CAUSAL_ACT_LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)

# Setup root logger configuration
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format=LOG_FORMAT,
    handlers=[logging.StreamHandler(sys.stdout)],
)

log = logging.getLogger("causal_act.config")

## Configuration Settings
# Overrides every seed found in config files when set
SEED_OVERRIDE_VAR = "CAUSAL_ACT_SEED"

# Worker count for grid cells and per-iteration rollouts
WORKERS = os.environ.get("CAUSAL_ACT_WORKERS", "1")

# Default directory for run artifacts
OUTPUT_DIR = os.environ.get("CAUSAL_ACT_OUTPUT_DIR", "runs")

# Boolean of whether this is a test environment
TEST = os.environ.get("CAUSAL_ACT_TEST", False)

# Checkpoint / dataset schema version written into every artifact header
SCHEMA_VERSION = 1


## Config Logic
try:
    WORKERS = int(WORKERS)
except ValueError:
    log.warning(f"CAUSAL_ACT_WORKERS={WORKERS!r} is not an integer, using 1 worker")
    WORKERS = 1
if WORKERS < 1:
    log.warning(f"CAUSAL_ACT_WORKERS={WORKERS} is invalid, using 1 worker")
    WORKERS = 1


def resolve_seed(seed: int) -> int:
    """Return the seed to use, honouring the CAUSAL_ACT_SEED override.

    Args:
        seed (int): The seed found in the config file or on the command line

    Returns:
        int: The override when it is set to a valid integer, otherwise `seed`
    """
    override = os.environ.get(SEED_OVERRIDE_VAR)
    if override is None or override == "":
        return seed
    try:
        value = int(override)
    except ValueError:
        log.warning(f"Ignoring {SEED_OVERRIDE_VAR}={override!r}: not an integer")
        return seed
    if value < 0:
        log.warning(f"Ignoring {SEED_OVERRIDE_VAR}={value}: seeds must be >= 0")
        return seed
    log.debug(f"Seed {seed} overridden by {SEED_OVERRIDE_VAR}={value}")
    return value


def parse_exponent(value: Any) -> float:
    """Parse a domain-randomization exponent; "inf"/"infinity"/None mean +inf."""
    if value is None:
        return math.inf
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "+inf", "infinity", "+infinity", "∞"):
            return math.inf
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"Invalid exponent {value!r}")
    value = float(value)
    if value < 0 or math.isnan(value):
        raise ConfigError(f"Exponent must be >= 0 or inf, got {value}")
    return value


def format_exponent(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:g}"


def load_config_file(path: str) -> dict:
    """Load a JSON (or YAML) config file into a dict.

    YAML is a superset of JSON, so a single safe loader serves both formats.
    """
    try:
        with open(path, "r") as f:
            content = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except yaml.YAMLError as e:
        raise DataError(f"Config file {path} is not valid JSON/YAML: {e}")

    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigError(f"Config file {path} must contain an object at top level")
    log.debug(f"Loaded config file {path} with sections {sorted(content)}")
    return content


def ensure_output_dir(path: Optional[str] = None) -> str:
    directory = path or OUTPUT_DIR
    os.makedirs(directory, exist_ok=True)
    return directory


log.debug(f"Configuration loaded - Workers: {WORKERS}, Output: {OUTPUT_DIR}")
