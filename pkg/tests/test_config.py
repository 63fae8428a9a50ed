import math
import os
import sys
import pytest
from unittest.mock import patch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import config
from errors import ConfigError, DataError


def test_resolve_seed_without_override():
    """Test the given seed is kept when CAUSAL_ACT_SEED is unset"""
    with patch.dict(os.environ, {}, clear=False):
        os.environ.pop("CAUSAL_ACT_SEED", None)
        assert config.resolve_seed(7) == 7


def test_resolve_seed_override():
    with patch.dict(os.environ, {"CAUSAL_ACT_SEED": "42"}):
        assert config.resolve_seed(7) == 42


def test_resolve_seed_ignores_bad_values():
    """Test non-integer and negative overrides fall back to the given seed"""
    for value in ("forty-two", "-3", ""):
        with patch.dict(os.environ, {"CAUSAL_ACT_SEED": value}):
            assert config.resolve_seed(7) == 7


def test_parse_exponent():
    assert config.parse_exponent(3) == 3.0
    assert config.parse_exponent("1.5") == 1.5
    assert config.parse_exponent(None) == math.inf
    for text in ("inf", "Infinity", " +inf "):
        assert config.parse_exponent(text) == math.inf
    with pytest.raises(ConfigError):
        config.parse_exponent(-1)
    with pytest.raises(ConfigError):
        config.parse_exponent("lots")
    with pytest.raises(ConfigError):
        config.parse_exponent(float("nan"))


def test_format_exponent():
    assert config.format_exponent(0.0) == "0"
    assert config.format_exponent(3.0) == "3"
    assert config.format_exponent(1.5) == "1.5"
    assert config.format_exponent(math.inf) == "inf"


def test_load_config_file_json_and_yaml(tmp_path):
    json_path = tmp_path / "exp.json"
    json_path.write_text('{"train": {"epochs": 3}}')
    assert config.load_config_file(str(json_path)) == {"train": {"epochs": 3}}

    yaml_path = tmp_path / "exp.yaml"
    yaml_path.write_text("train:\n  epochs: 4\nseeds: [1, 2]\n")
    assert config.load_config_file(str(yaml_path)) == {"train": {"epochs": 4}, "seeds": [1, 2]}

    empty = tmp_path / "empty.json"
    empty.write_text("")
    assert config.load_config_file(str(empty)) == {}


def test_load_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        config.load_config_file(str(tmp_path / "missing.json"))

    broken = tmp_path / "broken.json"
    broken.write_text('{"train": [1, 2')
    with pytest.raises(DataError):
        config.load_config_file(str(broken))

    listing = tmp_path / "list.json"
    listing.write_text("[1, 2, 3]")
    with pytest.raises(ConfigError):
        config.load_config_file(str(listing))


def test_ensure_output_dir(tmp_path):
    target = tmp_path / "runs" / "nested"
    assert config.ensure_output_dir(str(target)) == str(target)
    assert target.is_dir()
    # Existing directories are fine
    config.ensure_output_dir(str(target))


def test_config_workers_from_environment():
    """Test CAUSAL_ACT_WORKERS is read at import time"""
    import importlib

    original = os.environ.get("CAUSAL_ACT_WORKERS")
    try:
        os.environ["CAUSAL_ACT_WORKERS"] = "4"
        importlib.reload(config)
        assert config.WORKERS == 4

        os.environ["CAUSAL_ACT_WORKERS"] = "0"
        importlib.reload(config)
        assert config.WORKERS == 1

        os.environ["CAUSAL_ACT_WORKERS"] = "many"
        importlib.reload(config)
        assert config.WORKERS == 1
    finally:
        if original is not None:
            os.environ["CAUSAL_ACT_WORKERS"] = original
        else:
            os.environ.pop("CAUSAL_ACT_WORKERS", None)
        importlib.reload(config)
        config.TEST = True


def test_config_output_dir_from_environment():
    import importlib

    original = os.environ.get("CAUSAL_ACT_OUTPUT_DIR")
    try:
        os.environ["CAUSAL_ACT_OUTPUT_DIR"] = "/tmp/causal-act-runs"
        importlib.reload(config)
        assert config.OUTPUT_DIR == "/tmp/causal-act-runs"
    finally:
        if original is not None:
            os.environ["CAUSAL_ACT_OUTPUT_DIR"] = original
        else:
            os.environ.pop("CAUSAL_ACT_OUTPUT_DIR", None)
        importlib.reload(config)
        config.TEST = True


def test_config_log_level_configuration():
    """Test log level configuration from environment"""
    import importlib

    original = os.environ.get("CAUSAL_ACT_LOG_LEVEL")
    try:
        os.environ["CAUSAL_ACT_LOG_LEVEL"] = "debug"
        importlib.reload(config)
        assert config.LOG_LEVEL == "DEBUG"
    finally:
        if original is not None:
            os.environ["CAUSAL_ACT_LOG_LEVEL"] = original
        else:
            os.environ.pop("CAUSAL_ACT_LOG_LEVEL", None)
        importlib.reload(config)
        config.TEST = True
