"""
Settings for the splatcam project.

Values are plain module constants; environment overrides come from a ``.env`` file next to
``manage.py`` (or the process environment).
"""

import logging.config
import os

from dotenv import load_dotenv

# Project root: two levels above this file.
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

load_dotenv(os.path.join(BASE_DIR, ".env"))


def _env_flag(name, default):
    value = os.environ.get(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


# Where commands write their outputs unless told otherwise.
OUTPUT_ROOT = os.environ.get("SPLATCAM_OUTPUT_ROOT", os.path.join(BASE_DIR, "runs"))

# Deterministic kernels on by default; turn off for speed.
DETERMINISTIC = _env_flag("SPLATCAM_DETERMINISTIC", True)

LOG_LEVEL = os.environ.get("SPLATCAM_LOG_LEVEL", "INFO").upper()

CHECKPOINT_FORMAT = "splatcam-checkpoint"
CHECKPOINT_VERSION = 1

MANIFEST_NAME = "manifest.json"
METRICS_LOG_NAME = "metrics.jsonl"

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "simple": {
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "simple",
        },
    },
    "loggers": {
        "main": {"handlers": ["console"], "level": LOG_LEVEL, "propagate": False},
        "common": {"handlers": ["console"], "level": LOG_LEVEL, "propagate": False},
        "splatcam": {"handlers": ["console"], "level": LOG_LEVEL, "propagate": False},
    },
    "root": {"handlers": ["console"], "level": "WARNING"},
}


def configure_logging(level=None):
    config = dict(LOGGING)
    if level:
        level = level.upper()
        config["loggers"] = {name: dict(spec, level=level) for name, spec in LOGGING["loggers"].items()}
    logging.config.dictConfig(config)
