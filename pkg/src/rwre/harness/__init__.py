"""Configuration, persistence, orchestration and the ``rwre`` command line."""

from .config import ExperimentConfig, format_value, parse_config, parse_config_text
from .persist import ResultRecord, atomic_write, read_body
from .runner import SUBCOMMANDS, execute, run_subcommand
from ..seeding import seed_stream

__all__ = [
    "ExperimentConfig",
    "ResultRecord",
    "SUBCOMMANDS",
    "atomic_write",
    "execute",
    "format_value",
    "parse_config",
    "parse_config_text",
    "read_body",
    "run_subcommand",
    "seed_stream",
]
