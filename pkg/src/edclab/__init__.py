"""Desk-scale dataset condensation: statistical-matching synthesis with soft
category-aware matching and EMA flatness regularization, ensemble soft labels,
post-evaluation recipes and Gaussian-mixture theory oracles."""

from .config import CondenseConfig, ConfigError, load_config, make_config

__version__ = "0.1.0"

__all__ = ["CondenseConfig", "ConfigError", "load_config", "make_config", "__version__"]
