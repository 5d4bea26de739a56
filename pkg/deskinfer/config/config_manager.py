#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Configuration module for deskinfer.
This module provides loading and saving of launch and sweep configuration,
and converts it into validated runtime and benchmark settings.
"""

import copy
import os
import yaml
import json
import logging
from typing import Dict, Any, Optional

from ..core.model import ModelConfig
from ..errors import ConfigurationError


class ConfigManager:
    """Class for managing launch and sweep configuration."""

    def __init__(self, config_path: str = "config.yaml"):
        """
        Initialize the configuration manager.

        Args:
            config_path: Path to configuration file (YAML or JSON)
        """
        self.config_path = config_path
        self.logger = logging.getLogger("config_manager")
        self.config = self._get_default_config()

        # Load configuration if it exists
        if os.path.exists(config_path):
            self.load()

    @staticmethod
    def _get_default_config() -> Dict[str, Any]:
        """
        Get default configuration.

        Returns:
            Default configuration dictionary
        """
        return {
            # General settings
            "general": {
                "log_level": "INFO",
                "log_file": "deskinfer.log",
                "seed": 0
            },

            # Model settings
            "model": {
                "num_layers": 4,
                "num_heads": 4,
                "head_dim": 8,
                "vocab_size": 64,
                "max_seq": 32,
                "causal": True,
                "norm_position": "pre",
                "layer_norm_eps": 1e-5,
                "seed": 0
            },

            # Runtime settings
            "runtime": {
                "tp_size": 1,
                "pp_size": 1,
                "drce": False,
                "dispatch_lanes": None,  # default 2 x pp_size
                "queue_capacity": 64,
                "checkpoint_path": None,
                "transport": "inprocess",
                "recv_timeout": 30.0,  # seconds
                "collective_timeout": 30.0,
                "init_timeout": 60.0
            },

            # Memory pool settings
            "pool": {
                "enabled": False,
                "plan_file": None,
                "local_capacity_layers": 2,
                "prefetch_depth": 1,
                "peer_capacities": [1, 1],  # layers per peer device
                "peer_link_gbps": 600.0,
                "host_link_gbps": 32.0,
                "peer_interference": 0.0,
                "bytes_per_param": 8
            },

            # Benchmark sweep settings
            "bench": {
                "tp": [1],
                "pp": [1, 2, 4],
                "drce": [False],
                "pool": [False],
                "batch_sizes": [1, 4],
                "pad_sizes": [16],
                "num_batches": 8,
                "warmup_runs": 3,
                "measured_runs": 10,
                "clock": "virtual",
                "valid_fraction": 0.5,
                "alpha": 1e-12,  # seconds per token per parameter
                "link_gbps": 600.0,
                "out": None,
                "format": "csv"
            }
        }

    def load(self) -> bool:
        """
        Load configuration from file.

        Returns:
            True if configuration was loaded successfully, False otherwise
        """
        try:
            loaded_config = self._read(self.config_path)
            if loaded_config is None:
                return False

            # Merge with default config to ensure all keys exist
            self._merge_config(loaded_config)
            self.logger.info(f"Configuration loaded from {self.config_path}")
            return True

        except Exception as e:
            self.logger.error(f"Failed to load configuration: {str(e)}")
            return False

    def _read(self, path: str) -> Optional[Dict[str, Any]]:
        if not os.path.exists(path):
            self.logger.warning(f"Configuration file {path} does not exist, using defaults")
            return None

        file_ext = os.path.splitext(path)[1].lower()

        if file_ext == '.yaml' or file_ext == '.yml':
            with open(path, 'r') as f:
                return yaml.safe_load(f) or {}
        elif file_ext == '.json':
            with open(path, 'r') as f:
                return json.load(f)

        self.logger.error(f"Unsupported configuration file format: {file_ext}")
        return None

    def save(self, path: Optional[str] = None) -> bool:
        """
        Save configuration to file.

        Args:
            path: Target file (default: the loaded path)

        Returns:
            True if configuration was saved successfully, False otherwise
        """
        path = path or self.config_path
        try:
            file_ext = os.path.splitext(path)[1].lower()

            if file_ext == '.yaml' or file_ext == '.yml':
                with open(path, 'w') as f:
                    yaml.dump(self.config, f, default_flow_style=False, sort_keys=False)
            elif file_ext == '.json':
                with open(path, 'w') as f:
                    json.dump(self.config, f, indent=2)
            else:
                self.logger.error(f"Unsupported configuration file format: {file_ext}")
                return False

            self.logger.info(f"Configuration saved to {path}")
            return True

        except Exception as e:
            self.logger.error(f"Failed to save configuration: {str(e)}")
            return False

    def _merge_config(self, loaded_config: Dict[str, Any]) -> None:
        """
        Merge loaded configuration with default configuration.

        Args:
            loaded_config: Loaded configuration dictionary
        """
        def merge_dicts(default_dict, loaded_dict):
            for key, value in loaded_dict.items():
                if key in default_dict and isinstance(default_dict[key], dict) and isinstance(value, dict):
                    merge_dicts(default_dict[key], value)
                else:
                    default_dict[key] = value

        merge_dicts(self.config, loaded_config)

    def get(self, section: str, key: Optional[str] = None, default: Any = None) -> Any:
        """
        Get configuration value.

        Args:
            section: Configuration section
            key: Configuration key (if None, returns entire section)
            default: Default value if key doesn't exist

        Returns:
            Configuration value
        """
        if section not in self.config:
            return default

        if key is None:
            return self.config[section]

        return self.config[section].get(key, default)

    def set(self, section: str, key: str, value: Any) -> None:
        """
        Set configuration value.

        Args:
            section: Configuration section
            key: Configuration key
            value: Configuration value
        """
        if section not in self.config:
            self.config[section] = {}

        self.config[section][key] = value

    def get_general_settings(self) -> Dict[str, Any]:
        return self.config['general']

    def model_config(self) -> ModelConfig:
        """
        Build the model configuration.

        Raises:
            ConfigurationError: on missing or invalid values
        """
        try:
            return ModelConfig.from_dict(self.config['model'])
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"invalid model section: {e}") from e

    def pool_config(self):
        """Build the memory pool options, reading the placement plan file when one is named."""
        from ..runtime.mempool import PlacementPlan, PoolConfig

        section = copy.deepcopy(self.config['pool'])
        plan_file = section.pop('plan_file', None)
        plan = None
        if plan_file:
            data = self._read(plan_file)
            if data is None:
                raise ConfigurationError(f"cannot read placement plan {plan_file}")
            try:
                plan = PlacementPlan.from_dict(data)
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigurationError(f"invalid placement plan {plan_file}: {e}") from e
        try:
            return PoolConfig(plan=plan, **section)
        except TypeError as e:
            raise ConfigurationError(f"invalid pool section: {e}") from e

    def runtime_config(self):
        """
        Build a validated RuntimeConfig from the model, runtime and pool sections.

        Raises:
            ConfigurationError: on invalid values
        """
        from ..runtime.engine import RuntimeConfig

        try:
            config = RuntimeConfig(model=self.model_config(), pool=self.pool_config(), **self.config['runtime'])
        except TypeError as e:
            raise ConfigurationError(f"invalid runtime section: {e}") from e
        config.validate()
        return config

    def sweep_config(self):
        """
        Build the benchmark sweep settings.

        Raises:
            ConfigurationError: on invalid values
        """
        from ..bench.bench_cli import SweepConfig

        section = dict(self.config['bench'])
        runtime = self.config['runtime']
        try:
            return SweepConfig(
                model=self.model_config(),
                pool_config=self.pool_config(),
                seed=int(self.config['general'].get('seed', 0)),
                transport=runtime.get('transport', 'inprocess'),
                recv_timeout=float(runtime.get('recv_timeout', 30.0)),
                **section)
        except TypeError as e:
            raise ConfigurationError(f"invalid bench section: {e}") from e
