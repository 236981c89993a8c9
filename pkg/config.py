"""
Configuration management for stochastic neuron training runs.
Handles loading, validation, and defaults for experiment configuration.
"""

import json
import logging
from copy import deepcopy
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from estimators import EstimatorConfig
from network import NetworkConfig, TrialBudget
from neuron_models import NeuronModel, TspParams
from psn_exceptions import ConfigurationError, DomainError

SCHEMA_PATH = Path(__file__).resolve().parent / 'config_schema.json'


def load_schema(schema_path: Path = SCHEMA_PATH) -> Dict[str, Any]:
    """Load the grouped configuration schema."""
    with open(schema_path, 'r') as f:
        return json.load(f)


def defaults_from_schema(schema: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Grouped configuration dictionary holding every schema default."""
    return {
        group_name: {name: deepcopy(setting['default']) for name, setting in group['settings'].items()}
        for group_name, group in schema['schema'].items()
    }


def _split_key(key: str) -> Tuple[str, str]:
    group, _, setting = key.partition('.')
    if not setting:
        raise ConfigurationError(f"Configuration keys are 'group.setting', got {key!r}")
    return group, setting


class TrainingConfig:
    """Grouped experiment configuration with schema validation and defaults."""

    SCHEMA = load_schema()
    DEFAULT_CONFIG = defaults_from_schema(SCHEMA)

    def __init__(self):
        self.config = deepcopy(self.DEFAULT_CONFIG)
        self.config_path: Optional[Path] = None
        self.logger = logging.getLogger(__name__)

    @classmethod
    def from_file(cls, config_file_path: Union[str, Path]) -> 'TrainingConfig':
        """Factory method to create TrainingConfig from a JSON file."""
        instance = cls()
        instance.config_path = Path(config_file_path)
        instance.load_config()
        return instance

    def load_config(self) -> None:
        """
        Merge the user's grouped JSON over defaults.

        Invalid values are logged and replaced by the default; unknown keys are ignored.

        Raises:
            ConfigurationError: If the file is missing or not valid JSON
        """
        try:
            with open(self.config_path, 'r') as f:
                user_config = json.load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"Config file not found: {self.config_path}")
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Invalid JSON in config file {self.config_path}: {e}")

        if not isinstance(user_config, dict):
            raise ConfigurationError(f"{self.config_path}: top level must be an object of groups")

        for group_name, group_values in user_config.items():
            if group_name == 'version':
                continue
            if group_name not in self.config or not isinstance(group_values, dict):
                self.logger.warning(f"Ignoring unknown config group: {group_name}")
                continue
            for setting, value in group_values.items():
                if setting not in self.config[group_name]:
                    self.logger.warning(f"Ignoring unknown setting: {group_name}.{setting}")
                elif self.validate_setting(group_name, setting, value):
                    self.config[group_name][setting] = value
                else:
                    self.logger.warning(
                        f"Invalid value for {group_name}.{setting}: {value}. "
                        f"Using default: {self.DEFAULT_CONFIG[group_name][setting]}"
                    )
        self.logger.debug(f"Configuration loaded from {self.config_path}")

    def validate_setting(self, group: str, setting: str, value: Any) -> bool:
        """
        Validate a setting value against schema constraints.

        Returns:
            True if valid, False otherwise
        """
        try:
            setting_schema = self.SCHEMA['schema'][group]['settings'][setting]
        except KeyError:
            self.logger.error(f"Unknown setting: {group}.{setting}")
            return False

        setting_type = setting_schema['type']

        if setting_type == 'integer':
            if isinstance(value, bool) or not isinstance(value, int):
                return False
        elif setting_type == 'float':
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return False
        elif setting_type == 'boolean':
            return isinstance(value, bool)
        elif setting_type == 'string':
            return isinstance(value, str)
        elif setting_type == 'enum':
            return value in setting_schema['options']
        elif setting_type == 'array':
            return isinstance(value, list) and all(
                isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value
            )

        if 'min' in setting_schema and value < setting_schema['min']:
            return False
        if 'max' in setting_schema and value > setting_schema['max']:
            return False
        return True

    def get(self, key: str, default: Any = None) -> Any:
        """Get a value by 'group.setting' key."""
        group, setting = _split_key(key)
        return self.config.get(group, {}).get(setting, default)

    def set(self, key: str, value: Any) -> bool:
        """
        Set a value by 'group.setting' key with validation.

        Returns:
            True if value was set, False if validation failed
        """
        group, setting = _split_key(key)
        if not self.validate_setting(group, setting, value):
            self.logger.error(f"Validation failed for {key} = {value}")
            return False
        self.config[group][setting] = value
        self.logger.debug(f"Config updated: {key} = {value}")
        return True

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """
        Apply command-line overrides; None values are skipped.

        Raises:
            ConfigurationError: If any override is invalid
        """
        for key, value in overrides.items():
            if value is None:
                continue
            if not self.set(key, value):
                raise ConfigurationError(f"Invalid override {key}={value!r}")

    def get_all(self) -> Dict[str, Dict[str, Any]]:
        """Get a copy of all configuration values."""
        return deepcopy(self.config)

    def to_dict(self) -> Dict[str, Any]:
        return {'version': self.SCHEMA['version'], **self.get_all()}

    def tsp_params(self) -> TspParams:
        try:
            return TspParams(**self.config['tsp'])
        except DomainError as e:
            raise ConfigurationError(str(e))

    def network_config(self, seed: Optional[int] = None) -> NetworkConfig:
        """Build the NetworkConfig described by the network, training and estimator groups."""
        net = self.config['network']
        training = self.config['training']
        estimator = self.config['estimator']
        model = NeuronModel.parse(net['neuron_model'],
                                  self.tsp_params() if net['neuron_model'] == 'TSP' else None)
        return NetworkConfig(
            layer_dims=list(net['layer_dims']),
            neuron_model=model,
            hidden_trials=TrialBudget.parse(net['hidden_trials'] or None),
            output_trials=TrialBudget.parse(net['output_trials'] or None),
            estimator=EstimatorConfig.parse(estimator['hidden_rule'], estimator['output_rule'],
                                            estimator['output_head'], estimator['smoothing_epsilon']),
            seed=training['seed'] if seed is None else seed,
            learning_rate=float(training['learning_rate']),
            batch_size=training['batch_size'],
            epochs=training['epochs'],
        )

    def validate(self) -> None:
        """
        Cross-field validation run before any training starts.

        Raises:
            ConfigurationError: On an invalid estimator/model combination or sweep
        """
        self.network_config().validate()
        sweep = self.config['experiment']['trial_sweep']
        if not sweep:
            raise ConfigurationError("experiment.trial_sweep must not be empty")
        if self.config['network']['layer_dims'][-1] < 2:
            raise ConfigurationError("output layer needs at least two classes")
