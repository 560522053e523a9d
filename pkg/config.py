#!/usr/bin/env python3
"""
Configuration Manager for PBLS
Supports YAML and JSON configuration files plus PBLS_* environment overrides
"""

import copy
import os
import json
import logging
import logging.handlers
from typing import Dict, Any, Optional, List

try:
    import yaml
    YAML_AVAILABLE = True
except ImportError:
    YAML_AVAILABLE = False

from rich.logging import RichHandler

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Environment variable -> (config key, converter)
ENV_OVERRIDES = {
    'PBLS_PORT': ('protocol.port', int),
    'PBLS_FAULT_MODE': ('worker.fault_mode', str),
}


class ConfigurationError(Exception):
    """Raised when there's a configuration error"""
    pass


class PblsConfig:
    """Configuration manager for the outsourcing client, worker and benchmarks"""

    DEFAULT_CONFIG = {
        'protocol': {
            'host': '127.0.0.1',
            'port': 7541,
            'max_payload_bytes': 2 ** 32,
            'timeout_s': 60.0
        },
        'worker': {
            'fault_mode': 'honest',
            'fault_target': 'both',
            'max_sessions': 64,
            'seed': 0
        },
        'outsourcing': {
            'lambda': 1e-8,
            'scale_mode': 'pow2',
            'verify_rounds': 2,
            'tolerance': 1e-6,
            'verify_identity': 'ridge',
            'retries': 0
        },
        'bls': {
            'n_feature_groups': 2,
            'nodes_per_feature_group': 5,
            'n_enh_groups': 2,
            'nodes_per_enh_group': 10,
            'enhancement_scale': 0.8,
            'feature_activation': 'linear',
            'enhancement_activation': 'tanh',
            'verify_identity': 'ridge'
        },
        'bench': {
            'sizes': [64, 128, 256, 512, 1024],
            'repetitions': 5,
            'aspect': 2
        },
        'logging': {
            'level': 'INFO',
            'file': None,
            'max_bytes': 10485760,  # 10MB
            'backup_count': 5
        }
    }

    def __init__(self, config_path: Optional[str] = None, use_env: bool = True):
        """
        Initialize configuration manager

        Args:
            config_path: Path to configuration file (YAML or JSON)
            use_env: Apply PBLS_PORT / PBLS_FAULT_MODE overrides
        """
        self.config_path = config_path
        self.config = self._load_config()
        if use_env:
            self._apply_env_overrides()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from file or use defaults"""
        config = copy.deepcopy(self.DEFAULT_CONFIG)

        if not self.config_path:
            default_paths = [
                './pbls.yaml',
                './pbls.yml',
                './pbls.json',
                os.path.expanduser('~/.pbls.yaml'),
                os.path.expanduser('~/.config/pbls.yaml')
            ]

            for path in default_paths:
                if os.path.exists(path):
                    self.config_path = path
                    logger.info(f"Found configuration file: {path}")
                    break

        if self.config_path and os.path.exists(self.config_path):
            try:
                config = self._merge_configs(config, self._read_config_file(self.config_path))
                logger.info(f"Loaded configuration from {self.config_path}")
            except Exception as e:
                logger.error(f"Failed to load configuration: {e}")
                raise ConfigurationError(f"Failed to load configuration: {e}")
        elif self.config_path:
            raise ConfigurationError(f"Configuration file not found: {self.config_path}")
        else:
            logger.debug("Using default configuration (no config file found)")

        return config

    def _read_config_file(self, path: str) -> Dict[str, Any]:
        """Read configuration file (YAML or JSON)"""
        with open(path, 'r') as f:
            if path.endswith(('.yaml', '.yml')):
                if not YAML_AVAILABLE:
                    raise ConfigurationError("PyYAML not installed. Install with: pip install pyyaml")
                return yaml.safe_load(f) or {}
            elif path.endswith('.json'):
                return json.load(f)
            else:
                raise ConfigurationError(f"Unsupported config file format: {path}")

    def _merge_configs(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """Recursively merge two configuration dictionaries"""
        result = base.copy()

        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._merge_configs(result[key], value)
            else:
                result[key] = value

        return result

    def _apply_env_overrides(self) -> None:
        for var, (key, convert) in ENV_OVERRIDES.items():
            raw = os.environ.get(var)
            if raw is None or raw == '':
                continue
            try:
                self.set(key, convert(raw))
            except ValueError:
                raise ConfigurationError(f"Invalid value for {var}: {raw!r}")
            logger.debug(f"{var} overrides {key}")

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value using dot notation

        Examples:
            config.get('protocol.port')
            config.get('outsourcing.lambda')
        """
        keys = key.split('.')
        value = self.config

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def set(self, key: str, value: Any) -> None:
        """
        Set configuration value using dot notation

        Examples:
            config.set('worker.fault_mode', 'perturb:1e-3')
        """
        keys = key.split('.')
        config = self.config

        for k in keys[:-1]:
            if k not in config:
                config[k] = {}
            config = config[k]

        config[keys[-1]] = value

    def save(self, path: Optional[str] = None) -> None:
        """Save configuration to file"""
        save_path = path or self.config_path

        if not save_path:
            raise ConfigurationError("No configuration path specified")

        with open(save_path, 'w') as f:
            if save_path.endswith(('.yaml', '.yml')):
                if not YAML_AVAILABLE:
                    raise ConfigurationError("PyYAML not installed. Install with: pip install pyyaml")
                yaml.safe_dump(self.config, f, default_flow_style=False, sort_keys=False)
            elif save_path.endswith('.json'):
                json.dump(self.config, f, indent=2)
            else:
                raise ConfigurationError(f"Unsupported config file format: {save_path}")

        logger.info(f"Saved configuration to {save_path}")

    def validate(self) -> List[str]:
        """
        Validate configuration and return list of warnings

        Returns:
            List of validation messages (empty if valid)
        """
        warnings = []

        port = self.get('protocol.port')
        if not isinstance(port, int) or port < 1 or port > 65535:
            warnings.append(f"Invalid protocol port: {port}")

        lam = self.get('outsourcing.lambda')
        if not isinstance(lam, (int, float)) or lam <= 0:
            warnings.append(f"outsourcing.lambda must be > 0, got {lam}")

        if self.get('outsourcing.scale_mode') not in ('pow2', 'paper'):
            warnings.append(f"Unknown scale mode: {self.get('outsourcing.scale_mode')}")

        for key in ('outsourcing.verify_identity', 'bls.verify_identity'):
            if self.get(key) not in ('pinv', 'ridge'):
                warnings.append(f"{key} must be 'pinv' or 'ridge', got {self.get(key)}")

        rounds = self.get('outsourcing.verify_rounds')
        if not isinstance(rounds, int) or rounds < 1:
            warnings.append(f"outsourcing.verify_rounds must be >= 1, got {rounds}")

        tol = self.get('outsourcing.tolerance')
        if not isinstance(tol, (int, float)) or tol <= 0:
            warnings.append(f"outsourcing.tolerance must be > 0, got {tol}")

        if self.get('worker.fault_target') not in ('gram', 'invprod', 'both'):
            warnings.append(f"Unknown fault target: {self.get('worker.fault_target')}")

        sessions = self.get('worker.max_sessions')
        if not isinstance(sessions, int) or sessions < 1:
            warnings.append(f"worker.max_sessions must be >= 1, got {sessions}")

        log_file = self.get('logging.file')
        if log_file:
            log_dir = os.path.dirname(log_file)
            if log_dir and not os.path.exists(log_dir):
                warnings.append(f"Log directory does not exist: {log_dir}")

        return warnings

    def create_example_config(self, path: str) -> None:
        """Write the default configuration as an example file"""
        example_config = copy.deepcopy(self.DEFAULT_CONFIG)
        example_config['logging']['file'] = './pbls.log'

        with open(path, 'w') as f:
            if path.endswith(('.yaml', '.yml')):
                if not YAML_AVAILABLE:
                    raise ConfigurationError("PyYAML not installed. Install with: pip install pyyaml")
                f.write('# PBLS configuration\n')
                yaml.safe_dump(example_config, f, default_flow_style=False, sort_keys=False)
            elif path.endswith('.json'):
                json.dump(example_config, f, indent=2)
            else:
                raise ConfigurationError(f"Unsupported config file format: {path}")

        logger.info(f"Created example configuration file: {path}")


def setup_logging(config: PblsConfig, level: Optional[str] = None) -> None:
    """
    Configure the root logger: rich console output plus an optional rotating file

    Args:
        config: Loaded configuration (reads the logging section)
        level: Overrides logging.level when given (e.g. from --verbose)
    """
    level_name = (level or config.get('logging.level', 'INFO')).upper()
    handlers: List[logging.Handler] = [RichHandler(rich_tracebacks=True, show_path=False)]

    log_file = config.get('logging.file')
    if log_file:
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=config.get('logging.max_bytes', 10485760),
            backupCount=config.get('logging.backup_count', 5)
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)

    logging.basicConfig(level=getattr(logging, level_name, logging.INFO),
                        format='%(message)s', handlers=handlers, force=True)
