#!/usr/bin/env python3
"""
invmark Configuration Manager
Loads key=value config files (training, evaluation) with environment overrides
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional

from errors import ConfigError


# Application version recorded in checkpoint manifests and reports
APP_VERSION = "1.0.0"

# Major version of the key=value config format
CONFIG_VERSION = "1"

PROJECT_ROOT = Path(__file__).resolve().parent

logger = logging.getLogger("invmark.config")


class InvMarkConfig:
    """Configuration manager for invmark config files"""

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, str]] = None):
        self.config_file = None
        if config_file:
            candidate = Path(config_file)
            if not candidate.is_absolute() and not candidate.exists():
                candidate = PROJECT_ROOT / candidate
            if not candidate.exists():
                raise ConfigError(f"Config file not found: {config_file}")
            self.config_file = candidate

        self.file_config = self.load_config_file()
        self.overrides = dict(overrides or {})
        self._check_version()
        logger.debug("📋 Loaded configuration keys: %s", sorted(self.file_config.keys()))

    def load_config_file(self) -> Dict[str, str]:
        """Load configuration from the key=value file (read-only)"""
        config: Dict[str, str] = {}
        if self.config_file is None:
            return config
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                for line_num, line in enumerate(f, 1):
                    line = line.strip()
                    if not line or line.startswith('#'):
                        continue
                    if '=' not in line:
                        raise ConfigError(f"{self.config_file}:{line_num}: expected KEY=value, got {line!r}")
                    key, value = line.split('=', 1)
                    config[key.strip()] = value.strip().strip('"').strip("'")
        except OSError as e:
            raise ConfigError(f"Error loading config file {self.config_file}: {e}") from e
        return config

    def _check_version(self):
        version = self.get('CONFIG_VERSION', CONFIG_VERSION)
        if version.split('.')[0] != CONFIG_VERSION:
            raise ConfigError(
                f"Unsupported CONFIG_VERSION {version!r} (this build reads version {CONFIG_VERSION})"
            )

    def get(self, key: str, default: str = "") -> str:
        """Get configuration value (overrides, then environment, then file)"""
        if key in self.overrides:
            return str(self.overrides[key])
        if key in os.environ:
            return os.environ[key]
        return self.file_config.get(key, default)

    def has(self, key: str) -> bool:
        return key in self.overrides or key in os.environ or key in self.file_config

    def require(self, key: str) -> str:
        value = self.get(key)
        if not value:
            raise ConfigError(f"Missing required configuration key '{key}'")
        return value

    def get_int(self, key: str, default: int) -> int:
        raw = self.get(key, "")
        if raw == "":
            return default
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"Configuration key '{key}' must be an integer, got {raw!r}") from e

    def get_float(self, key: str, default: float) -> float:
        raw = self.get(key, "")
        if raw == "":
            return default
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"Configuration key '{key}' must be a number, got {raw!r}") from e

    def get_bool(self, key: str, default: bool = False) -> bool:
        raw = self.get(key, "")
        if raw == "":
            return default
        return raw.strip().lower() in ('1', 'true', 'yes', 'on')

    def get_list(self, key: str, default: Optional[List[str]] = None) -> List[str]:
        raw = self.get(key, "")
        if raw == "":
            return list(default or [])
        return [item.strip() for item in raw.split(',') if item.strip()]

    def get_path(self, key: str, default: str = "") -> Optional[Path]:
        """Resolve a path value relative to the config file's directory"""
        raw = self.get(key, default)
        if not raw:
            return None
        path = Path(raw).expanduser()
        if not path.is_absolute() and self.config_file is not None:
            path = self.config_file.parent / path
        return path

    def get_all_config(self) -> Dict[str, str]:
        """Get the effective configuration for keys known to the file or overrides"""
        all_config = self.file_config.copy()
        for key in list(all_config.keys()):
            if key in os.environ:
                all_config[key] = os.environ[key]
        all_config.update({k: str(v) for k, v in self.overrides.items()})
        return all_config

    def fingerprint(self) -> str:
        """Stable hash of the effective configuration"""
        payload = json.dumps(self.get_all_config(), sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]


def checkpoint_cache_dir() -> Path:
    """Directory searched for checkpoints given by bare name"""
    configured = os.environ.get('INVMARK_CHECKPOINT_DIR', '').strip()
    if configured:
        return Path(configured).expanduser()
    return PROJECT_ROOT / "checkpoints"
