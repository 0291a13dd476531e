import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from .app_scope import ResourceManager
from .errors import ConfigError
from .experiment import ExperimentConfig

CONFIG_DIR = 'configs'

log = logging.getLogger('ConfigManager')


class ConfigManager:
    """Experiment presets stored as JSON under resources/configs."""

    def __init__(self):
        self.rm = ResourceManager(CONFIG_DIR)

    def get_configs(self) -> List[str]:
        return [f.replace('.json', '') for f in self.rm.list('.json')]

    def get_config(self, name: str) -> dict:
        if name not in self.get_configs():
            raise ValueError(f"Config '{name}' does not exist. Available configs: {self.get_configs()}")
        return json.loads(self.rm.get(f'{name}.json'))

    def create_config(self, name: str, data: dict) -> bool:
        if name in self.get_configs():
            return False
        if not self.validate_config_data(data):
            return False
        self.rm.create(f'{name}.json', json.dumps(data, indent=2))
        return True

    def update_config(self, name: str, data: dict) -> bool:
        if name not in self.get_configs():
            return False
        if not self.validate_config_data(data):
            return False
        self.rm.update(f'{name}.json', json.dumps(data, indent=2))
        return True

    def delete_config(self, name: str) -> bool:
        if name not in self.get_configs():
            return False
        self.rm.delete(f'{name}.json')
        return True

    def validate_config_data(self, data: dict) -> bool:
        return not self.config_problems(data)

    @staticmethod
    def config_problems(data: dict) -> List[str]:
        if not isinstance(data, dict):
            return ['config must be a JSON object']
        try:
            return ExperimentConfig.from_dict(data).problems()
        except ConfigError as e:
            return e.problems
        except (TypeError, ValueError) as e:
            return [str(e)]


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_experiment_config(source: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    source is a JSON file path or the name of a shipped preset; overrides (nested,
    as from runtime_args.experiment_overrides) win over file values.
    Every validation problem is raised at once as a ConfigError.
    """
    base: Dict[str, Any] = {}
    if source:
        path = Path(source)
        if path.is_file():
            base = json.loads(path.read_text())
        else:
            try:
                base = ConfigManager().get_config(source)
            except ValueError as e:
                raise ConfigError([str(e)])
        log.debug(f'loaded experiment config from {source}')
    config = ExperimentConfig.from_dict(deep_merge(base, overrides or {}))
    config.validate()
    return config
