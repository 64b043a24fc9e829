"""Configuration loading utilities."""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from src.engine.sde import GridSpec
from src.models.impact import ImpactParams
from src.models.margrabe import MarketState, ModelParams
from src.surrogate.network import NetConfig
from src.utils.errors import InvalidParamsError

CONFIG_DIR = Path('config')

DEFAULTS: Dict[str, Any] = {
    's1': 60.0,
    's2': 80.0,
    'tau': 0.5,
    'sigma1': 0.4,
    'sigma2': 0.2,
    'rho': 0.5,
    'r': 0.05,
    'epsilon': 0.04,
    'beta': 100.0,
    'floor': 1e-8,
    'cap': 1e8,
    'delta0': 1e-6,
    'coupling': 'literal',
    'n_paths': 10000,
    'n_steps': 100,
    'levy_substeps': 32,
    'block_size': 2048,
    'workers': 1,
    'format': 'csv',
}

REQUIRED_KEYS = ['seed']

# Settings that change how a run executes but never what it computes.
EXECUTION_KEYS = ('workers',)

_MODEL_KEYS = ('sigma1', 'sigma2', 'rho', 'r')
_IMPACT_KEYS = ('epsilon', 'beta', 'floor', 'cap', 'delta0')
_NET_KEYS = (
    'layers', 'batch_size', 'learning_rate', 'beta1', 'beta2', 'adam_eps',
    'max_epochs', 'patience', 'rel_tol', 'early_stopping', 'validation_ratio',
    'lr_decay',
)


@dataclass
class RunConfig:
    """One CLI invocation: the subcommand plus its merged, validated settings."""

    command: str
    settings: Dict[str, Any] = field(default_factory=dict)
    output: Optional[str] = None
    fmt: str = 'csv'

    @property
    def seed(self) -> int:
        return int(self.settings['seed'])

    def market(self) -> MarketState:
        return market_from_config(self.settings)

    def model(self) -> ModelParams:
        return model_from_config(self.settings)

    def impact(self) -> ImpactParams:
        return impact_from_config(self.settings)

    def grid(self) -> GridSpec:
        return grid_from_config(self.settings)

    def net(self) -> NetConfig:
        return net_from_config(self.settings)


def load_config(name: str) -> Dict[str, Any]:
    """Load a run configuration by name (config/<name>_config.json) or by path."""
    candidate = Path(name)
    config_file = candidate if candidate.suffix == '.json' else CONFIG_DIR / f'{name}_config.json'

    if not config_file.exists():
        raise FileNotFoundError(f"Config file not found: {config_file}")

    with open(config_file) as f:
        config = json.load(f)
    if not isinstance(config, dict):
        raise InvalidParamsError("config file must hold a JSON object", {"path": str(config_file)})
    return config


def merge_overrides(config: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Defaults, then the file, then command-line flags (flags win; None means unset)."""
    merged = dict(DEFAULTS)
    merged.update(config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON of the settings, execution-only keys left out."""
    relevant = {k: v for k, v in config.items() if k not in EXECUTION_KEYS}
    canonical = json.dumps(relevant, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def market_from_config(config: Dict[str, Any]) -> MarketState:
    return MarketState(float(config['s1']), float(config['s2']))


def model_from_config(config: Dict[str, Any]) -> ModelParams:
    return ModelParams(**{k: float(config[k]) for k in _MODEL_KEYS if k in config})


def impact_from_config(config: Dict[str, Any]) -> ImpactParams:
    kwargs = {k: float(config[k]) for k in _IMPACT_KEYS if k in config}
    if 'coupling' in config:
        kwargs['coupling'] = str(config['coupling'])
    return ImpactParams(**kwargs)


def grid_from_config(config: Dict[str, Any]) -> GridSpec:
    return GridSpec(
        n_paths=int(config['n_paths']),
        n_steps=int(config['n_steps']),
        levy_substeps=int(config['levy_substeps']),
        seed=int(config['seed']),
        t0=0.0,
        T=float(config['tau']),
        block_size=int(config['block_size']),
    )


def net_from_config(config: Dict[str, Any]) -> NetConfig:
    kwargs = {k: config[k] for k in _NET_KEYS if k in config}
    return NetConfig(seed=int(config['seed']), **kwargs)


def validate_config(config: Dict[str, Any]) -> None:
    """Validate configuration values before any computation starts."""
    for key in REQUIRED_KEYS:
        if key not in config:
            raise InvalidParamsError(f"Missing required key: {key}", {"key": key})

    try:
        if not 0 <= int(config['seed']) < 2 ** 64:
            raise InvalidParamsError("seed must be a 64-bit unsigned integer", {"seed": config['seed']})
        if int(config.get('workers', 1)) < 1:
            raise InvalidParamsError("workers must be at least 1", {"workers": config.get('workers')})
        if not float(config['tau']) > 0.0:
            raise InvalidParamsError("tau must be positive", {"tau": config['tau']})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidParamsError):
            raise
        raise InvalidParamsError(f"malformed config value: {exc}") from exc

    if config.get('format', 'csv') not in ('csv', 'json'):
        raise InvalidParamsError("format must be csv or json", {"format": config.get('format')})

    market_from_config(config)
    model_from_config(config)
    impact_from_config(config)
    grid_from_config(config)
    if any(k in config for k in _NET_KEYS):
        net_from_config(config)
