#!/usr/bin/env python3
"""
Configuration management for partint
Loads and merges TOML configuration with proper precedence
"""

import sys
from pathlib import Path
from typing import Dict, Any, Optional, Union
from dataclasses import dataclass, field, fields, asdict

# Try to import TOML parser (Python 3.11+ has tomllib built-in)
try:
    import tomllib
except ImportError:
    try:
        import tomli as tomllib
    except ImportError:
        print("Error: No TOML library found.", file=sys.stderr)
        print("", file=sys.stderr)
        print("Please install dependencies:", file=sys.stderr)
        print("  pip3 install -r requirements.txt", file=sys.stderr)
        sys.exit(1)

from utils import get_env_int, get_env_str, get_logger

logger = get_logger("config")

PROJECT_CONFIG_NAME = ".partint.toml"
DEFAULTS_PATH = Path(__file__).parent / "config.defaults.toml"

# Documented flat keys, accepted at the top level of any config file
FLAT_KEYS: Dict[str, tuple] = {
    'lambda1': ('train', 'lambda1'),
    'lambda2': ('train', 'lambda2'),
    'lambda3': ('train', 'lambda3'),
    'alpha': ('train', 'alpha'),
    'nq': ('model', 'nq'),
    'dc': ('model', 'dc'),
    'heads': ('model', 'heads'),
    'stage1_epochs': ('train', 'stage1_epochs'),
    'stage2_epochs': ('train', 'stage2_epochs'),
    'nis_threshold': ('eval', 'nis_threshold'),
    'part_supervision': ('train', 'part_supervision'),
    'border_drop': ('masks', 'border_drop'),
}


class ConfigError(ValueError):
    """Raised when a configuration file or override is invalid"""
    pass


@dataclass
class ProjectConfig:
    """Project configuration section"""
    name: str = "auto-detect"
    description: str = ""


@dataclass
class PathsConfig:
    """Where datasets and runs live (relative to the project root)"""
    data_dir: str = "data"
    run_dir: str = "runs"


@dataclass
class ModelConfig:
    """Network shape; desk-scale defaults, full-size values configurable"""
    dc: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.0
    nq: int = 8
    num_objects: int = 3
    num_verbs: int = 4
    image_size: int = 256
    stride: int = 32
    stem_channels: int = 32
    encoder_layers: int = 1
    box_decoder_layers: int = 2
    int_decoder_layers: int = 3
    importance_layers: int = 1
    verb_decoder_layers: int = 2
    init_seed: int = 0


@dataclass
class MaskConfig:
    """Attention-mask schedule and the ablation toggles"""
    progressive: bool = True
    bodypart: bool = True
    merge: bool = True
    border_drop: bool = False
    empty_fallback: bool = True
    top_fraction: float = 0.25


@dataclass
class TrainConfig:
    """Loss weights, sampling and optimization schedule"""
    lambda1: float = 1.0
    lambda2: float = 2.5
    lambda3: float = 1.0
    alpha: float = 3.0
    sampler: bool = True
    stage1_epochs: int = 30
    stage2_epochs: int = 10
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 2.0 / 3.0
    grad_clip: float = 0.1
    no_object_weight: float = 0.1
    focal_int: bool = False
    focal_verb: bool = False
    focal_gamma: float = 2.0
    part_supervision: bool = False
    seed: int = 0


@dataclass
class EvalConfig:
    """Inference thresholds"""
    nis_threshold: float = 0.1
    nms_threshold: float = 0.6
    match_iou: float = 0.5
    max_detections: int = 100


@dataclass
class SynthConfig:
    """Synthetic dataset sizes and difficulty profile"""
    num_train: int = 500
    num_test: int = 100
    root_seed: int = 2024
    min_persons: int = 1
    max_persons: int = 4
    min_person_height: float = 80.0
    max_person_height: float = 200.0
    max_objects: int = 5
    crowded_rate: float = 0.4
    occlusion_rate: float = 0.3
    overlap_threshold: float = 0.3


@dataclass
class MonitoringConfig:
    """Logging verbosity"""
    detailed_logging: bool = False
    log_every: int = 20


SECTION_TYPES = {
    'project': ProjectConfig,
    'paths': PathsConfig,
    'model': ModelConfig,
    'masks': MaskConfig,
    'train': TrainConfig,
    'eval': EvalConfig,
    'synth': SynthConfig,
    'monitoring': MonitoringConfig,
}


@dataclass
class Config:
    """
    Complete configuration for partint

    Loads configuration with precedence:
    1. Explicit overrides (highest priority, e.g. CLI flags)
    2. Explicit config file (--config FILE or PARTINT_CONFIG)
    3. Project config (.partint.toml in project root)
    4. Default config (config.defaults.toml next to this file)
    5. Hardcoded fallbacks (lowest priority)
    """

    project: ProjectConfig = field(default_factory=ProjectConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    monitoring: MonitoringConfig = field(default_factory=MonitoringConfig)

    # Computed paths
    project_root: Optional[Path] = None

    @staticmethod
    def find_project_root(start_path: Optional[Path] = None) -> Path:
        """
        Find project root by walking up to find .git directory

        Falls back to the current directory when not in a git repo
        """
        current = start_path or Path.cwd()

        while current != current.parent:
            if (current / ".git").exists():
                return current
            current = current.parent

        return Path.cwd()

    @classmethod
    def load(cls, config_path: Optional[Union[str, Path]] = None,
             overrides: Optional[Dict[str, Any]] = None,
             use_project_file: bool = True) -> 'Config':
        """
        Load configuration with proper precedence

        Args:
            config_path: Explicit TOML file (falls back to PARTINT_CONFIG)
            overrides: Dictionary of explicit overrides from code/CLI
            use_project_file: Read .partint.toml from the project root

        Returns:
            Merged, validated configuration
        """
        overrides = overrides or {}

        # Step 1: Find project root
        project_root = cls.find_project_root()

        # Step 2: Defaults shipped next to this module
        merged = cls._read_toml(DEFAULTS_PATH) if DEFAULTS_PATH.exists() else {}

        # Step 3: Project config
        if use_project_file:
            project_config_path = project_root / PROJECT_CONFIG_NAME
            if project_config_path.exists():
                merged = cls._deep_merge(merged, cls._read_toml(project_config_path))

        # Step 4: Explicit file
        config_path = config_path or get_env_str("PARTINT_CONFIG")
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"Config file '{path}' does not exist")
            merged = cls._deep_merge(merged, cls._read_toml(path))

        # Step 5: Overrides (flat keys allowed here too)
        merged = cls._deep_merge(merged, cls._expand_flat_keys(overrides))

        config = cls.from_dict(merged)
        config.project_root = project_root

        env_seed = get_env_int("PARTINT_SEED")
        if env_seed is not None:
            config.train.seed = env_seed

        # Auto-detect project name if needed
        if config.project.name == "auto-detect":
            config.project.name = project_root.name

        config.validate()
        logger.debug(f"[CONFIG] Loaded {config}")
        return config

    @classmethod
    def _read_toml(cls, path: Path) -> Dict[str, Any]:
        try:
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Cannot parse config file '{path}': {e}") from e
        return cls._expand_flat_keys(data)

    @staticmethod
    def _expand_flat_keys(data: Dict[str, Any]) -> Dict[str, Any]:
        """Move documented flat keys (lambda1, nq, ...) into their sections"""
        result: Dict[str, Any] = {}
        for key, value in data.items():
            if key in FLAT_KEYS:
                section, name = FLAT_KEYS[key]
                result.setdefault(section, {})[name] = value
            elif isinstance(value, dict):
                result[key] = {**value, **result.get(key, {})}
            else:
                result[key] = value
        return result

    @staticmethod
    def _deep_merge(base: Dict, override: Dict) -> Dict:
        """Deep merge two dictionaries"""
        result = base.copy()
        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = Config._deep_merge(result[key], value)
            else:
                result[key] = value
        return result

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Config':
        """Build a Config from (possibly partial) nested dictionaries"""
        config = cls()
        data = cls._expand_flat_keys(data)
        for section, values in data.items():
            if section not in SECTION_TYPES:
                raise ConfigError(f"Unknown config section or key '{section}'")
            if not isinstance(values, dict):
                raise ConfigError(f"Config section '{section}' must be a table")
            section_type = SECTION_TYPES[section]
            known = {f.name for f in fields(section_type)}
            unknown = sorted(set(values) - known)
            if unknown:
                raise ConfigError(f"Unknown key(s) in [{section}]: {', '.join(unknown)}")
            current = asdict(getattr(config, section))
            current.update(values)
            setattr(config, section, section_type(**current))
        return config

    def to_dict(self) -> Dict[str, Any]:
        """Nested dictionary of all sections (checkpoint header form)"""
        return {name: asdict(getattr(self, name)) for name in SECTION_TYPES}

    def validate(self):
        """
        Validate cross-field constraints

        Raises:
            ConfigError: on the first violated constraint
        """
        m, t, e = self.model, self.train, self.eval
        if m.dc <= 0 or m.heads <= 0 or m.dc % m.heads != 0:
            raise ConfigError(f"model.dc={m.dc} must be divisible by model.heads={m.heads}")
        if m.dc % 4 != 0:
            raise ConfigError(f"model.dc={m.dc} must be divisible by 4 for the 2-D positional encoding")
        if m.nq <= 0:
            raise ConfigError(f"model.nq must be positive, got {m.nq}")
        if m.stride <= 0 or m.image_size % m.stride != 0:
            raise ConfigError(f"model.image_size={m.image_size} must be a multiple of model.stride={m.stride}")
        if m.stride & (m.stride - 1):
            raise ConfigError(f"model.stride={m.stride} must be a power of two")
        if t.alpha < 1.0:
            raise ConfigError(f"train.alpha must be >= 1, got {t.alpha}")
        if t.stage1_epochs <= 0 or t.stage2_epochs <= 0 or t.batch_size <= 0:
            raise ConfigError("train.stage1_epochs, train.stage2_epochs and train.batch_size must be positive")
        for name in ('nis_threshold', 'nms_threshold', 'match_iou'):
            value = getattr(e, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"eval.{name} must be in [0, 1], got {value}")
        if not 0.0 < self.masks.top_fraction <= 1.0:
            raise ConfigError(f"masks.top_fraction must be in (0, 1], got {self.masks.top_fraction}")
        if not 0.0 <= self.synth.crowded_rate <= 1.0:
            raise ConfigError(f"synth.crowded_rate must be in [0, 1], got {self.synth.crowded_rate}")

    def get_absolute_path(self, path: Union[str, Path]) -> Path:
        """Convert relative path to absolute (relative to project root)"""
        p = Path(path)
        if p.is_absolute():
            return p
        if self.project_root:
            return (self.project_root / p).resolve()
        return p.resolve()

    def __repr__(self) -> str:
        return (
            f"Config(project={self.project.name}, "
            f"dc={self.model.dc}, nq={self.model.nq}, "
            f"lambdas=({self.train.lambda1}, {self.train.lambda2}, {self.train.lambda3}), "
            f"alpha={self.train.alpha}, project_root={self.project_root})"
        )


if __name__ == '__main__':
    config = Config.load()
    print(f"Project Root: {config.project_root}")
    print(f"Project Name: {config.project.name}")
    print(f"Model:        {config.model}")
    print(f"Masks:        {config.masks}")
    print(f"Train:        {config.train}")
    print(f"Eval:         {config.eval}")
    print(f"\nFull Config: {config}")
