import copy
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Tuple

import yaml

from core.data_feed import NoiseSpec
from core.errors import ConfigurationError
from core.feature_mining import FMConfig
from core.models import STAGE_IDS, ModelSpec
from core.rng import STREAM_NAMES, SeedBundle
from core.schedule import Schedule
from training.run_training import OptimizerConfig

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "FM_DATA_ROOT"


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    version: int = 10
    noise_kind: str = "none"
    noise_epsilon: float = 0.0
    subset_per_class: int = 0
    mixup_alpha: float = 0.0
    augment: bool = True
    prefetch: int = 2
    eval_batch_size: int = 500
    test_limit: int = 0

    def noise_spec(self):
        if self.noise_kind == "none":
            return None
        return NoiseSpec(self.noise_kind, self.noise_epsilon)

    def validate(self):
        if self.version not in (10, 100):
            raise ConfigurationError(f"data.version must be 10 or 100, got {self.version}")
        if self.noise_kind not in ("none", "symmetric", "pair"):
            raise ConfigurationError(f"data.noise_kind must be none, symmetric or pair, got {self.noise_kind!r}")
        if self.noise_spec() is not None:
            self.noise_spec().validate()
        if self.subset_per_class < 0 or self.test_limit < 0:
            raise ConfigurationError("data.subset_per_class and data.test_limit must be >= 0")
        if self.mixup_alpha < 0:
            raise ConfigurationError("data.mixup_alpha must be >= 0 (0 disables mixup)")
        if self.eval_batch_size < 1:
            raise ConfigurationError("data.eval_batch_size must be positive")
        return self


@dataclass(frozen=True)
class SeedConfig:
    base: int = 0
    runs: Tuple[int, ...] = (0,)
    streams: Dict[str, int] = field(default_factory=dict)

    def validate(self):
        if not self.runs:
            raise ConfigurationError("seeds.runs needs at least one seed")
        if len(set(self.runs)) != len(self.runs):
            raise ConfigurationError(f"seeds.runs has duplicates: {list(self.runs)}")
        unknown = sorted(set(self.streams) - set(STREAM_NAMES))
        if unknown:
            raise ConfigurationError(f"seeds.streams: unknown stream names {unknown}")
        return self

    def bundle(self, run_seed=None) -> SeedBundle:
        """Seeds for one run: `run_seed` (default `base`) for every stream without its own entry."""
        seed = self.base if run_seed is None else run_seed
        return SeedBundle({"base": seed, **self.streams})


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = ""
    heads: bool = False


@dataclass(frozen=True)
class AblateConfig:
    variants: Tuple[dict, ...] = (
        {"name": "fm_box", "fm": {"sites": 1}},
        {"name": "fm_point", "fm": {"sites": 1, "mask_variant": "point"}},
        {"name": "fm_channel", "fm": {"sites": 1, "mask_variant": "channel"}},
        {"name": "fm_noncomplementary", "fm": {"sites": 1, "pairing": "non_complementary"}},
        {"name": "fm_2_sites", "fm": {"sites": 2}},
        {"name": "fm_3_sites", "fm": {"sites": 3}},
    )
    include_baseline: bool = True


@dataclass(frozen=True)
class CorruptConfig:
    output: str = "corrupted"


@dataclass(frozen=True)
class SubsetConfig:
    per_class: int = 100
    output: str = "subset"


@dataclass(frozen=True)
class ProbeConfig:
    checkpoints: Tuple[str, ...] = ()
    layer_ids: Tuple[str, ...] = STAGE_IDS
    threshold: float = 0.5
    sample_count: int = 64
    cam_samples: int = 4
    fixed_mask_region: str = ""


@dataclass(frozen=True)
class OverheadConfig:
    batch_size: int = 128
    iters: int = 20
    warmup: int = 10


@dataclass(frozen=True)
class LoggingConfig:
    level: str = "INFO"
    progress: bool = False


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs; serializing and re-parsing yields an equal config."""

    model: ModelSpec = ModelSpec()
    fm: FMConfig = FMConfig()
    data: DataConfig = DataConfig()
    schedule: Schedule = Schedule()
    optimizer: OptimizerConfig = OptimizerConfig()
    seeds: SeedConfig = SeedConfig()
    output_dir: str = "runs/default"
    eval: EvalConfig = EvalConfig()
    ablate: AblateConfig = AblateConfig()
    corrupt: CorruptConfig = CorruptConfig()
    subset: SubsetConfig = SubsetConfig()
    probe: ProbeConfig = ProbeConfig()
    overhead: OverheadConfig = OverheadConfig()
    logging: LoggingConfig = LoggingConfig()

    def validate(self):
        self.model.validate()
        self.fm.validate(STAGE_IDS)
        self.data.validate()
        self.schedule.validate()
        self.seeds.validate()
        if self.model.num_classes != self.data.version:
            raise ConfigurationError(
                f"model.num_classes ({self.model.num_classes}) must match CIFAR-{self.data.version}")
        unknown = [l for l in self.probe.layer_ids if l not in STAGE_IDS]
        if unknown:
            raise ConfigurationError(f"probe.layer_ids has unknown stages {unknown}")
        if self.logging.level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigurationError(f"logging.level {self.logging.level!r} is not a log level")
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


SECTION_TYPES = {
    "model": ModelSpec, "fm": FMConfig, "data": DataConfig, "schedule": Schedule,
    "optimizer": OptimizerConfig, "seeds": SeedConfig, "eval": EvalConfig, "ablate": AblateConfig,
    "corrupt": CorruptConfig, "subset": SubsetConfig, "probe": ProbeConfig, "overhead": OverheadConfig,
    "logging": LoggingConfig,
}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(section, key, default, value):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        items = [(_coerce(section, key, default[0], v) if default and not isinstance(default[0], dict) else v)
                 for v in value]
        return tuple(items)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def _normalize_sites(raw):
    """`fm.sites` may be a stage list or a count n meaning the last n stages."""
    sites = raw.get("sites")
    if isinstance(sites, int) and not isinstance(sites, bool):
        if not 0 <= sites <= len(STAGE_IDS):
            raise ConfigurationError(f"fm.sites: a count must be in [0, {len(STAGE_IDS)}], got {sites}")
        raw = {**raw, "sites": list(STAGE_IDS[len(STAGE_IDS) - sites:])}
    return raw


def _build_section(name, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{name}: expected a mapping, got {raw!r}")
    if name == "fm":
        raw = _normalize_sites(raw)
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"{name}: unknown keys {unknown}")
    values = {k: _coerce(name, k, getattr(defaults, k), v) for k, v in raw.items()}
    return cls(**values)


def parse_config(raw: dict) -> RunConfig:
    """Validate a plain mapping into a RunConfig."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = sorted(set(raw) - set(SECTION_TYPES) - {"output_dir"})
    if unknown:
        raise ConfigurationError(f"unknown config sections {unknown}")
    sections = {name: _build_section(name, cls, raw.get(name)) for name, cls in SECTION_TYPES.items()}
    output_dir = raw.get("output_dir", RunConfig.output_dir)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigurationError(f"output_dir: expected a path, got {output_dir!r}")
    return RunConfig(output_dir=output_dir, **sections).validate()


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text):
    """'section.key=value' with a YAML-typed value."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigurationError(f"override {text!r} must look like section.key=value")
    path, value = text.split("=", 1)
    section, key = path.split(".", 1)
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"override {text!r}: {e}") from e
    return {section: {key: parsed}}


class ConfigLoader:
    """
    Loads the YAML run configuration.
    Missing sections fall back to the desk-scale defaults; FM_DATA_ROOT and
    command-line overrides are applied on top before validation.
    """

    def __init__(self, config_path="config/settings.yaml", overrides=(), env=None, epochs=None):
        self.config_path = config_path
        self.env = os.environ if env is None else env
        self.config = self._load_config()
        milestones_set = False
        for text in overrides or ():
            override = parse_override(text) if isinstance(text, str) else text
            milestones_set |= "milestones" in (override.get("schedule") or {})
            self.config = deep_merge(self.config, override)
        if epochs is not None:
            self.config = deep_merge(self.config, self._epochs_override(epochs, milestones_set))
        root = self.env.get(DATA_ROOT_ENV)
        if root:
            self.config = deep_merge(self.config, {"data": {"root": root}})
        self.run_config = parse_config(self.config)

    def _load_config(self):
        """Read YAML config and return the raw mapping."""
        if self.config_path is None:
            return {}
        if not os.path.exists(self.config_path):
            raise ConfigurationError(f"[ConfigLoader] config not found at {self.config_path}")
        with open(self.config_path, "r", encoding="utf8") as file:
            try:
                data = yaml.safe_load(file) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"[ConfigLoader] YAML error in {self.config_path}: {e}") from e
        for section in ("model", "fm", "data", "schedule", "seeds"):
            if section not in data:
                logger.warning("[ConfigLoader] section %r missing in %s, using defaults", section, self.config_path)
        return data

    def _epochs_override(self, epochs, milestones_set):
        """A new epoch count; unless milestones were given too, they scale with it."""
        if milestones_set:
            return {"schedule": {"epochs": epochs}}
        current = _build_section("schedule", Schedule, self.config.get("schedule"))
        if current.epochs < 1:
            return {"schedule": {"epochs": epochs}}
        milestones = Schedule.scale_milestones(current.milestones, current.epochs, epochs)
        if milestones != current.milestones:
            logger.info("[ConfigLoader] schedule.milestones %s -> %s for %d epochs",
                        list(current.milestones), list(milestones), epochs)
        return {"schedule": {"epochs": epochs, "milestones": list(milestones)}}

    def get(self, section, key=None, default=None):
        """Access resolved config sections or single values."""
        value = getattr(self.run_config, section, default)
        if key:
            return getattr(value, key, default)
        return value

    def to_yaml(self):
        return self.run_config.to_yaml()


def load_config(path, overrides=(), env=None, epochs=None) -> RunConfig:
    return ConfigLoader(path, overrides, env, epochs).run_config
