"""
Run configuration: sectioned YAML files plus ``--set`` overrides.

A file looks like::

    variant: cross_attention
    model:
      d_model: 64
    train:
      epochs: 50
      lr: 2.0e-4
    synthetic:
      preset: gaze_heavy

Missing keys take the dataclass defaults. Unknown sections and keys are
rejected, and every section is validated by its dataclass.
"""

import dataclasses
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import yaml

from fixformer.bench import BenchConfig
from fixformer.errors import ConfigError, ContractError
from fixformer.gaze import DetectionConfig
from fixformer.gradcheck import GradcheckConfig
from fixformer.image import ModelConfig
from fixformer.integration import IntegrationVariant
from fixformer.synthetic import PRESETS, SyntheticSpec, spec_from_preset
from fixformer.training import TrainConfig
from modules.config import CHECKPOINT_NAME, DEFAULT_DATA_DIR, DEFAULT_OUTPUT_DIR
from modules.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True, slots=True)
class PathsConfig:
    data_dir: str = DEFAULT_DATA_DIR
    output_dir: str = DEFAULT_OUTPUT_DIR
    # Empty means <output_dir>/best.ckpt.
    checkpoint: str = ''
    # Checkpoint whose image.* tensors initialize the image encoder.
    init_checkpoint: str = ''
    # Empty means <output_dir>/attention.
    attention_dir: str = ''

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / CHECKPOINT_NAME

    @property
    def attention_path(self) -> Path:
        return Path(self.attention_dir) if self.attention_dir else Path(self.output_dir) / 'attention'


_SECTIONS: dict[str, type] = {
    'model': ModelConfig,
    'train': TrainConfig,
    'synthetic': SyntheticSpec,
    'gaze': DetectionConfig,
    'gradcheck': GradcheckConfig,
    'bench': BenchConfig,
    'paths': PathsConfig
}
_TOP_LEVEL_KEYS = ('variant',)


@dataclass(frozen=True, slots=True)
class RunConfig:
    variant: IntegrationVariant = IntegrationVariant.CROSS_ATTENTION
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    # Preset the synthetic settings started from, if any.
    preset: str = ''
    gaze: DetectionConfig = field(default_factory=DetectionConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict[str, Any]:
        """Fully resolved configuration as plain YAML/JSON types."""
        data: dict[str, Any] = {'variant': self.variant.value}
        for name in _SECTIONS:
            data[name] = _plain(dataclasses.asdict(getattr(self, name)))
        if self.preset:
            data['synthetic']['preset'] = self.preset
        return data

    def replace(self, **changes: Any) -> 'RunConfig':
        return dataclasses.replace(self, **changes)


def _plain(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# COERCION =============================================================


def _coerce_scalar(value: Any, kind: type, where: str) -> Any:
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f'{where}: expected true/false, got {value!r}')
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'{where}: expected an integer, got {value!r}')
        return value
    if kind is float:
        # PyYAML reads exponents without a dot, e.g. 2e-4, as strings.
        if isinstance(value, bool):
            raise ConfigError(f'{where}: expected a number, got {value!r}')
        try:
            return float(value)
        except (TypeError, ValueError) as err:
            raise ConfigError(f'{where}: expected a number, got {value!r}') from err
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f'{where}: expected a string, got {value!r}')
        return value
    return value


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f'{where}: expected a list, got {value!r}')
        kind = type(default[0]) if default else float
        return tuple(_coerce_scalar(v, kind, f'{where}[{i}]') for i, v in enumerate(value))
    return _coerce_scalar(value, type(default), where)


def _defaults(cls: type) -> dict[str, Any]:
    defaults = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            defaults[f.name] = f.default_factory()
    return defaults


def _build_section(name: str, values: Mapping[str, Any]) -> Any:
    cls = _SECTIONS[name]
    defaults = _defaults(cls)
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f'unknown keys in section {name!r}: {", ".join(unknown)}')
    kwargs = {key: _coerce(value, defaults[key], f'{name}.{key}') for key, value in values.items()}
    try:
        return cls(**kwargs)
    except ContractError as err:
        raise ConfigError(f'section {name!r}: {err}') from err


def _build_synthetic(values: Mapping[str, Any]) -> tuple[SyntheticSpec, str]:
    values = dict(values)
    preset = values.pop('preset', '') or ''
    if not preset:
        return _build_section('synthetic', values), ''
    if preset not in PRESETS:
        raise ConfigError(f'unknown synthetic preset {preset!r}; choose from {sorted(PRESETS)}')
    # Explicit keys win over the preset.
    merged = {**PRESETS[preset], **values}
    spec = _build_section('synthetic', merged)
    return spec, preset


# LOADING ==============================================================


def merge_raw(base: Mapping[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = {key: dict(value) if isinstance(value, Mapping) else value for key, value in base.items()}
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> dict[str, Any]:
    """``section.key=value`` (or ``variant=value``) as a one-entry raw tree."""
    key, sep, raw_value = text.partition('=')
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f'override {text!r} is not of the form section.key=value')
    try:
        value = yaml.safe_load(raw_value) if raw_value.strip() else ''
    except yaml.YAMLError as err:
        raise ConfigError(f'override {text!r}: unparsable value') from err
    parts = key.split('.')
    if len(parts) == 1:
        return {key: value}
    if len(parts) == 2:
        return {parts[0]: {parts[1]: value}}
    raise ConfigError(f'override key {key!r} nests deeper than section.key')


def from_raw(raw: Mapping[str, Any]) -> RunConfig:
    """Validate a raw ``{section: {key: value}}`` tree into a RunConfig."""
    if not isinstance(raw, Mapping):
        raise ConfigError(f'configuration must be a mapping, got {type(raw).__name__}')
    unknown = sorted(set(raw) - set(_SECTIONS) - set(_TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f'unknown sections: {", ".join(unknown)}')

    sections: dict[str, Any] = {}
    for name in _SECTIONS:
        values = raw.get(name) or {}
        if not isinstance(values, Mapping):
            raise ConfigError(f'section {name!r} must be a mapping')
        if name == 'synthetic':
            sections[name], sections['preset'] = _build_synthetic(values)
        else:
            sections[name] = _build_section(name, values)

    variant_name = raw.get('variant', IntegrationVariant.CROSS_ATTENTION.value)
    try:
        variant = IntegrationVariant(variant_name)
    except ValueError as err:
        choices = ', '.join(v.value for v in IntegrationVariant)
        raise ConfigError(f'unknown variant {variant_name!r}; choose from {choices}') from err
    return RunConfig(variant=variant, **sections)


def load_run_config(
    path: Union[str, Path, None] = None, overrides: Sequence[str] = ()
) -> RunConfig:
    """Read ``path`` (if given), apply ``--set`` overrides in order and validate."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding='utf-8')
        except OSError as err:
            raise ConfigError(f'{path}: {err}') from err
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as err:
            raise ConfigError(f'{path}: not valid YAML ({err})') from err
        if loaded is not None and not isinstance(loaded, Mapping):
            raise ConfigError(f'{path}: top level must be a mapping')
        raw = dict(loaded or {})
        logger.debug(f'Loaded configuration from {path}')
    for override in overrides:
        raw = merge_raw(raw, parse_override(override))
    return from_raw(raw)
