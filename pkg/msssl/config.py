"""
Experiment configuration: YAML text -> typed stage configs, diagnostics and canonical hashing

The global seed is copied into every stage section that does not set its own seed.
"""
from __future__ import annotations

import collections
import dataclasses
import hashlib
import json
import pathlib
import typing
from dataclasses import dataclass, field

import yaml

from .exceptions import ConfigError, ConfigParseError
from .finetune import SCRATCH, FinetuneConfig
from .models import CAESpec, DecoderSpec, EncoderSpec, HeadSpec
from .phantom import PhantomConfig
from .pretrain import PretrainConfig
from .splits import ALLOWED_FRACTIONS, DEFAULT_TEST_RATIO, DEFAULT_VAL_RATIO, fraction_key
from .sweeps import CAE_FRACTIONS, METHODS
from .uad import DEFAULT_MEDIAN_KERNEL, DEFAULT_THRESHOLD_PERCENTILE, CAEConfig
from .volume import PathLike

PRETRAINED = 'pretrained'
DEVICES = ('auto', 'cpu', 'cuda')


class Diagnostic(collections.namedtuple('Diagnostic', ['field', 'rule'])):
    def __str__(self) -> str:
        return f'{self.field}: {self.rule}'


@dataclass(frozen=True)
class PathsConfig:
    data_root: str = 'data'
    output_root: str = 'runs'

    @classmethod
    def from_dict(cls, data: dict) -> PathsConfig:
        return cls(**(data or {}))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SplitConfig:
    fold_count: int = 5
    seed: int = 0
    test_ratio: float = DEFAULT_TEST_RATIO
    val_ratio: float = DEFAULT_VAL_RATIO

    def diagnostics(self, prefix: str = 'split') -> typing.List[typing.Tuple[str, str]]:
        result = []

        if self.fold_count < 2:
            result.append((f'{prefix}.fold_count', 'must be >= 2'))

        if self.test_ratio <= 0 or self.val_ratio < 0 or self.test_ratio + self.val_ratio >= 1:
            result.append((f'{prefix}.test_ratio', f'{prefix}.test_ratio + {prefix}.val_ratio must be in (0, 1)'))

        return result

    @classmethod
    def from_dict(cls, data: dict) -> SplitConfig:
        return cls(**(data or {}))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ResidualsConfig:
    kernel: typing.Optional[int] = DEFAULT_MEDIAN_KERNEL
    batch_size: int = 8
    threshold_percentile: float = DEFAULT_THRESHOLD_PERCENTILE

    def diagnostics(self, prefix: str = 'residuals') -> typing.List[typing.Tuple[str, str]]:
        result = []

        if self.kernel is not None and (not isinstance(self.kernel, int) or self.kernel < 1 or self.kernel % 2 == 0):
            result.append((f'{prefix}.kernel', 'must be null or an odd integer >= 1'))

        if self.batch_size < 1:
            result.append((f'{prefix}.batch_size', 'must be >= 1'))

        if not 0 < self.threshold_percentile < 100:
            result.append((f'{prefix}.threshold_percentile', 'must be in (0, 100)'))

        return result

    @classmethod
    def from_dict(cls, data: dict) -> ResidualsConfig:
        return cls(**(data or {}))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SweepConfig:
    methods: typing.Tuple[str, ...] = METHODS
    fractions: typing.Tuple[float, ...] = ALLOWED_FRACTIONS
    cae_fractions: typing.Tuple[float, ...] = CAE_FRACTIONS

    def diagnostics(self, prefix: str = 'sweep') -> typing.List[typing.Tuple[str, str]]:
        result = []

        if not self.methods or set(self.methods) - set(METHODS):
            result.append((f'{prefix}.methods', f'must be a nonempty subset of {", ".join(METHODS)}'))

        for name, grid in (('fractions', ALLOWED_FRACTIONS), ('cae_fractions', CAE_FRACTIONS)):
            if any(fraction_key(value) not in grid for value in getattr(self, name)):
                allowed = ', '.join(str(fraction) for fraction in grid)
                result.append((f'{prefix}.{name}', f'every fraction must be one of {allowed}'))

        return result

    @classmethod
    def from_dict(cls, data: dict) -> SweepConfig:
        return cls(**{name: tuple(value) for name, value in (data or {}).items()})

    def to_dict(self) -> dict:
        return {name: list(value) for name, value in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class ModelsConfig:
    cae: CAESpec = field(default_factory=CAESpec)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    head: HeadSpec = field(default_factory=HeadSpec)

    def diagnostics(self, prefix: str = 'models') -> typing.List[typing.Tuple[str, str]]:
        result = (
            self.cae.diagnostics(f'{prefix}.cae')
            + self.encoder.diagnostics(f'{prefix}.encoder')
            + self.decoder.diagnostics(f'{prefix}.decoder')
            + self.head.diagnostics(f'{prefix}.head')
        )

        if tuple(self.decoder.stage_channels) != tuple(reversed(self.encoder.stage_channels)):
            result.append((f'{prefix}.decoder.stage_channels', f'must mirror {prefix}.encoder.stage_channels'))

        if self.decoder.stem_channels != self.encoder.stem_channels:
            result.append((f'{prefix}.decoder.stem_channels', f'must equal {prefix}.encoder.stem_channels'))

        if self.head.in_features != self.encoder.feature_dim:
            result.append((f'{prefix}.head.in_features', f'must equal the last {prefix}.encoder.stage_channels'))

        if tuple(self.cae.input_shape) != tuple(self.encoder.input_shape):
            result.append((f'{prefix}.encoder.input_shape', f'must equal {prefix}.cae.input_shape'))

        return result

    @classmethod
    def from_dict(cls, data: dict) -> ModelsConfig:
        data = dict(data or {})
        encoder = EncoderSpec.from_dict(data.get('encoder') or {})
        decoder = data.get('decoder')

        return cls(
                CAESpec.from_dict(data.get('cae') or {}),
                encoder,
                DecoderSpec.mirror(encoder) if decoder is None else DecoderSpec.from_dict(decoder),
                HeadSpec.from_dict(data.get('head') or {'in_features': encoder.feature_dim}),
        )

    def to_dict(self) -> dict:
        return {
            'cae': self.cae.to_dict(),
            'encoder': self.encoder.to_dict(),
            'decoder': self.decoder.to_dict(),
            'head': self.head.to_dict(),
        }


SECTIONS = {
    'paths': PathsConfig,
    'phantom': PhantomConfig,
    'split': SplitConfig,
    'cae': CAEConfig,
    'residuals': ResidualsConfig,
    'pretrain': PretrainConfig,
    'finetune': FinetuneConfig,
    'sweep': SweepConfig,
    'models': ModelsConfig,
}
SEED_FIELDS = {'phantom': 'rng_seed', 'split': 'seed', 'cae': 'seed', 'pretrain': 'seed', 'finetune': 'seed'}
GLOBALS = {'seed': 0, 'device': 'auto', 'deterministic': True, 'workers': 1}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    device: str = 'auto'
    deterministic: bool = True
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    cae: CAEConfig = field(default_factory=CAEConfig)
    residuals: ResidualsConfig = field(default_factory=ResidualsConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(init=PRETRAINED))
    sweep: SweepConfig = field(default_factory=SweepConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        problems = unknown_fields(data)

        if problems:
            raise ConfigError('; '.join(str(problem) for problem in problems))

        data = dict(data or {})
        seed = data.get('seed', GLOBALS['seed'])
        sections = {}

        for name, section in SECTIONS.items():
            values = dict(data.get(name) or {})

            if name in SEED_FIELDS:
                values.setdefault(SEED_FIELDS[name], seed)

            if name == 'finetune':
                values.setdefault('init', PRETRAINED)

            try:
                sections[name] = section.from_dict(values)
            except (TypeError, ValueError) as e:
                raise ConfigError(f'Invalid section {name}: {e}') from e

        return cls(**{key: data.get(key, default) for key, default in GLOBALS.items()}, **sections)

    def to_dict(self) -> dict:
        return {
            **{key: getattr(self, key) for key in GLOBALS},
            **{name: getattr(self, name).to_dict() for name in SECTIONS},
        }

    def with_seed(self, seed: int) -> ExperimentConfig:
        changes = {
            name: dataclasses.replace(getattr(self, name), **{seed_field: seed})
            for name, seed_field in SEED_FIELDS.items()
        }

        return dataclasses.replace(self, seed=seed, **changes)

    def diagnostics(self) -> typing.List[Diagnostic]:
        result = []

        if self.workers < 1:
            result.append(('workers', 'must be >= 1'))

        if self.device.split(':')[0] not in DEVICES:
            result.append(('device', f'must be one of {", ".join(DEVICES)}'))

        for name in ('phantom', 'split', 'cae', 'residuals', 'pretrain', 'finetune', 'sweep', 'models'):
            result.extend(getattr(self, name).diagnostics(name))

        if tuple(self.phantom.shape) != tuple(self.models.cae.input_shape):
            result.append(('models.cae.input_shape', 'must equal phantom.shape'))

        if self.finetune.init not in (SCRATCH, PRETRAINED) and not self.finetune.init.endswith('.pt'):
            result.append(('finetune.init', f'must be {SCRATCH}, {PRETRAINED} or a checkpoint path'))

        return [Diagnostic(*problem) for problem in result]

    def section_hash(self, *sections: str) -> str:
        payload = {}

        for section in sections:
            value = self.to_dict()

            for part in section.split('.'):
                value = value[part]

            payload[section] = value

        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:8]


def unknown_fields(data: typing.Any) -> typing.List[Diagnostic]:
    if not isinstance(data, dict):
        return [Diagnostic('<root>', 'config must be a mapping')]

    result = [Diagnostic(key, 'unknown field') for key in data if key not in SECTIONS and key not in GLOBALS]

    for name, section in SECTIONS.items():
        values = data.get(name)

        if values is None:
            continue

        if not isinstance(values, dict):
            result.append(Diagnostic(name, 'must be a mapping'))
            continue

        known = {item.name for item in dataclasses.fields(section)}
        result.extend(Diagnostic(f'{name}.{key}', 'unknown field') for key in values if key not in known)

    return result


def parse_config(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark

        raise ConfigParseError(
                str(e.problem or e.context),
                line=None if mark is None else mark.line + 1,
                column=None if mark is None else mark.column + 1,
        ) from e
    except yaml.YAMLError as e:
        raise ConfigParseError(str(e)) from e

    return {} if data is None else data


def validate_config(source: typing.Union[str, dict, ExperimentConfig]) -> typing.List[Diagnostic]:
    """Empty list iff the config satisfies every stage's invariants, unparseable text raises ConfigParseError"""
    if isinstance(source, ExperimentConfig):
        return source.diagnostics()

    data = parse_config(source) if isinstance(source, str) else source
    problems = unknown_fields(data)

    if problems:
        return problems

    try:
        return ExperimentConfig.from_dict(data).diagnostics()
    except ConfigError as e:
        return [Diagnostic('<root>', str(e))]


def load_config(path: PathLike) -> ExperimentConfig:
    path = pathlib.Path(path)

    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f'Could not read config {path}: {e}') from e

    return ExperimentConfig.from_dict(parse_config(text))


def dump_config(cfg: ExperimentConfig, path: PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))

    return path
