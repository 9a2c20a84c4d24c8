"""
Network contracts and their torch realizations

CAE: strided conv stages (conv -> batch-norm -> leaky-ReLU) into a dense 512-d bottleneck, mirrored
trilinear-upsampling decoder, sigmoid output, no skips.
SSL network: 3D ResNet18-style encoder (stride-2 stem, four stride-2 stages of two basic blocks)
and a skip-connected decoder. For a 64^3 input the stem gives 32^3 and the stages 16^3, 8^3, 4^3, 2^3.
Classifier: the same encoder, global average pooling and an MLP head 512 -> 256 -> 2.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import pathlib
import typing
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ArgumentError, DimensionError, SpecMismatchError, StateError, VolumeIOError, format_allowed
from .volume import PathLike

DEFAULT_LOGGER_NAME = 'ms-ssl.models'

CHECKPOINT_FORMAT = 'ms-ssl-checkpoint'
CHECKPOINT_VERSION = 1
STAGE_TAGS = ('cae', 'ssl', 'dae', 'ae', 'finetuned', 'scratch')


class SpecMixin:
    kind = 'spec'

    def to_dict(self) -> dict:
        return {
            name: list(value) if isinstance(value, tuple) else value
            for name, value in dataclasses.asdict(self).items()
        }

    @classmethod
    def from_dict(cls, data: dict):
        return cls(**{name: tuple(value) if isinstance(value, list) else value for name, value in data.items()})

    def diagnostics(self, prefix: str) -> typing.List[typing.Tuple[str, str]]:
        return []


@dataclass(frozen=True)
class CAESpec(SpecMixin):
    input_shape: typing.Tuple[int, int, int] = (64, 64, 64)
    stage_channels: typing.Tuple[int, ...] = (16, 32, 64, 128, 256)
    latent_dim: int = 512
    negative_slope: float = 0.01

    kind = 'cae'

    @property
    def bottleneck_shape(self) -> typing.Tuple[int, int, int, int]:
        factor = 2 ** len(self.stage_channels)

        return (self.stage_channels[-1], *(size // factor for size in self.input_shape))

    def diagnostics(self, prefix: str = 'models.cae') -> typing.List[typing.Tuple[str, str]]:
        result = []
        factor = 2 ** len(self.stage_channels)

        if not self.stage_channels or min(self.stage_channels) < 1:
            result.append((f'{prefix}.stage_channels', 'must be a nonempty list of positive widths'))
        elif any(size % factor for size in self.input_shape):
            result.append((f'{prefix}.input_shape', f'every axis must be divisible by {factor}'))

        if self.latent_dim < 1:
            result.append((f'{prefix}.latent_dim', 'must be >= 1'))

        return result


@dataclass(frozen=True)
class EncoderSpec(SpecMixin):
    input_shape: typing.Tuple[int, int, int] = (64, 64, 64)
    stem_channels: int = 64
    stage_channels: typing.Tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 2

    kind = 'encoder'

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    def stage_shapes(self) -> typing.List[typing.Tuple[int, int, int]]:
        return [
            tuple(size // 2 ** (stage + 2) for size in self.input_shape)
            for stage in range(len(self.stage_channels))
        ]

    def diagnostics(self, prefix: str = 'models.encoder') -> typing.List[typing.Tuple[str, str]]:
        result = []
        factor = 2 ** (len(self.stage_channels) + 1)

        if not self.stage_channels or min(self.stage_channels) < 1 or self.stem_channels < 1:
            result.append((f'{prefix}.stage_channels', 'must be a nonempty list of positive widths'))
        elif any(size % factor for size in self.input_shape):
            result.append((f'{prefix}.input_shape', f'every axis must be divisible by {factor}'))

        if self.blocks_per_stage < 1:
            result.append((f'{prefix}.blocks_per_stage', 'must be >= 1'))

        return result


@dataclass(frozen=True)
class DecoderSpec(SpecMixin):
    stage_channels: typing.Tuple[int, ...] = (512, 256, 128, 64)
    stem_channels: int = 64
    out_channels: int = 1

    kind = 'decoder'

    @classmethod
    def mirror(cls, encoder: EncoderSpec) -> DecoderSpec:
        return cls(tuple(reversed(encoder.stage_channels)), encoder.stem_channels)

    @property
    def skip_channels(self) -> typing.Tuple[int, ...]:
        return (*self.stage_channels[1:], self.stem_channels)

    def diagnostics(self, prefix: str = 'models.decoder') -> typing.List[typing.Tuple[str, str]]:
        if not self.stage_channels or min(self.stage_channels) < 1:
            return [(f'{prefix}.stage_channels', 'must be a nonempty list of positive widths')]

        return []


@dataclass(frozen=True)
class HeadSpec(SpecMixin):
    in_features: int = 512
    hidden_features: int = 256
    n_classes: int = 2

    kind = 'head'

    def diagnostics(self, prefix: str = 'models.head') -> typing.List[typing.Tuple[str, str]]:
        if min(self.in_features, self.hidden_features, self.n_classes) < 1:
            return [(f'{prefix}', 'all widths must be >= 1')]

        return []


SPEC_TYPES = {spec.kind: spec for spec in (CAESpec, EncoderSpec, DecoderSpec, HeadSpec)}


def spec_hash(spec: SpecMixin) -> str:
    payload = json.dumps({'kind': spec.kind, **spec.to_dict()}, sort_keys=True)

    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def conv_block(in_channels: int, out_channels: int, *, stride: int = 1, negative_slope: float = 0.01) -> nn.Sequential:
    return nn.Sequential(
            nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False),
            nn.BatchNorm3d(out_channels),
            nn.LeakyReLU(negative_slope, inplace=True),
    )


def _check_input(x: torch.Tensor, input_shape: typing.Sequence[int]) -> None:
    if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(input_shape):
        expected = ", ".join(map(str, input_shape))

        raise DimensionError(f'Expected input of shape (B, 1, {expected}), got {tuple(x.shape)}')


class CAE(nn.Module):
    def __init__(self, spec: CAESpec) -> None:
        super().__init__()

        self.spec = spec

        widths = (1, *spec.stage_channels)
        self.encoder = nn.Sequential(*[
            conv_block(widths[index], widths[index + 1], stride=2, negative_slope=spec.negative_slope)
            for index in range(len(spec.stage_channels))
        ])

        flat = math.prod(spec.bottleneck_shape)
        self.to_latent = nn.Linear(flat, spec.latent_dim)
        self.from_latent = nn.Linear(spec.latent_dim, flat)

        widths = (*reversed(spec.stage_channels), spec.stage_channels[0])
        self.decoder = nn.Sequential(*[
            nn.Sequential(
                    nn.Upsample(scale_factor=2, mode='trilinear', align_corners=False),
                    conv_block(widths[index], widths[index + 1], negative_slope=spec.negative_slope),
            )
            for index in range(len(spec.stage_channels))
        ])
        self.output = nn.Conv3d(spec.stage_channels[0], 1, kernel_size=3, padding=1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.spec.input_shape)

        return self.to_latent(self.encoder(x).flatten(1))

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        features = self.from_latent(latent).view(latent.shape[0], *self.spec.bottleneck_shape)

        return torch.sigmoid(self.output(self.decoder(features)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1) -> None:
        super().__init__()

        self.conv1 = nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_channels)
        self.shortcut = nn.Identity()

        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                    nn.Conv3d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
                    nn.BatchNorm3d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))

        return F.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__()

        self.spec = spec
        self.stem = nn.Sequential(
                nn.Conv3d(1, spec.stem_channels, kernel_size=7, stride=2, padding=3, bias=False),
                nn.BatchNorm3d(spec.stem_channels),
                nn.ReLU(inplace=True),
        )

        stages = []
        width = spec.stem_channels

        for channels in spec.stage_channels:
            blocks = [BasicBlock(width, channels, stride=2)]
            blocks.extend(BasicBlock(channels, channels) for _ in range(spec.blocks_per_stage - 1))
            stages.append(nn.Sequential(*blocks))
            width = channels

        self.stages = nn.ModuleList(stages)

    def forward_features(self, x: torch.Tensor) -> typing.Tuple[torch.Tensor, typing.List[torch.Tensor]]:
        _check_input(x, self.spec.input_shape)

        stem = self.stem(x)
        outputs = []
        features = stem

        for stage in self.stages:
            features = stage(features)
            outputs.append(features)

        return stem, outputs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, outputs = self.forward_features(x)

        return F.adaptive_avg_pool3d(outputs[-1], 1).flatten(1)


class SkipDecoder(nn.Module):
    """Decoder stage i upsamples, concatenates skip i (deepest first, the stem output last) and convolves"""

    def __init__(self, spec: DecoderSpec) -> None:
        super().__init__()

        self.spec = spec
        self.upsample = nn.Upsample(scale_factor=2, mode='trilinear', align_corners=False)
        self.stages = nn.ModuleList([
            conv_block(width + skip, skip)
            for width, skip in zip(spec.stage_channels, spec.skip_channels)
        ])
        self.output = nn.Conv3d(spec.stem_channels, spec.out_channels, kernel_size=3, padding=1)

    def forward(
            self,
            bottom: torch.Tensor,
            skips: typing.Sequence[torch.Tensor],
            *,
            ablate_skips: typing.Collection[int] = (),
    ) -> torch.Tensor:
        if len(skips) != len(self.stages):
            raise DimensionError(f'Decoder expects {len(self.stages)} skip tensors, got {len(skips)}')

        features = bottom

        for index, (stage, skip) in enumerate(zip(self.stages, skips)):
            if index in ablate_skips:
                skip = torch.zeros_like(skip)

            features = stage(torch.cat([self.upsample(features), skip], dim=1))

        return torch.sigmoid(self.output(self.upsample(features)))


class MLPHead(nn.Module):
    def __init__(self, spec: HeadSpec) -> None:
        super().__init__()

        self.spec = spec
        self.layers = nn.Sequential(
                nn.Linear(spec.in_features, spec.hidden_features),
                nn.ReLU(inplace=True),
                nn.Linear(spec.hidden_features, spec.n_classes),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.layers(features)


class SSLNetwork(nn.Module):
    def __init__(self, encoder: EncoderSpec, decoder: DecoderSpec = None) -> None:
        super().__init__()

        decoder = DecoderSpec.mirror(encoder) if decoder is None else decoder

        if tuple(decoder.stage_channels) != tuple(reversed(encoder.stage_channels)):
            raise DimensionError(f'Decoder widths {decoder.stage_channels} do not mirror {encoder.stage_channels}')

        self.encoder = ResNetEncoder(encoder)
        self.decoder = SkipDecoder(decoder)

    def forward(self, x: torch.Tensor, *, ablate_skips: typing.Collection[int] = ()) -> torch.Tensor:
        return unet_forward(self.encoder, self.decoder, x, ablate_skips=ablate_skips)


class Classifier(nn.Module):
    def __init__(self, encoder: EncoderSpec, head: HeadSpec = None) -> None:
        super().__init__()

        head = HeadSpec(in_features=encoder.feature_dim) if head is None else head

        if head.in_features != encoder.feature_dim:
            raise DimensionError(f'Head expects {head.in_features} features, encoder gives {encoder.feature_dim}')

        self.encoder = ResNetEncoder(encoder)
        self.head = MLPHead(head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return classify(self.encoder, self.head, x)


def cae_forward(model: CAE, x: torch.Tensor) -> torch.Tensor:
    return model(x)


def unet_forward(
        encoder: ResNetEncoder,
        decoder: SkipDecoder,
        x: torch.Tensor,
        *,
        ablate_skips: typing.Collection[int] = (),
) -> torch.Tensor:
    stem, outputs = encoder.forward_features(x)
    skips = [*reversed(outputs[:-1]), stem]

    return decoder(outputs[-1], skips, ablate_skips=ablate_skips)


def classify(encoder: ResNetEncoder, head: MLPHead, x: torch.Tensor) -> torch.Tensor:
    return head(encoder(x))


def build_module(spec: SpecMixin) -> nn.Module:
    if isinstance(spec, CAESpec):
        return CAE(spec)

    if isinstance(spec, EncoderSpec):
        return ResNetEncoder(spec)

    if isinstance(spec, DecoderSpec):
        return SkipDecoder(spec)

    if isinstance(spec, HeadSpec):
        return MLPHead(spec)

    raise ArgumentError(f'Unknown spec type {type(spec).__name__}')


def parameter_count(module: nn.Module) -> int:
    return sum(parameter.numel() for parameter in module.parameters())


class Checkpoint:
    """
    Single-file container: versioned header, spec of every stored part, named weight tensors
    and training provenance. Loading against expected specs rejects any hash mismatch.
    """

    def __init__(
            self,
            stage: str,
            specs: typing.Dict[str, SpecMixin],
            weights: typing.Dict[str, typing.Dict[str, torch.Tensor]],
            *,
            config: dict = None,
            epoch: int = 0,
            val_loss: float = math.inf,
    ) -> None:
        if stage not in STAGE_TAGS:
            raise ArgumentError(f'Unknown checkpoint stage {stage}, expected one of {format_allowed(STAGE_TAGS)}')

        if set(specs) != set(weights):
            raise ArgumentError(f'Checkpoint parts {sorted(specs)} and weights {sorted(weights)} differ')

        self.stage = stage
        self.specs = specs
        self.weights = weights
        self.config = config or {}
        self.epoch = epoch
        self.val_loss = val_loss

    @classmethod
    def from_modules(cls, stage: str, modules: typing.Dict[str, nn.Module], **kwargs) -> Checkpoint:
        return cls(
                stage,
                {name: module.spec for name, module in modules.items()},
                {name: _detached_state(module) for name, module in modules.items()},
                **kwargs,
        )

    @property
    def spec_hash(self) -> str:
        return hashlib.sha256(
                '|'.join(f'{name}:{spec_hash(self.specs[name])}' for name in sorted(self.specs)).encode(),
        ).hexdigest()[:16]

    def part_hash(self, part: str) -> str:
        return spec_hash(self._spec(part))

    def check(self, part: str, expected: SpecMixin) -> None:
        actual = self.part_hash(part)

        if actual != spec_hash(expected):
            raise SpecMismatchError(spec_hash(expected), actual, part)

    def module(self, part: str) -> nn.Module:
        module = build_module(self._spec(part))
        module.load_state_dict(self.weights[part])

        return module

    def restore(self, part: str, module: nn.Module) -> nn.Module:
        self.check(part, module.spec)
        module.load_state_dict(self.weights[part])

        return module

    def save(self, path: PathLike) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        payload = {
            'format': CHECKPOINT_FORMAT,
            'version': CHECKPOINT_VERSION,
            'stage': self.stage,
            'spec_hash': self.spec_hash,
            'specs': {name: {'kind': spec.kind, **spec.to_dict()} for name, spec in self.specs.items()},
            'weights': self.weights,
            'config': json.dumps(self.config, sort_keys=True),
            'epoch': self.epoch,
            'val_loss': float(self.val_loss),
        }

        try:
            torch.save(payload, path)
        except OSError as e:
            raise VolumeIOError(f'Could not write checkpoint {path}: {e}') from e

        return path

    @classmethod
    def load(cls, path: PathLike, expect: typing.Dict[str, SpecMixin] = None) -> Checkpoint:
        path = pathlib.Path(path)

        if not path.is_file():
            raise StateError(f'Checkpoint {path} does not exist')

        payload = torch.load(path, map_location='cpu', weights_only=True)

        if payload.get('format') != CHECKPOINT_FORMAT or payload.get('version') != CHECKPOINT_VERSION:
            raise StateError(f'File {path} is not a version {CHECKPOINT_VERSION} checkpoint')

        specs = {}

        for name, data in payload['specs'].items():
            data = dict(data)
            specs[name] = SPEC_TYPES[data.pop('kind')].from_dict(data)

        checkpoint = cls(
                payload['stage'],
                specs,
                payload['weights'],
                config=json.loads(payload['config']),
                epoch=payload['epoch'],
                val_loss=payload['val_loss'],
        )

        if checkpoint.spec_hash != payload['spec_hash']:
            raise SpecMismatchError(payload['spec_hash'], checkpoint.spec_hash)

        for part, spec in (expect or {}).items():
            checkpoint.check(part, spec)

        return checkpoint

    def _spec(self, part: str) -> SpecMixin:
        if part not in self.specs:
            raise StateError(f'{self!r} has no {part} part')

        return self.specs[part]

    def __repr__(self) -> str:
        return f'Checkpoint {self.stage} ({", ".join(sorted(self.specs))}), epoch {self.epoch}'


def log_parameters(name: str, module: nn.Module, logger: logging.Logger = None) -> None:
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)
    log.info('Built %s with %d parameters', name, parameter_count(module))


def _detached_state(module: nn.Module) -> typing.Dict[str, torch.Tensor]:
    return {name: tensor.detach().cpu().clone() for name, tensor in module.state_dict().items()}
