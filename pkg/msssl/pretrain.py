"""
Self-supervised pretraining of the skip-connected encoder/decoder

residual: input is the augmented original volume, target its residual map (geometric transforms only)
ae: target is the augmented input itself
dae: input is the augmented volume corrupted with Gaussian noise, target the clean augmented volume

Pretraining code only receives UnlabelledSample objects, labels are unreachable from here.
"""
from __future__ import annotations

import dataclasses
import logging
import typing
from dataclasses import dataclass, field

import torch

from .data import ReconstructionDataset, holdout, make_loader
from .exceptions import ContractViolationError, DataError
from .models import Checkpoint, DecoderSpec, EncoderSpec, SSLNetwork, log_parameters
from .optim import LR_SCALINGS, build_lars
from .phantom import UnlabelledSample
from .training import LOSSES, fit, reconstruction_loss, write_history
from .uad import ResidualSample
from .volume import AugmentationPolicy, PathLike, Volume

DEFAULT_LOGGER_NAME = 'ms-ssl.pretrain'

TASKS = ('residual', 'ae', 'dae')
STAGE_BY_TASK = {'residual': 'ssl', 'ae': 'ae', 'dae': 'dae'}

Pair = typing.Tuple[UnlabelledSample, ResidualSample]


@dataclass(frozen=True)
class PretrainConfig:
    task: str = 'residual'
    loss: str = 'bce'
    epochs: int = 500
    warmup_epochs: int = 20
    lr: float = 0.2
    lr_scaling: str = 'linear'
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coefficient: float = 0.001
    val_fraction: float = 0.1
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    corruption_std: float = 0.6
    corruption_mean: float = 0.0
    seed: int = 0

    def diagnostics(self, prefix: str = 'pretrain') -> typing.List[typing.Tuple[str, str]]:
        result = []

        if self.task not in TASKS:
            result.append((f'{prefix}.task', f'must be one of {", ".join(TASKS)}'))

        if self.loss not in LOSSES:
            result.append((f'{prefix}.loss', f'must be one of {", ".join(LOSSES)}'))

        if self.epochs < 1:
            result.append((f'{prefix}.epochs', 'must be >= 1'))

        if not 0 <= self.warmup_epochs <= self.epochs:
            result.append((f'{prefix}.warmup_epochs', f'must be in [0, {prefix}.epochs]'))

        if self.lr <= 0:
            result.append((f'{prefix}.lr', 'must be > 0'))

        if self.lr_scaling not in LR_SCALINGS:
            result.append((f'{prefix}.lr_scaling', f'must be one of {", ".join(LR_SCALINGS)}'))

        if self.batch_size < 1:
            result.append((f'{prefix}.batch_size', 'must be >= 1'))

        if self.corruption_std < 0:
            result.append((f'{prefix}.corruption_std', 'must be >= 0'))

        if not 0 <= self.val_fraction < 1:
            result.append((f'{prefix}.val_fraction', 'must be in [0, 1)'))

        return result + self.augmentation.diagnostics(f'{prefix}.augmentation')

    @classmethod
    def from_dict(cls, data: dict) -> PretrainConfig:
        data = dict(data or {})
        data['augmentation'] = AugmentationPolicy.from_dict(data.get('augmentation'))

        return cls(**data)

    def to_dict(self) -> dict:
        result = dataclasses.asdict(self)
        result['augmentation'] = self.augmentation.to_dict()

        return result


def pair_residuals(
        pool: typing.Sequence[UnlabelledSample],
        residuals: typing.Sequence[ResidualSample],
) -> typing.List[Pair]:
    by_ref = {item.input_ref: item for item in residuals}
    unmatched = [sample.id for sample in pool if sample.id not in by_ref]

    if unmatched:
        raise DataError(f'{len(unmatched)} pool volume(s) have no residual target, e.g. {unmatched[0]}')

    known = {sample.id for sample in pool}
    orphans = [item.input_ref for item in residuals if item.input_ref not in known]

    if orphans:
        raise DataError(f'{len(orphans)} residual(s) reference unknown volumes, e.g. {orphans[0]}')

    return [(sample, by_ref[sample.id]) for sample in pool]


def pretrain_residual(
        encoder: EncoderSpec,
        decoder: DecoderSpec,
        pairs: typing.Sequence[Pair],
        cfg: PretrainConfig,
        **kwargs,
) -> Checkpoint:
    for sample, target in pairs:
        _require_unlabelled(sample)

        if sample.id != target.input_ref:
            raise DataError(f'Residual {target.input_ref} is paired with volume {sample.id}')

        if sample.volume.shape != target.residual.shape:
            raise DataError(f'Residual {target.input_ref} has shape {target.residual.shape}, '
                            f'volume has {sample.volume.shape}')

    return _pretrain(
            'residual',
            encoder,
            decoder,
            [sample.volume for sample, _ in pairs],
            [target.residual for _, target in pairs],
            cfg,
            **kwargs,
    )


def pretrain_ae(
        encoder: EncoderSpec,
        decoder: DecoderSpec,
        pool: typing.Sequence[UnlabelledSample],
        cfg: PretrainConfig,
        **kwargs,
) -> Checkpoint:
    return _pretrain('ae', encoder, decoder, _volumes(pool), None, cfg, **kwargs)


def pretrain_dae(
        encoder: EncoderSpec,
        decoder: DecoderSpec,
        pool: typing.Sequence[UnlabelledSample],
        cfg: PretrainConfig,
        **kwargs,
) -> Checkpoint:
    return _pretrain('dae', encoder, decoder, _volumes(pool), None, cfg, **kwargs)


def _pretrain(
        task: str,
        encoder: EncoderSpec,
        decoder: typing.Optional[DecoderSpec],
        inputs: typing.List[Volume],
        targets: typing.Optional[typing.List[Volume]],
        cfg: PretrainConfig,
        *,
        device: torch.device = None,
        history_path: PathLike = None,
        logger: logging.Logger = None,
) -> Checkpoint:
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    network = SSLNetwork(encoder, decoder)
    log_parameters(f'{task} network', network, log)

    indices = list(range(len(inputs)))
    train_indices, val_indices = holdout(indices, cfg.val_fraction, cfg.seed)
    corruption = cfg.corruption_std if task == 'dae' else 0.0

    def dataset(chosen: typing.List[int], policy: AugmentationPolicy) -> ReconstructionDataset:
        return ReconstructionDataset(
                [inputs[index] for index in chosen],
                None if targets is None else [targets[index] for index in chosen],
                policy=policy,
                seed=cfg.seed,
                corruption_std=corruption,
                corruption_mean=cfg.corruption_mean,
        )

    train_loader = make_loader(dataset(train_indices, cfg.augmentation), cfg.batch_size, shuffle=True, seed=cfg.seed)
    val_loader = None

    if val_indices:
        val_loader = make_loader(dataset(val_indices, AugmentationPolicy.disabled()), cfg.batch_size, shuffle=False)

    optimizer, scheduler = build_lars(network.parameters(), cfg, len(train_loader))

    log.info(
            'Pretraining task %s with %s loss on %d volumes, validating on %d',
            task,
            cfg.loss,
            len(train_indices),
            len(val_indices),
    )

    result = fit(
            network,
            lambda model, batch: reconstruction_loss(model(batch[0]), batch[1], cfg.loss),
            train_loader,
            val_loader,
            optimizer,
            epochs=cfg.epochs,
            scheduler=scheduler,
            device=device,
            name=task,
            logger=log,
    )

    if history_path is not None:
        write_history(result.history, history_path)

    network.cpu()

    return Checkpoint.from_modules(
            STAGE_BY_TASK[task],
            {'encoder': network.encoder, 'decoder': network.decoder},
            config=dataclasses.replace(cfg, task=task).to_dict(),
            epoch=result.best_epoch,
            val_loss=result.best_val_loss,
    )


def _volumes(pool: typing.Sequence[UnlabelledSample]) -> typing.List[Volume]:
    for sample in pool:
        _require_unlabelled(sample)

    return [sample.volume for sample in pool]


def _require_unlabelled(sample: typing.Any) -> None:
    if not isinstance(sample, UnlabelledSample):
        raise ContractViolationError(f'Pretraining accepts label-free samples only, got {sample!r}')
