"""
Unsupervised anomaly detection stage: a CAE trained with L1 on normal volumes only, residual maps
|x - A(x)| swept over the unlabelled pool and refined with a median filter
"""
from __future__ import annotations

import dataclasses
import json
import logging
import pathlib
import typing
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import ReconstructionDataset, holdout, make_loader, stack_volumes
from .exceptions import ContractViolationError, DataError, StateError
from .models import CAE, CAESpec, Checkpoint, log_parameters
from .optim import LR_SCALINGS, build_lars
from .phantom import Label, Sample, UnlabelledSample
from .training import fit, reconstruction_loss, write_history
from .volume import PathLike, Volume, load_volume, median_filter3d, save_volume

DEFAULT_LOGGER_NAME = 'ms-ssl.uad'

RESIDUAL_MANIFEST = 'residuals.json'
RESIDUAL_MANIFEST_VERSION = 1
DEFAULT_MEDIAN_KERNEL = 5
DEFAULT_THRESHOLD_PERCENTILE = 95.0

CAEInput = typing.Union[Checkpoint, CAE, PathLike]


@dataclass(frozen=True)
class CAEConfig:
    epochs: int = 500
    warmup_epochs: int = 20
    lr: float = 0.2
    lr_scaling: str = 'linear'
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coefficient: float = 0.001
    val_fraction: float = 0.1
    seed: int = 0

    def diagnostics(self, prefix: str = 'cae') -> typing.List[typing.Tuple[str, str]]:
        result = []

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

        if not 0 <= self.val_fraction < 1:
            result.append((f'{prefix}.val_fraction', 'must be in [0, 1)'))

        return result

    @classmethod
    def from_dict(cls, data: dict) -> CAEConfig:
        return cls(**(data or {}))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ResidualSample:
    input_ref: str
    residual: Volume = field(repr=False)
    postprocess: typing.Optional[int] = DEFAULT_MEDIAN_KERNEL


def train_cae(
        normals: typing.Sequence[Sample],
        cfg: CAEConfig,
        *,
        spec: CAESpec = None,
        val: typing.Sequence[Sample] = None,
        device: torch.device = None,
        history_path: PathLike = None,
        logger: logging.Logger = None,
) -> Checkpoint:
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    _require_normals(normals, 'training')

    if val is None:
        normals, val = holdout(normals, cfg.val_fraction, cfg.seed)
    else:
        _require_normals(val, 'validation')

    spec = spec or CAESpec()
    model = CAE(spec)
    log_parameters('CAE', model, log)

    train_loader = make_loader(
            ReconstructionDataset([sample.volume for sample in normals], seed=cfg.seed),
            cfg.batch_size,
            shuffle=True,
            seed=cfg.seed,
    )
    val_loader = None

    if val:
        val_loader = make_loader(
                ReconstructionDataset([sample.volume for sample in val], seed=cfg.seed),
                cfg.batch_size,
                shuffle=False,
        )

    optimizer, scheduler = build_lars(model.parameters(), cfg, len(train_loader))

    log.info('Training CAE on %d normal volumes, validating on %d', len(normals), len(val))

    result = fit(
            model,
            lambda network, batch: reconstruction_loss(network(batch[0]), batch[1], 'l1'),
            train_loader,
            val_loader,
            optimizer,
            epochs=cfg.epochs,
            scheduler=scheduler,
            device=device,
            name='cae',
            logger=log,
    )

    if history_path is not None:
        write_history(result.history, history_path)

    return Checkpoint.from_modules(
            'cae',
            {'cae': model.cpu()},
            config=cfg.to_dict(),
            epoch=result.best_epoch,
            val_loss=result.best_val_loss,
    )


def load_cae(cae: CAEInput) -> CAE:
    if isinstance(cae, CAE):
        return cae

    if cae is None:
        raise StateError('No CAE checkpoint given')

    if not isinstance(cae, Checkpoint):
        cae = Checkpoint.load(cae)

    if cae.stage != 'cae':
        raise StateError(f'{cae!r} is not a CAE checkpoint')

    return cae.module('cae')


@torch.no_grad()
def reconstruct(cae: CAEInput, volumes: typing.Sequence[Volume], *, batch_size: int = 8) -> typing.List[Volume]:
    model = load_cae(cae).eval()
    device = next(model.parameters()).device
    result = []

    for start in range(0, len(volumes), batch_size):
        chunk = volumes[start:start + batch_size]
        output = model(stack_volumes(chunk).to(device)).cpu().numpy()

        result.extend(volume.with_data(output[index, 0]) for index, volume in enumerate(chunk))

    return result


def residual(cae: CAEInput, x: Volume) -> Volume:
    return residual_from(x, reconstruct(cae, [x])[0])


def residual_from(x: Volume, reconstruction: Volume) -> Volume:
    return x.with_data(np.clip(np.abs(x.data - reconstruction.data), 0.0, 1.0))


def postprocess_residual(r: Volume, kernel: typing.Optional[int] = DEFAULT_MEDIAN_KERNEL) -> Volume:
    if kernel is None or kernel == 1:
        return r.with_data(r.data.copy())

    filtered = median_filter3d(r, kernel)

    return filtered.with_data(np.clip(filtered.data, 0.0, 1.0))


def reconstruction_errors(cae: CAEInput, samples: typing.Sequence[Sample], *, batch_size: int = 8) -> np.ndarray:
    volumes = [sample.volume for sample in samples]
    outputs = reconstruct(cae, volumes, batch_size=batch_size)

    return np.asarray([np.abs(x.data - y.data).mean() for x, y in zip(volumes, outputs)], dtype=np.float64)


def sweep_unlabelled(
        cae: CAEInput,
        pool: typing.Sequence[typing.Union[UnlabelledSample, Sample]],
        out_dir: PathLike,
        *,
        kernel: typing.Optional[int] = DEFAULT_MEDIAN_KERNEL,
        batch_size: int = 8,
        logger: logging.Logger = None,
) -> typing.List[ResidualSample]:
    """Write one post-processed residual volume per pool sample plus a manifest referencing the input ids"""
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    if isinstance(cae, (str, pathlib.Path)) and not pathlib.Path(cae).is_file():
        raise StateError(f'CAE checkpoint {cae} does not exist')

    model = load_cae(cae)
    out_dir = pathlib.Path(out_dir)
    (out_dir / 'volumes').mkdir(parents=True, exist_ok=True)

    result = []
    records = []

    for start in range(0, len(pool), batch_size):
        chunk = pool[start:start + batch_size]
        volumes = [sample.volume for sample in chunk]

        for sample, volume, reconstruction in zip(chunk, volumes, reconstruct(model, volumes, batch_size=batch_size)):
            processed = postprocess_residual(residual_from(volume, reconstruction), kernel)
            item = ResidualSample(sample.id, processed, kernel)
            path = save_volume(item.residual, out_dir / 'volumes' / f'{sample.id}.msv')

            result.append(item)
            records.append({'input_ref': sample.id, 'residual': str(path.relative_to(out_dir))})

        log.debug('Generated residuals %d..%d of %d', start + 1, start + len(chunk), len(pool))

    manifest = out_dir / RESIDUAL_MANIFEST
    manifest.write_text(json.dumps({
        'version': RESIDUAL_MANIFEST_VERSION,
        'postprocess': kernel,
        'samples': records,
    }, indent=2))

    log.info('Wrote %d residual volumes to %s', len(result), out_dir)

    return result


def load_residuals(manifest: PathLike) -> typing.List[ResidualSample]:
    manifest = pathlib.Path(manifest)

    try:
        content = json.loads(manifest.read_text())
    except (OSError, ValueError) as e:
        raise DataError(f'Could not read residual manifest {manifest}: {e}') from e

    if content.get('version') != RESIDUAL_MANIFEST_VERSION:
        raise DataError(f'Unsupported residual manifest version {content.get("version")}')

    return [
        ResidualSample(record['input_ref'], load_volume(manifest.parent / record['residual']), content['postprocess'])
        for record in content['samples']
    ]


def residual_threshold(
        normal_residuals: typing.Sequence[Volume],
        percentile: float = DEFAULT_THRESHOLD_PERCENTILE,
) -> float:
    if not normal_residuals:
        raise DataError('Threshold needs at least one normal residual')

    return float(np.percentile(np.concatenate([r.data.ravel() for r in normal_residuals]), percentile))


def localization_dice(r: Volume, mask: np.ndarray, threshold: float) -> float:
    predicted = r.data > threshold
    truth = np.asarray(mask, dtype=bool)
    total = int(predicted.sum()) + int(truth.sum())

    if total == 0:
        return 1.0

    return 2.0 * int(np.logical_and(predicted, truth).sum()) / total


def score_localization(
        cae: CAEInput,
        samples: typing.Sequence[Sample],
        *,
        kernel: typing.Optional[int] = DEFAULT_MEDIAN_KERNEL,
        percentile: float = DEFAULT_THRESHOLD_PERCENTILE,
        batch_size: int = 8,
) -> float:
    """Mean Dice over samples with a ground-truth mask, the threshold comes from the mask-free ones"""
    model = load_cae(cae)
    volumes = [sample.volume for sample in samples]
    residuals = [
        postprocess_residual(residual_from(x, y), kernel)
        for x, y in zip(volumes, reconstruct(model, volumes, batch_size=batch_size))
    ]

    threshold = residual_threshold([r for r, sample in zip(residuals, samples) if sample.gt_mask is None], percentile)
    scores = [
        localization_dice(r, sample.gt_mask, threshold)
        for r, sample in zip(residuals, samples)
        if sample.gt_mask is not None
    ]

    if not scores:
        raise DataError('Localization needs at least one anomalous sample')

    return float(np.mean(scores))


def _require_normals(samples: typing.Sequence[Sample], role: str) -> None:
    offending = [sample.id for sample in samples if getattr(sample, 'label', None) != Label.NORMAL]

    if offending:
        raise ContractViolationError(
                f'CAE {role} data must be labelled normal, got {len(offending)} other sample(s), e.g. {offending[0]}',
        )
