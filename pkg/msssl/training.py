import copy
import csv
import logging
import math
import pathlib
import random
import typing
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader

from .exceptions import ArgumentError, StateError, format_allowed
from .volume import PathLike

DEFAULT_LOGGER_NAME = 'ms-ssl.training'

LOSSES = ('bce', 'l1', 'l2')
HISTORY_FIELDS = ('epoch', 'train_loss', 'val_loss', 'lr')

LossFn = typing.Callable[[nn.Module, typing.Sequence[torch.Tensor]], torch.Tensor]


def derive_seed(seed: int, *keys: typing.Union[str, int, float]) -> int:
    """Stable seed of a named sub-task, independent of what ran before it"""
    entropy = [int(seed) % 2 ** 32] + [zlib.crc32(str(key).encode()) for key in keys]

    return int(np.random.SeedSequence(entropy).generate_state(1)[0] & 0x7FFFFFFF)


def seed_rngs(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    seed_rngs(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)

    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = not deterministic


def resolve_device(device: str = 'auto') -> torch.device:
    if device == 'auto':
        return torch.device('cuda' if torch.cuda.is_available() else 'cpu')

    return torch.device(device)


def reconstruction_loss(prediction: torch.Tensor, target: torch.Tensor, kind: str = 'bce') -> torch.Tensor:
    if kind == 'bce':
        return F.binary_cross_entropy(prediction, target)

    if kind == 'l1':
        return F.l1_loss(prediction, target)

    if kind == 'l2':
        return F.mse_loss(prediction, target)

    raise ArgumentError(f'Unknown loss {kind}, expected one of {format_allowed(LOSSES)}')


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    best_epoch: int
    best_val_loss: float
    best_state: typing.Dict[str, torch.Tensor] = field(repr=False)
    history: typing.List[EpochRecord] = field(default_factory=list)


def write_history(history: typing.Sequence[EpochRecord], path: PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with path.open('w', newline='') as stream:
        writer = csv.writer(stream)
        writer.writerow(HISTORY_FIELDS)

        for record in history:
            writer.writerow([record.epoch, f'{record.train_loss:.8g}', f'{record.val_loss:.8g}', f'{record.lr:.8g}'])

    return path


def fit(
        model: nn.Module,
        loss_fn: LossFn,
        train_loader: DataLoader,
        val_loader: typing.Optional[DataLoader],
        optimizer: torch.optim.Optimizer,
        *,
        epochs: int,
        scheduler: torch.optim.lr_scheduler.LRScheduler = None,
        device: torch.device = None,
        name: str = 'model',
        logger: logging.Logger = None,
) -> FitResult:
    """
    Train for the given epochs, keeping the weights of the epoch with the lowest validation loss.
    Without validation data the training loss selects the epoch. The scheduler is stepped per batch.
    """
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)
    device = device or torch.device('cpu')

    if epochs < 1:
        raise ArgumentError(f'Training needs at least one epoch, got {epochs}')

    if len(train_loader.dataset) == 0:
        raise StateError(f'No training data for {name}')

    model.to(device)

    history = []
    best = None  # type: typing.Optional[FitResult]

    for epoch in range(epochs):
        lr = optimizer.param_groups[0]['lr']
        train_loss = _run_epoch(model, loss_fn, train_loader, epoch, device, optimizer, scheduler)

        if not math.isfinite(train_loss):
            log.error('%s diverged at epoch %d', name, epoch)

            raise StateError(f'Training of {name} diverged at epoch {epoch}')

        val_loss = train_loss if val_loader is None else _run_epoch(model, loss_fn, val_loader, epoch, device)

        history.append(EpochRecord(epoch + 1, train_loss, val_loss, lr))
        log.info(
                '%s epoch %d/%d: train %.5f, validation %.5f, lr %.3g',
                name,
                epoch + 1,
                epochs,
                train_loss,
                val_loss,
                lr,
        )

        if best is None or val_loss < best.best_val_loss:
            best = FitResult(epoch + 1, val_loss, copy.deepcopy(model.state_dict()))

    best.history = history
    model.load_state_dict(best.best_state)

    log.info('%s selected epoch %d with validation loss %.5f', name, best.best_epoch, best.best_val_loss)

    return best


def _run_epoch(
        model: nn.Module,
        loss_fn: LossFn,
        loader: DataLoader,
        epoch: int,
        device: torch.device,
        optimizer: torch.optim.Optimizer = None,
        scheduler: torch.optim.lr_scheduler.LRScheduler = None,
) -> float:
    training = optimizer is not None
    model.train(training)

    if hasattr(loader.dataset, 'set_epoch'):
        loader.dataset.set_epoch(epoch)

    total = 0.0
    count = 0

    with torch.set_grad_enabled(training):
        for batch in loader:
            batch = [tensor.to(device) for tensor in batch]
            loss = loss_fn(model, batch)

            if training:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                if scheduler is not None:
                    scheduler.step()

            total += float(loss.detach()) * len(batch[0])
            count += len(batch[0])

    return total / max(count, 1)
