"""
Supervised fine-tuning of encoder + MLP head, test-set prediction and per-fold evaluation
"""
from __future__ import annotations

import dataclasses
import logging
import pathlib
import typing
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabelledDataset, make_loader, stack_volumes
from .exceptions import ContractViolationError, StateError
from .jobs import transient_failures
from .metrics import FoldMetrics, auprc, auroc, f1
from .models import Checkpoint, Classifier, EncoderSpec, HeadSpec, log_parameters
from .phantom import Sample
from .splits import ALLOWED_FRACTIONS, SplitPlan, fraction_key, take_fraction
from .training import derive_seed, fit, seed_rngs, write_history
from .volume import AugmentationPolicy, PathLike

DEFAULT_LOGGER_NAME = 'ms-ssl.finetune'

SCRATCH = 'scratch'
PRETRAINED_STAGES = ('ssl', 'ae', 'dae')


@dataclass(frozen=True)
class FinetuneConfig:
    init: str = SCRATCH
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 16
    label_fraction: float = 0.1
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0

    def diagnostics(self, prefix: str = 'finetune') -> typing.List[typing.Tuple[str, str]]:
        result = []

        if self.lr <= 0:
            result.append((f'{prefix}.lr', 'must be > 0'))

        if self.weight_decay < 0:
            result.append((f'{prefix}.weight_decay', 'must be >= 0'))

        if self.epochs < 1:
            result.append((f'{prefix}.epochs', 'must be >= 1'))

        if self.batch_size < 1:
            result.append((f'{prefix}.batch_size', 'must be >= 1'))

        if fraction_key(self.label_fraction) not in ALLOWED_FRACTIONS:
            allowed = ', '.join(str(fraction) for fraction in ALLOWED_FRACTIONS)
            result.append((f'{prefix}.label_fraction', f'must be one of {allowed}'))

        return result + self.augmentation.diagnostics(f'{prefix}.augmentation')

    @classmethod
    def from_dict(cls, data: dict) -> FinetuneConfig:
        data = dict(data or {})
        data['augmentation'] = AugmentationPolicy.from_dict(data.get('augmentation'))

        return cls(**data)

    def to_dict(self) -> dict:
        result = dataclasses.asdict(self)
        result['augmentation'] = self.augmentation.to_dict()

        return result


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of both logits against one-hot targets"""
    return F.binary_cross_entropy_with_logits(logits, F.one_hot(labels, logits.shape[1]).to(logits.dtype))


def resolve_init(cfg: FinetuneConfig, encoder: EncoderSpec) -> typing.Optional[Checkpoint]:
    if cfg.init == SCRATCH:
        return None

    if not pathlib.Path(cfg.init).is_file():
        raise StateError(f'Initial checkpoint {cfg.init} does not exist')

    return Checkpoint.load(cfg.init, expect={'encoder': encoder})


def finetune(
        encoder: EncoderSpec,
        head: HeadSpec,
        train: typing.Sequence[Sample],
        val: typing.Sequence[Sample],
        cfg: FinetuneConfig,
        *,
        init: Checkpoint = None,
        device: torch.device = None,
        history_path: PathLike = None,
        logger: logging.Logger = None,
) -> Checkpoint:
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    init = resolve_init(cfg, encoder) if init is None else init
    classifier = Classifier(encoder, head)

    if init is not None:
        if init.stage not in PRETRAINED_STAGES:
            raise StateError(f'{init!r} cannot initialize fine-tuning')

        init.restore('encoder', classifier.encoder)
        log.info('Initialized encoder from %r', init)

    log_parameters('classifier', classifier, log)

    train_loader = make_loader(
            LabelledDataset(train, policy=cfg.augmentation, seed=cfg.seed),
            cfg.batch_size,
            shuffle=True,
            seed=cfg.seed,
    )
    val_loader = None

    if val:
        val_loader = make_loader(LabelledDataset(val), cfg.batch_size, shuffle=False)

    optimizer = torch.optim.AdamW(classifier.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    log.info('Fine-tuning on %d samples, validating on %d', len(train), len(val))

    result = fit(
            classifier,
            lambda model, batch: classification_loss(model(batch[0]), batch[1]),
            train_loader,
            val_loader,
            optimizer,
            epochs=cfg.epochs,
            device=device,
            name='classifier',
            logger=log,
    )

    if history_path is not None:
        write_history(result.history, history_path)

    classifier.cpu()

    return Checkpoint.from_modules(
            'finetuned' if init is not None else 'scratch',
            {'encoder': classifier.encoder, 'head': classifier.head},
            config={**cfg.to_dict(), 'init_stage': None if init is None else init.stage},
            epoch=result.best_epoch,
            val_loss=result.best_val_loss,
    )


@torch.no_grad()
def predict(
        checkpoint: Checkpoint,
        samples: typing.Sequence[Sample],
        *,
        batch_size: int = 16,
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Positive-class softmax probabilities and argmax predictions"""
    encoder = checkpoint.module('encoder').eval()
    head = checkpoint.module('head').eval()
    scores = []

    for start in range(0, len(samples), batch_size):
        batch = stack_volumes([sample.volume for sample in samples[start:start + batch_size]])
        scores.append(torch.softmax(head(encoder(batch)), dim=1)[:, 1].numpy())

    scores = np.concatenate(scores) if scores else np.zeros(0)

    return scores.astype(np.float64), (scores > 0.5).astype(np.int64)


def evaluate(
        checkpoint: Checkpoint,
        plan: SplitPlan,
        fold: int,
        *,
        batch_size: int = 16,
        logger: logging.Logger = None,
) -> FoldMetrics:
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    if checkpoint.stage not in ('finetuned', 'scratch'):
        raise StateError(f'{checkpoint!r} is not a classifier')

    if plan.test_access[fold]:
        log.error('Test set of fold %d was already read in this session', fold)

        raise ContractViolationError(f'Test set of fold {fold} can be read once per session')

    test = plan.test_samples(fold)

    scores, preds = predict(checkpoint, test, batch_size=batch_size)
    labels = np.asarray([int(sample.label) for sample in test])

    metrics = FoldMetrics(fold, auroc(scores, labels), auprc(scores, labels), f1(preds, labels), len(test))

    log.info('Fold %d: AUROC %.3f, AUPRC %.3f, F1 %.3f', fold, metrics.auroc, metrics.auprc, metrics.f1)

    return metrics


def fold_job(
        encoder: EncoderSpec,
        head: HeadSpec,
        plan: SplitPlan,
        fold: int,
        cfg: FinetuneConfig,
        *,
        init: Checkpoint = None,
        device: torch.device = None,
        out_dir: PathLike = None,
        logger: logging.Logger = None,
) -> FoldMetrics:
    """
    Fine-tune on the fold's label fraction, select on its validation set, then read its test set once.
    Training restarts from a seed of (cfg.seed, fold), so a retried or reordered job repeats its result.
    """
    out_dir = None if out_dir is None else pathlib.Path(out_dir)

    with transient_failures(f'fold {fold}'):
        seed_rngs(derive_seed(cfg.seed, 'fold', fold))

        checkpoint = finetune(
                encoder,
                head,
                take_fraction(plan, cfg.label_fraction, fold),
                plan.val_samples(fold),
                cfg,
                init=init,
                device=device,
                history_path=None if out_dir is None else out_dir / f'fold{fold}-history.csv',
                logger=logger,
        )

        if out_dir is not None:
            checkpoint.save(out_dir / f'fold{fold}.pt')

    return evaluate(checkpoint, plan, fold, logger=logger)
