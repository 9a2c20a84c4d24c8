"""
Label-fraction and CAE-training-fraction experiment sweeps, their result tables and plots

Every (method, fraction, fold) cell is an independent job. A pretrained checkpoint is computed once
and reused for every fraction.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import pathlib
import typing
from dataclasses import dataclass, field

import matplotlib
import torch

from .exceptions import ArgumentError, SpecMismatchError, StateError, format_allowed
from .finetune import FinetuneConfig, fold_job
from .jobs import Job, JobRunner, run_once
from .metrics import METRICS, MetricsReport, aggregate_folds
from .models import CAESpec, Checkpoint, DecoderSpec, EncoderSpec, HeadSpec
from .phantom import Sample
from .pretrain import PretrainConfig, pair_residuals, pretrain_residual
from .splits import ALLOWED_FRACTIONS, SplitPlan, fraction_key, normal_only
from .training import derive_seed, seed_rngs
from .uad import CAEConfig, score_localization, sweep_unlabelled, train_cae
from .volume import PathLike

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402

DEFAULT_LOGGER_NAME = 'ms-ssl.sweeps'

METHODS = ('residual', 'ae', 'dae', 'scratch')
CAE_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
PLOTTED_METRICS = ('auprc', 'auroc')


@dataclass
class SweepContext:
    encoder: EncoderSpec
    decoder: DecoderSpec
    head: HeadSpec
    finetune: FinetuneConfig
    cae_spec: CAESpec = field(default_factory=CAESpec)
    cae: CAEConfig = field(default_factory=CAEConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    kernel: typing.Optional[int] = 5
    workers: int = 1
    folds: typing.Optional[typing.Sequence[int]] = None
    device: torch.device = None

    def fold_ids(self, plan: SplitPlan) -> typing.List[int]:
        return list(range(plan.fold_count)) if self.folds is None else list(self.folds)


@dataclass
class SweepRow:
    method: str
    fraction: float
    report: typing.Optional[MetricsReport] = None
    status: str = 'ok'
    extras: typing.Dict[str, float] = field(default_factory=dict)


@dataclass
class SweepTable:
    rows: typing.List[SweepRow] = field(default_factory=list)

    def methods(self) -> typing.List[str]:
        return list(dict.fromkeys(row.method for row in self.rows))

    def for_method(self, method: str) -> typing.List[SweepRow]:
        return sorted((row for row in self.rows if row.method == method), key=lambda row: row.fraction)

    def sorted_rows(self) -> typing.List[SweepRow]:
        return [row for method in self.methods() for row in self.for_method(method)]

    def to_csv(self, path: PathLike) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        extras = sorted({name for row in self.rows for name in row.extras})
        header = ['method', 'fraction', 'status', 'n_folds']

        for metric in METRICS:
            header.extend([f'{metric}_mean', f'{metric}_ci95_low', f'{metric}_ci95_high'])

        with path.open('w', newline='') as stream:
            writer = csv.writer(stream)
            writer.writerow(header + extras)

            for row in self.sorted_rows():
                values = [row.method, row.fraction, row.status, 0 if row.report is None else row.report.n_folds]

                for metric in METRICS:
                    if row.report is None:
                        values.extend(['', '', ''])
                    else:
                        summary = row.report.summaries[metric]
                        values.extend([summary.mean, summary.ci95_low, summary.ci95_high])

                writer.writerow(values + [row.extras.get(name, '') for name in extras])

        return path

    def to_dict(self) -> dict:
        return {
            'rows': [
                {
                    'method': row.method,
                    'fraction': row.fraction,
                    'status': row.status,
                    'extras': row.extras,
                    'report': None if row.report is None else row.report.to_dict(),
                }
                for row in self.sorted_rows()
            ],
        }


def run_label_fraction_sweep(
        plan: SplitPlan,
        checkpoints: typing.Mapping[str, typing.Union[None, Checkpoint, PathLike]],
        fractions: typing.Sequence[float],
        context: SweepContext,
        *,
        out_dir: PathLike = None,
        logger: logging.Logger = None,
) -> SweepTable:
    """One MetricsReport per (method, fraction), methods without a usable checkpoint are skipped"""
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    _check_fractions(fractions, ALLOWED_FRACTIONS)

    table = SweepTable()
    inits = {}

    for method, checkpoint in checkpoints.items():
        if method not in METHODS:
            raise ArgumentError(f'Unknown method {method}, expected one of {format_allowed(METHODS)}')

        if method == 'scratch':
            inits[method] = None
            continue

        try:
            inits[method] = _resolve_checkpoint(checkpoint, context.encoder)
        except (StateError, SpecMismatchError) as e:
            log.warning('Skipping method %s: %s', method, e)

            table.rows.extend(SweepRow(method, fraction, status='skipped') for fraction in fractions)

    cells = [(method, fraction) for method in inits for fraction in sorted(fractions)]
    table.rows.extend(_run_cells(plan, cells, inits, context, out_dir, log))

    if out_dir is not None:
        write_sweep(table, out_dir, 'label-fraction')

    return table


def run_cae_fraction_sweep(
        plan: SplitPlan,
        pool: typing.Sequence[Sample],
        fractions: typing.Sequence[float] = CAE_FRACTIONS,
        context: SweepContext = None,
        *,
        out_dir: PathLike,
        logger: logging.Logger = None,
) -> SweepTable:
    """
    Per fraction of training normals: retrain the CAE, regenerate pool residuals, pretrain,
    then fine-tune with the configured label fraction on every fold
    """
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    if context is None:
        raise ArgumentError('CAE fraction sweep needs a sweep context')

    _check_fractions(fractions, CAE_FRACTIONS)

    out_dir = pathlib.Path(out_dir)
    table = SweepTable()
    unlabelled = [sample.unlabelled() for sample in pool]

    for fraction in sorted(fractions):
        cell_dir = out_dir / f'cae-{fraction_key(fraction):g}'
        normals = normal_only(plan, fraction, fold=0)

        log.info('CAE fraction %g: training on %d normals', fraction, len(normals))

        def fit_cae() -> Checkpoint:
            seed_rngs(derive_seed(context.cae.seed, 'cae-fraction', fraction_key(fraction)))

            return train_cae(
                    normals,
                    context.cae,
                    spec=context.cae_spec,
                    device=context.device,
                    history_path=cell_dir / 'cae-history.csv',
                    logger=log,
            )

        cae = run_once(f'cae {fraction:g}', fit_cae, logger=log)
        residuals = sweep_unlabelled(cae, unlabelled, cell_dir / 'residuals', kernel=context.kernel, logger=log)
        extras = {'n_normals': float(len(normals))}

        if {sample.gt_mask is None for sample in pool} == {True, False}:
            extras['dice'] = score_localization(cae, pool, kernel=context.kernel)

        pretrained = pretrain_residual(
                context.encoder,
                context.decoder,
                pair_residuals(unlabelled, residuals),
                dataclasses.replace(context.pretrain, task='residual'),
                device=context.device,
                history_path=cell_dir / 'pretrain-history.csv',
                logger=log,
        )

        rows = _run_cells(
                plan,
                [('residual', context.finetune.label_fraction)],
                {'residual': pretrained},
                context,
                cell_dir,
                log,
        )

        for row in rows:
            table.rows.append(dataclasses.replace(row, fraction=fraction, extras={**row.extras, **extras}))

    write_sweep(table, out_dir, 'cae-fraction')

    return table


def plot_sweep(table: SweepTable, out_dir: PathLike, name: str) -> typing.List[pathlib.Path]:
    """Metric vs training-set percentage, one line per method with its confidence band"""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    for metric in PLOTTED_METRICS:
        fig, ax = plt.subplots(figsize=(6, 4))

        for method in table.methods():
            rows = [row for row in table.for_method(method) if row.report is not None]

            if not rows:
                continue

            summaries = [row.report.summaries[metric] for row in rows]
            x = [100 * row.fraction for row in rows]

            ax.plot(x, [summary.mean for summary in summaries], marker='o', label=method)
            ax.fill_between(
                    x,
                    [summary.ci95_low for summary in summaries],
                    [summary.ci95_high for summary in summaries],
                    alpha=0.2,
            )

        ax.set_xlabel('Training set (%)')
        ax.set_ylabel(metric.upper())
        ax.set_ylim(0.0, 1.0)
        ax.grid(True, alpha=0.3)

        if ax.lines:
            ax.legend(loc='lower right')

        fig.tight_layout()
        paths.append(out_dir / f'{name}-{metric}.png')
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)

    return paths


def write_sweep(table: SweepTable, out_dir: PathLike, name: str) -> typing.List[pathlib.Path]:
    out_dir = pathlib.Path(out_dir)

    return [table.to_csv(out_dir / f'{name}.csv'), *plot_sweep(table, out_dir, name)]


def _run_cells(
        plan: SplitPlan,
        cells: typing.Sequence[typing.Tuple[str, float]],
        inits: typing.Mapping[str, typing.Optional[Checkpoint]],
        context: SweepContext,
        out_dir: typing.Optional[PathLike],
        log: logging.Logger,
) -> typing.List[SweepRow]:
    jobs = []
    sessions = {}

    for method, fraction in cells:
        sessions[method, fraction] = plan.session()
        cfg = dataclasses.replace(context.finetune, label_fraction=fraction)
        cell_dir = None if out_dir is None else pathlib.Path(out_dir) / f'{method}-{fraction_key(fraction):g}'

        for fold in context.fold_ids(plan):
            jobs.append(Job(
                    _job_name(method, fraction, fold),
                    _bind_fold(context, sessions[method, fraction], fold, cfg, inits[method], cell_dir, log),
            ))

    runner = JobRunner('sweep', workers=context.workers, logger=log)
    results = runner.run(jobs)
    rows = []

    for method, fraction in cells:
        folds = [
            results[_job_name(method, fraction, fold)]
            for fold in context.fold_ids(plan)
            if _job_name(method, fraction, fold) in results
        ]

        if len(folds) < 2:
            log.error('Cell %s at %g has %d successful folds, no report', method, fraction, len(folds))
            rows.append(SweepRow(method, fraction, status='failed'))
            continue

        report = aggregate_folds(folds, resampling_ratio=plan.resampling_ratio())
        log.info('%s at %g: AUROC %s, AUPRC %s', method, fraction, report.auroc.format(), report.auprc.format())
        rows.append(SweepRow(method, fraction, report))

    return rows


def _bind_fold(
        context: SweepContext,
        plan: SplitPlan,
        fold: int,
        cfg: FinetuneConfig,
        init: typing.Optional[Checkpoint],
        cell_dir: typing.Optional[pathlib.Path],
        log: logging.Logger,
) -> typing.Callable:
    return lambda: fold_job(
            context.encoder,
            context.head,
            plan,
            fold,
            dataclasses.replace(cfg, init='scratch'),
            init=init,
            device=context.device,
            out_dir=cell_dir,
            logger=log,
    )


def _resolve_checkpoint(checkpoint: typing.Union[None, Checkpoint, PathLike], encoder: EncoderSpec) -> Checkpoint:
    if checkpoint is None:
        raise StateError('no checkpoint given')

    if isinstance(checkpoint, Checkpoint):
        checkpoint.check('encoder', encoder)

        return checkpoint

    if not pathlib.Path(checkpoint).is_file():
        raise StateError(f'checkpoint {checkpoint} does not exist')

    return Checkpoint.load(checkpoint, expect={'encoder': encoder})


def _check_fractions(fractions: typing.Sequence[float], allowed: typing.Sequence[float]) -> None:
    unknown = [fraction for fraction in fractions if fraction_key(fraction) not in allowed]

    if unknown or not fractions:
        raise ArgumentError(f'Fractions must be a nonempty subset of {format_allowed(allowed)}, got {list(fractions)}')


def _job_name(method: str, fraction: float, fold: int) -> str:
    return f'{method}@{fraction_key(fraction):g}/fold{fold}'
