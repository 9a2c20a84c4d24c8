"""
Stage orchestration: gen-data -> split -> train-cae -> gen-residuals -> pretrain -> finetune -> evaluate

Every stage writes into <root>/<stage>-<hash>, the hash covering the config sections of the stage and
all stages before it. A finished stage leaves a done.json marker and is skipped on rerun.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import pathlib
import traceback
import typing
from datetime import datetime, timezone

import numpy as np

from .config import PRETRAINED, ExperimentConfig, dump_config
from .exceptions import ArgumentError, ConfigError, MSSSLException, StageFailedError, StateError, format_allowed
from .finetune import evaluate, finetune
from .jobs import Job, JobRunner, run_once, transient_failures
from .metrics import MetricsReport, aggregate_folds
from .models import Checkpoint
from .phantom import Sample, generate_dataset, load_dataset, save_dataset
from .pretrain import pair_residuals, pretrain_ae, pretrain_dae, pretrain_residual
from .splits import SplitPlan, make_split, normal_only, take_fraction
from .sweeps import SweepContext, SweepTable, run_cae_fraction_sweep, run_label_fraction_sweep
from .training import derive_seed, resolve_device, seed_everything, seed_rngs
from .uad import load_residuals, reconstruction_errors, score_localization, sweep_unlabelled, train_cae

DEFAULT_LOGGER_NAME = 'ms-ssl.pipeline'

STAGES = ('gen-data', 'split', 'train-cae', 'gen-residuals', 'pretrain', 'finetune', 'evaluate')
STAGE_SECTIONS = {
    'gen-data': ('phantom',),
    'split': ('split',),
    'train-cae': ('cae', 'models.cae'),
    'gen-residuals': ('residuals',),
    'pretrain': ('pretrain', 'models.encoder', 'models.decoder'),
    'finetune': ('finetune', 'models.head'),
    'evaluate': (),
}
SWEEPS = ('label-fraction', 'cae-fraction')
DONE_MARKER = 'done.json'
STATUS_FILE = 'status.json'

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_CONFIG_ERROR = 2


def package_version() -> str:
    from . import __version__

    return __version__


def git_revision(root: pathlib.Path = None) -> typing.Optional[str]:
    """Commit of the checkout the package runs from, None outside a git checkout"""
    root = pathlib.Path(__file__).resolve().parents[1] if root is None else pathlib.Path(root)
    head = root / '.git' / 'HEAD'

    try:
        content = head.read_text().strip()

        if content.startswith('ref:'):
            content = (root / '.git' / content[4:].strip()).read_text().strip()
    except OSError:
        return None

    return content or None


class Pipeline:
    def __init__(
            self,
            config: ExperimentConfig,
            *,
            logger: logging.Logger = None,
    ) -> None:
        self._log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

        self.config = config
        self.device = resolve_device(config.device)
        self.status = {stage: {'status': 'pending'} for stage in STAGES}  # type: typing.Dict[str, dict]

        self._cache = {}  # type: typing.Dict[str, typing.Any]
        self._handlers = {
            'gen-data': self._gen_data,
            'split': self._split,
            'train-cae': self._train_cae,
            'gen-residuals': self._gen_residuals,
            'pretrain': self._pretrain,
            'finetune': self._finetune,
            'evaluate': self._evaluate,
        }

    @property
    def data_root(self) -> pathlib.Path:
        return pathlib.Path(self.config.paths.data_root)

    @property
    def output_root(self) -> pathlib.Path:
        return pathlib.Path(self.config.paths.output_root)

    @property
    def run_dir(self) -> pathlib.Path:
        return self.output_root / f'run-{self.config.section_hash(*_all_sections())}'

    def stage_hash(self, stage: str) -> str:
        sections = [section for name in STAGES[:STAGES.index(stage) + 1] for section in STAGE_SECTIONS[name]]

        return self.config.section_hash(*sections)

    def stage_dir(self, stage: str) -> pathlib.Path:
        root = self.data_root if stage == 'gen-data' else self.output_root

        return root / f'{stage}-{self.stage_hash(stage)}'

    def is_done(self, stage: str) -> bool:
        return (self.stage_dir(stage) / DONE_MARKER).is_file()

    def check(self) -> None:
        problems = self.config.diagnostics()

        if problems:
            raise ConfigError('Invalid config: ' + '; '.join(str(problem) for problem in problems))

        if not self.data_root.is_dir():
            raise ConfigError(f'Data root {self.data_root} does not exist')

    def run(self, until: str = None) -> typing.Dict[str, dict]:
        until = STAGES[-1] if until is None else until

        if until not in STAGES:
            raise ArgumentError(f'Unknown stage {until}, expected one of {format_allowed(STAGES)}')

        self.check()
        self._prepare_run()

        seed_everything(derive_seed(self.config.seed, 'run'), self.config.deterministic)

        for stage in STAGES[:STAGES.index(until) + 1]:
            self.run_stage(stage)

        return self.status

    def run_stage(self, stage: str) -> None:
        directory = self.stage_dir(stage)

        if self.is_done(stage):
            self._log.info('Stage %s is done, skipping (%s)', stage, directory)
            self._set_status(stage, 'skipped', directory)

            return

        self._log.info('Running stage %s in %s', stage, directory)
        seed_everything(derive_seed(self.config.seed, stage), self.config.deterministic)
        self._set_status(stage, 'running', directory)
        directory.mkdir(parents=True, exist_ok=True)

        try:
            self._handlers[stage](directory)
        except Exception as e:
            self._log.error('Stage %s failed: %s', stage, repr(e))
            self._set_status(stage, 'failed', directory, error=repr(e), trace=traceback.format_exc())

            raise StageFailedError(stage, str(e)) from e

        (directory / DONE_MARKER).write_text(json.dumps({'stage': stage, 'finished': _now()}))
        self._set_status(stage, 'done', directory)

    def run_sweep(self, kind: str = 'label-fraction') -> SweepTable:
        if kind not in SWEEPS:
            raise ArgumentError(f'Unknown sweep {kind}, expected one of {format_allowed(SWEEPS)}')

        until = 'pretrain' if kind == 'label-fraction' else 'split'
        self.run(until)

        directory = self.output_root / f'sweep-{kind}-{self.stage_hash("finetune")}-{self.config.section_hash("sweep")}'

        if kind == 'cae-fraction':
            return run_cae_fraction_sweep(
                    self.plan(),
                    self.pool(),
                    self.config.sweep.cae_fractions,
                    self.sweep_context(),
                    out_dir=directory,
                    logger=self._log,
            )

        checkpoints = {}

        for method in self.config.sweep.methods:
            if method == 'scratch':
                checkpoints[method] = None
            elif method == self.config.pretrain.task:
                checkpoints[method] = self.pretrained()
            else:
                checkpoints[method] = self._baseline(method, directory / 'baselines')

        return run_label_fraction_sweep(
                self.plan(),
                checkpoints,
                self.config.sweep.fractions,
                self.sweep_context(),
                out_dir=directory,
                logger=self._log,
        )

    def sweep_context(self) -> SweepContext:
        cfg = self.config

        return SweepContext(
                cfg.models.encoder,
                cfg.models.decoder,
                cfg.models.head,
                cfg.finetune,
                cae_spec=cfg.models.cae,
                cae=cfg.cae,
                pretrain=cfg.pretrain,
                kernel=cfg.residuals.kernel,
                workers=cfg.workers,
                device=self.device,
        )

    # artifact accessors, loaded once per pipeline

    def labelled(self) -> typing.List[Sample]:
        return self._cached('labelled', lambda: load_dataset(self.stage_dir('gen-data') / 'labelled' / 'manifest.json'))

    def pool(self) -> typing.List[Sample]:
        return self._cached('pool', lambda: load_dataset(self.stage_dir('gen-data') / 'unlabelled' / 'manifest.json'))

    def plan(self) -> SplitPlan:
        return self._cached('plan', lambda: SplitPlan.load(self.stage_dir('split') / 'plan.json', self.labelled()))

    def cae_checkpoint(self) -> Checkpoint:
        return self._cached('cae', lambda: Checkpoint.load(
                self.stage_dir('train-cae') / 'cae.pt',
                expect={'cae': self.config.models.cae},
        ))

    def pretrained(self) -> Checkpoint:
        return self._cached('pretrained', lambda: Checkpoint.load(
                self.stage_dir('pretrain') / f'{self.config.pretrain.task}.pt',
                expect={'encoder': self.config.models.encoder, 'decoder': self.config.models.decoder},
        ))

    def report(self) -> MetricsReport:
        path = self.stage_dir('evaluate') / 'metrics.json'

        if not path.is_file():
            raise StateError(f'No metrics report at {path}')

        return MetricsReport.from_dict(json.loads(path.read_text()))

    # stages

    def _gen_data(self, directory: pathlib.Path) -> None:
        for pool in ('labelled', 'unlabelled'):
            samples = generate_dataset(self.config.phantom, pool=pool, logger=self._log)
            save_dataset(samples, directory / pool)

    def _split(self, directory: pathlib.Path) -> None:
        cfg = self.config.split
        plan = make_split(
                self.labelled(),
                cfg.fold_count,
                cfg.seed,
                test_ratio=cfg.test_ratio,
                val_ratio=cfg.val_ratio,
                logger=self._log,
        )
        plan.save(directory / 'plan.json')

    def _train_cae(self, directory: pathlib.Path) -> None:
        plan = self.plan()
        normal_val = [sample for sample in plan.val_samples(0) if not sample.is_anomalous]

        def train() -> pathlib.Path:
            seed_rngs(derive_seed(self.config.seed, 'train-cae'))

            checkpoint = train_cae(
                    normal_only(plan, 1.0, fold=0),
                    self.config.cae,
                    spec=self.config.models.cae,
                    val=normal_val or None,
                    device=self.device,
                    history_path=directory / 'history.csv',
                    logger=self._log,
            )

            return checkpoint.save(directory / 'cae.pt')

        run_once('train-cae', train, logger=self._log)

    def _gen_residuals(self, directory: pathlib.Path) -> None:
        sweep_unlabelled(
                self.cae_checkpoint(),
                [sample.unlabelled() for sample in self.pool()],
                directory,
                kernel=self.config.residuals.kernel,
                batch_size=self.config.residuals.batch_size,
                logger=self._log,
        )

    def _pretrain(self, directory: pathlib.Path) -> None:
        cfg = self.config
        pool = [sample.unlabelled() for sample in self.pool()]
        kwargs = dict(device=self.device, history_path=directory / 'history.csv', logger=self._log)

        if cfg.pretrain.task == 'residual':
            residuals = load_residuals(self.stage_dir('gen-residuals') / 'residuals.json')
            inputs, train = pair_residuals(pool, residuals), pretrain_residual
        else:
            inputs, train = pool, pretrain_ae if cfg.pretrain.task == 'ae' else pretrain_dae

        def job() -> pathlib.Path:
            seed_rngs(derive_seed(cfg.seed, 'pretrain'))

            checkpoint = train(cfg.models.encoder, cfg.models.decoder, inputs, cfg.pretrain, **kwargs)

            return checkpoint.save(directory / f'{cfg.pretrain.task}.pt')

        run_once('pretrain', job, logger=self._log)

    def _finetune(self, directory: pathlib.Path) -> None:
        cfg = self.config
        init, finetune_cfg = None, cfg.finetune

        if cfg.finetune.init == PRETRAINED:
            init, finetune_cfg = self.pretrained(), dataclasses.replace(cfg.finetune, init='scratch')

        plan = self.plan()

        def train_fold(fold: int) -> typing.Callable[[], str]:
            def job() -> str:
                with transient_failures(f'fold {fold}'):
                    seed_rngs(derive_seed(finetune_cfg.seed, 'fold', fold))

                    checkpoint = finetune(
                            cfg.models.encoder,
                            cfg.models.head,
                            take_fraction(plan, finetune_cfg.label_fraction, fold),
                            plan.val_samples(fold),
                            finetune_cfg,
                            init=init,
                            device=self.device,
                            history_path=directory / f'fold{fold}-history.csv',
                            logger=self._log,
                    )

                    return str(checkpoint.save(directory / f'fold{fold}.pt'))

            return job

        runner = JobRunner('finetune', workers=cfg.workers, logger=self._log)
        runner.run([Job(f'fold{fold}', train_fold(fold)) for fold in range(plan.fold_count)])

        if runner.failures:
            raise StateError(f'{len(runner.failures)} fold(s) failed: {", ".join(sorted(runner.failures))}')

    def _evaluate(self, directory: pathlib.Path) -> None:
        plan = self.plan().session()
        folds = []

        for fold in range(plan.fold_count):
            checkpoint = Checkpoint.load(
                    self.stage_dir('finetune') / f'fold{fold}.pt',
                    expect={'encoder': self.config.models.encoder, 'head': self.config.models.head},
            )
            folds.append(evaluate(checkpoint, plan, fold, logger=self._log))

        report = aggregate_folds(folds, resampling_ratio=plan.resampling_ratio())
        (directory / 'metrics.json').write_text(json.dumps(report.to_dict(), indent=2))

        self._log.info(
                'Cross-validated AUROC %s, AUPRC %s, F1 %s',
                report.auroc.format(),
                report.auprc.format(),
                report.f1.format(),
        )

        pool = self.pool()

        if any(sample.gt_mask is not None for sample in pool) and any(sample.gt_mask is None for sample in pool):
            errors = reconstruction_errors(self.cae_checkpoint(), pool)
            anomalous = np.asarray([sample.gt_mask is not None for sample in pool])
            uad = {
                'normal_l1': float(errors[~anomalous].mean()),
                'anomalous_l1': float(errors[anomalous].mean()),
                'dice': score_localization(
                        self.cae_checkpoint(),
                        pool,
                        kernel=self.config.residuals.kernel,
                        percentile=self.config.residuals.threshold_percentile,
                ),
            }
            (directory / 'uad.json').write_text(json.dumps(uad, indent=2))

            self._log.info('CAE residual L1 normal %.4f, anomalous %.4f, Dice %.3f', *uad.values())

    # helpers

    def _baseline(self, method: str, directory: pathlib.Path) -> Checkpoint:
        path = directory / f'{method}-{self.stage_hash("pretrain")}.pt'

        if path.is_file():
            return Checkpoint.load(path, expect={'encoder': self.config.models.encoder})

        cfg = self.config
        pool = [sample.unlabelled() for sample in self.pool()]
        train = pretrain_ae if method == 'ae' else pretrain_dae

        def job() -> Checkpoint:
            seed_rngs(derive_seed(cfg.seed, 'baseline', method))

            checkpoint = train(
                    cfg.models.encoder,
                    cfg.models.decoder,
                    pool,
                    dataclasses.replace(cfg.pretrain, task=method),
                    device=self.device,
                    history_path=directory / f'{method}-history.csv',
                    logger=self._log,
            )
            checkpoint.save(path)

            return checkpoint

        return run_once(f'{method} baseline', job, logger=self._log)

    def _cached(self, key: str, load: typing.Callable[[], typing.Any]) -> typing.Any:
        if key not in self._cache:
            self._cache[key] = load()

        return self._cache[key]

    def _prepare_run(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)

        dump_config(self.config, self.run_dir / 'config.yaml')
        (self.run_dir / 'provenance.json').write_text(json.dumps({
            'seed': self.config.seed,
            'version': package_version(),
            'git_revision': git_revision(),
            'deterministic': self.config.deterministic,
            'device': str(self.device),
            'started': _now(),
            'stages': {stage: str(self.stage_dir(stage)) for stage in STAGES},
        }, indent=2))

        self._write_status()

    def _set_status(self, stage: str, status: str, directory: pathlib.Path, **details) -> None:
        self.status[stage] = {'status': status, 'dir': str(directory), 'stamp': _now(), **details}

        self._write_status()

    def _write_status(self) -> None:
        if self.run_dir.is_dir():
            (self.run_dir / STATUS_FILE).write_text(json.dumps(self.status, indent=2))


def run_pipeline(
        config: ExperimentConfig,
        *,
        until: str = None,
        logger: logging.Logger = None,
) -> int:
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    try:
        Pipeline(config, logger=logger).run(until)
    except ConfigError as e:
        log.error('%s', e)

        return EXIT_CONFIG_ERROR
    except ArgumentError as e:
        log.error('%s', e)

        return EXIT_CONFIG_ERROR
    except (StageFailedError, MSSSLException) as e:
        log.error('%s', e)

        return EXIT_STAGE_FAILED

    return EXIT_OK


def _all_sections() -> typing.List[str]:
    return [section for sections in STAGE_SECTIONS.values() for section in sections] + ['sweep']


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')
