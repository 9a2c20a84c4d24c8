from .config import ExperimentConfig, dump_config, load_config, parse_config, validate_config
from .exceptions import (
    ArgumentError, ConfigError, ConfigParseError, ContractViolationError, DataError, DimensionError, MSSSLException,
    SpecMismatchError, StageFailedError, StateError, VolumeIOError, VolumeValidationError,
)
from .finetune import FinetuneConfig, evaluate, finetune, predict
from .jobs import Job, JobRunner
from .metrics import FoldMetrics, MetricsReport, aggregate_folds, auprc, auroc, f1
from .models import CAE, CAESpec, Checkpoint, Classifier, DecoderSpec, EncoderSpec, HeadSpec, SSLNetwork
from .optim import Lars, build_lars, lr_at
from .phantom import Label, PhantomConfig, Sample, UnlabelledSample, generate_dataset, inject_anomaly
from .pipeline import STAGES, Pipeline, run_pipeline
from .pretrain import PretrainConfig, pretrain_ae, pretrain_dae, pretrain_residual
from .splits import SplitPlan, make_split, normal_only, take_fraction
from .sweeps import run_cae_fraction_sweep, run_label_fraction_sweep
from .uad import CAEConfig, ResidualSample, postprocess_residual, residual, sweep_unlabelled, train_cae
from .volume import AugmentationPolicy, Volume, augment, crop_subvolume, flip_lr, load_volume, normalize

__version__ = '0.1.0'

__all__ = [
    'ArgumentError', 'AugmentationPolicy', 'CAE', 'CAEConfig', 'CAESpec', 'Checkpoint', 'Classifier', 'ConfigError',
    'ConfigParseError', 'ContractViolationError', 'DataError', 'DecoderSpec', 'DimensionError', 'EncoderSpec',
    'ExperimentConfig', 'FinetuneConfig', 'FoldMetrics', 'HeadSpec', 'Job', 'JobRunner', 'Label', 'Lars',
    'MSSSLException', 'MetricsReport', 'PhantomConfig', 'Pipeline', 'PretrainConfig', 'ResidualSample', 'SSLNetwork',
    'STAGES', 'Sample', 'SpecMismatchError', 'SplitPlan', 'StageFailedError', 'StateError', 'UnlabelledSample',
    'Volume', 'VolumeIOError', 'VolumeValidationError', 'aggregate_folds', 'augment', 'auprc', 'auroc', 'build_lars',
    'crop_subvolume', 'dump_config', 'evaluate', 'f1', 'finetune', 'flip_lr', 'generate_dataset', 'inject_anomaly',
    'load_config', 'load_volume', 'lr_at', 'make_split', 'normal_only', 'normalize', 'parse_config',
    'postprocess_residual', 'predict', 'pretrain_ae', 'pretrain_dae', 'pretrain_residual', 'residual',
    'run_cae_fraction_sweep', 'run_label_fraction_sweep', 'run_pipeline', 'sweep_unlabelled', 'take_fraction',
    'train_cae', 'validate_config',
]
