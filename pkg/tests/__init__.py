from .stubs import (
    FAST_CAE, FAST_FINETUNE, FAST_PRETRAIN, SMALL_PHANTOM, TINY_CAE, TINY_DECODER, TINY_ENCODER, TINY_HEAD,
    TINY_PHANTOM, acceptance, balanced_samples, make_samples, mock_logger, random_volume, tiny_config, unlabelled,
)

__all__ = [
    'FAST_CAE', 'FAST_FINETUNE', 'FAST_PRETRAIN', 'SMALL_PHANTOM', 'TINY_CAE', 'TINY_DECODER', 'TINY_ENCODER',
    'TINY_HEAD', 'TINY_PHANTOM', 'acceptance', 'balanced_samples', 'make_samples', 'mock_logger', 'random_volume',
    'tiny_config', 'unlabelled',
]
