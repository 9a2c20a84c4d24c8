"""
Torch datasets over volumes

Every item draws its augmentation from a stream derived from (seed, epoch, index) so a run is
reproducible regardless of loader order. Corruption noise has its own stream, a zero corruption
leaves the augmented input untouched.
"""
import typing

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .exceptions import DataError
from .phantom import Sample
from .volume import AugmentationPolicy, Volume, apply_augmentation, draw_augmentation

CORRUPTION_STREAM = 1


def to_tensor(volume: Volume) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32)).unsqueeze(0)


def stack_volumes(volumes: typing.Sequence[Volume]) -> torch.Tensor:
    return torch.stack([to_tensor(volume) for volume in volumes])


class EpochDataset(Dataset):
    def __init__(self, policy: AugmentationPolicy = None, seed: int = 0) -> None:
        self.policy = policy or AugmentationPolicy.disabled()
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _rng(self, index: int, *stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.epoch, index, *stream])


class ReconstructionDataset(EpochDataset):
    """
    (input, target) pairs. The target follows only the geometric part of the augmentation draw, either
    of the source itself or of the explicit target. Noise and corruption touch the input alone.
    """

    def __init__(
            self,
            inputs: typing.Sequence[Volume],
            targets: typing.Sequence[Volume] = None,
            *,
            policy: AugmentationPolicy = None,
            seed: int = 0,
            corruption_std: float = 0.0,
            corruption_mean: float = 0.0,
    ) -> None:
        super().__init__(policy, seed)

        if targets is not None and len(targets) != len(inputs):
            raise DataError(f'Got {len(inputs)} inputs but {len(targets)} targets')

        self.inputs = list(inputs)
        self.targets = None if targets is None else list(targets)
        self.corruption_std = corruption_std
        self.corruption_mean = corruption_mean

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, index: int) -> typing.Tuple[torch.Tensor, torch.Tensor]:
        source = self.inputs[index]
        draw = draw_augmentation(self.policy, self._rng(index), source.shape)
        x = apply_augmentation(source, draw)

        target = source if self.targets is None else self.targets[index]
        y = apply_augmentation(target, draw, geometric_only=True)

        if self.corruption_std > 0:
            noise = self._rng(index, CORRUPTION_STREAM).normal(self.corruption_mean, self.corruption_std, x.shape)
            x = x.with_data(np.clip(x.data + noise, 0.0, 1.0))

        return to_tensor(x), to_tensor(y)


class LabelledDataset(EpochDataset):
    def __init__(self, samples: typing.Sequence[Sample], *, policy: AugmentationPolicy = None, seed: int = 0) -> None:
        super().__init__(policy, seed)

        unlabelled = [sample.id for sample in samples if not sample.is_labelled]

        if unlabelled:
            raise DataError(f'Supervised data contains unlabelled sample {unlabelled[0]}')

        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> typing.Tuple[torch.Tensor, torch.Tensor]:
        sample = self.samples[index]
        draw = draw_augmentation(self.policy, self._rng(index), sample.volume.shape)

        return to_tensor(apply_augmentation(sample.volume, draw)), torch.tensor(int(sample.label))


def make_loader(dataset: Dataset, batch_size: int, *, shuffle: bool, seed: int = 0) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(seed)

    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator, num_workers=0)


def holdout(items: typing.Sequence, fraction: float, seed: int) -> typing.Tuple[list, list]:
    """Seeded split of items into (train, validation), at least one item on each side when possible"""
    if fraction <= 0 or len(items) < 2:
        return list(items), []

    order = np.random.default_rng(seed).permutation(len(items))
    count = min(len(items) - 1, max(1, int(round(fraction * len(items)))))
    chosen = set(order[:count].tolist())

    return (
        [item for index, item in enumerate(items) if index not in chosen],
        [item for index, item in enumerate(items) if index in chosen],
    )
