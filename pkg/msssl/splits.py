"""
Patient-level train/val/test partitioning with rotating-window cross-validation

Test windows are disjoint when test_ratio * fold_count <= 1. Larger test shares (the clinical cohort
proportions use 30%) make neighbouring windows overlap, every patient is then tested in one or two folds.

Patients are stratified by their number of anomalous sides (0, 1 or 2) so both sample classes keep
the cohort proportions in every split. Fraction lists are nested prefixes of one seeded ordering.
"""
from __future__ import annotations

import collections
import dataclasses
import json
import logging
import math
import pathlib
import typing
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ArgumentError, DataError, SplitError, format_allowed
from .phantom import Label, Sample
from .volume import PathLike

DEFAULT_LOGGER_NAME = 'ms-ssl.splits'

ALLOWED_FRACTIONS = (0.1, 0.2, 0.4, 0.6, 0.8, 1.0)
# share of samples in the test and validation sets of the clinical cohort (641 and 298 of 2134)
DEFAULT_TEST_RATIO = 641 / 2134
DEFAULT_VAL_RATIO = 298 / 2134
PLAN_VERSION = 1


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def fraction_key(fraction: float) -> float:
    return round(float(fraction), 6)


@dataclass
class FoldPlan:
    train_ids: typing.List[str]
    val_ids: typing.List[str]
    test_ids: typing.List[str]
    fraction_lists: typing.Dict[float, typing.List[str]] = field(default_factory=dict)
    normal_lists: typing.Dict[float, typing.List[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'train_ids': self.train_ids,
            'val_ids': self.val_ids,
            'test_ids': self.test_ids,
            'fraction_lists': {str(key): value for key, value in self.fraction_lists.items()},
            'normal_lists': {str(key): value for key, value in self.normal_lists.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> FoldPlan:
        return cls(
                list(data['train_ids']),
                list(data['val_ids']),
                list(data['test_ids']),
                {fraction_key(key): list(value) for key, value in data['fraction_lists'].items()},
                {fraction_key(key): list(value) for key, value in data['normal_lists'].items()},
        )


@dataclass
class SplitPlan:
    fold_count: int
    rng_seed: int
    folds: typing.List[FoldPlan]
    test_ratio: float = DEFAULT_TEST_RATIO
    val_ratio: float = DEFAULT_VAL_RATIO
    samples: typing.Dict[str, Sample] = field(default_factory=dict, repr=False)
    test_access: typing.Counter = field(default_factory=collections.Counter, repr=False)

    @property
    def fraction_lists(self) -> typing.Dict[float, typing.List[str]]:
        return self.folds[0].fraction_lists

    def fold(self, fold: int) -> FoldPlan:
        if not 0 <= fold < self.fold_count:
            raise ArgumentError(f'Fold {fold} is out of range 0..{self.fold_count - 1}')

        return self.folds[fold]

    def train_samples(self, fold: int = 0) -> typing.List[Sample]:
        return self._by_patients(self.fold(fold).train_ids)

    def val_samples(self, fold: int = 0) -> typing.List[Sample]:
        return self._by_patients(self.fold(fold).val_ids)

    def test_samples(self, fold: int = 0) -> typing.List[Sample]:
        self.test_access[fold] += 1

        return self._by_patients(self.fold(fold).test_ids)

    @property
    def overlapping_tests(self) -> bool:
        appearances = collections.Counter(patient_id for fold in self.folds for patient_id in fold.test_ids)

        return any(count > 1 for count in appearances.values())

    def resampling_ratio(self) -> float:
        """
        Mean test/train patient ratio when test windows overlap, 0 for disjoint test folds.
        Widens the interval over folds (corrected resampled t) since overlapping folds share test patients.
        """
        if not self.overlapping_tests:
            return 0.0

        return float(np.mean([len(fold.test_ids) / max(len(fold.train_ids), 1) for fold in self.folds]))

    def session(self) -> SplitPlan:
        """Same plan and samples with a fresh test access counter, one per fine-tuning experiment"""
        return dataclasses.replace(self, test_access=collections.Counter())

    def bind(self, samples: typing.Iterable[Sample]) -> SplitPlan:
        self.samples = {sample.id: sample for sample in samples}

        return self

    def resolve(self, sample_ids: typing.Iterable[str]) -> typing.List[Sample]:
        try:
            return [self.samples[sample_id] for sample_id in sample_ids]
        except KeyError as e:
            raise DataError(f'Split plan references unknown sample {e.args[0]}') from None

    def save(self, path: PathLike) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({
            'version': PLAN_VERSION,
            'fold_count': self.fold_count,
            'rng_seed': self.rng_seed,
            'test_ratio': self.test_ratio,
            'val_ratio': self.val_ratio,
            'folds': [fold.to_dict() for fold in self.folds],
        }, indent=2))

        return path

    @classmethod
    def load(cls, path: PathLike, samples: typing.Iterable[Sample] = ()) -> SplitPlan:
        try:
            content = json.loads(pathlib.Path(path).read_text())
        except (OSError, ValueError) as e:
            raise DataError(f'Could not read split plan {path}: {e}') from e

        return cls(
                content['fold_count'],
                content['rng_seed'],
                [FoldPlan.from_dict(fold) for fold in content['folds']],
                content['test_ratio'],
                content['val_ratio'],
        ).bind(samples)

    def _by_patients(self, patient_ids: typing.Iterable[str]) -> typing.List[Sample]:
        wanted = set(patient_ids)

        return [sample for sample in self.samples.values() if sample.patient_id in wanted]


def make_split(
        samples: typing.Sequence[Sample],
        fold_count: int = 5,
        seed: int = 0,
        *,
        test_ratio: float = DEFAULT_TEST_RATIO,
        val_ratio: float = DEFAULT_VAL_RATIO,
        logger: logging.Logger = None,
) -> SplitPlan:
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    if fold_count < 2:
        raise SplitError(f'Cross-validation needs at least 2 folds, got {fold_count}')

    if test_ratio <= 0 or val_ratio < 0 or test_ratio + val_ratio >= 1:
        raise SplitError(f'Invalid split ratios: test {test_ratio}, validation {val_ratio}')

    unlabelled = [sample.id for sample in samples if not sample.is_labelled]

    if unlabelled:
        raise SplitError(f'{len(unlabelled)} unlabelled sample(s) cannot be split, e.g. {unlabelled[0]}')

    patients = collections.defaultdict(list)  # type: typing.DefaultDict[str, typing.List[Sample]]

    for sample in samples:
        patients[sample.patient_id].append(sample)

    strata = {0: [], 1: [], 2: []}  # type: typing.Dict[int, typing.List[str]]

    for patient_id in sorted(patients):
        strata[min(2, sum(sample.is_anomalous for sample in patients[patient_id]))].append(patient_id)

    normal_patients = len(strata[0])
    anomalous_patients = len(strata[1]) + len(strata[2])

    if normal_patients < fold_count or anomalous_patients < fold_count:
        raise SplitError(
                f'Need at least {fold_count} patients per class, '
                f'got {normal_patients} normal and {anomalous_patients} anomalous',
        )

    rng = np.random.default_rng(seed)
    orders = {stratum: [ids[index] for index in rng.permutation(len(ids))] for stratum, ids in strata.items()}

    folds = []

    for fold in range(fold_count):
        train_ids, val_ids, test_ids = [], [], []

        for ids in orders.values():
            count = len(ids)
            n_test = min(count, round_half_up(count * test_ratio))
            n_val = min(count - n_test, round_half_up(count * val_ratio))

            # back-to-back test windows when they fit, otherwise evenly spaced ones that cover the stratum
            offset = fold * n_test if n_test * fold_count <= count else fold * count // fold_count
            rotated = ids[offset:] + ids[:offset]

            test_ids.extend(rotated[:n_test])
            val_ids.extend(rotated[n_test:n_test + n_val])
            train_ids.extend(rotated[n_test + n_val:])

        train = [sample for patient_id in sorted(train_ids) for sample in patients[patient_id]]
        fraction_lists, normal_lists = build_fraction_lists(train, np.random.default_rng([seed, fold]))

        folds.append(FoldPlan(sorted(train_ids), sorted(val_ids), sorted(test_ids), fraction_lists, normal_lists))

        log.debug(
                'Fold %d: %d train, %d validation, %d test patients',
                fold,
                len(train_ids),
                len(val_ids),
                len(test_ids),
        )

    log.info('Split %d patients into %d folds', len(patients), fold_count)

    return SplitPlan(fold_count, seed, folds, test_ratio, val_ratio).bind(samples)


def take_fraction(plan: SplitPlan, fraction: float, fold: int = 0) -> typing.List[Sample]:
    lists = plan.fold(fold).fraction_lists
    key = fraction_key(fraction)

    if key not in lists:
        raise ArgumentError(f'Unknown label fraction {fraction}, expected one of {format_allowed(sorted(lists))}')

    return plan.resolve(lists[key])


def normal_only(plan: SplitPlan, fraction: float = 1.0, fold: int = 0) -> typing.List[Sample]:
    lists = plan.fold(fold).normal_lists
    key = fraction_key(fraction)

    if key not in lists:
        raise ArgumentError(f'Unknown normal fraction {fraction}, expected one of {format_allowed(sorted(lists))}')

    return plan.resolve(lists[key])


def build_fraction_lists(
        train: typing.Sequence[Sample],
        rng: np.random.Generator,
) -> typing.Tuple[typing.Dict[float, typing.List[str]], typing.Dict[float, typing.List[str]]]:
    by_class = {}

    for label in Label:
        ids = sorted(sample.id for sample in train if sample.label == label)
        by_class[label] = [ids[index] for index in rng.permutation(len(ids))]

    fraction_lists = {}
    normal_lists = {}
    ordered = []
    taken = {label: 0 for label in Label}

    # every fraction list extends the previous one, so smaller fractions are prefixes of larger ones
    for fraction in ALLOWED_FRACTIONS:
        for label in Label:
            count = round_half_up(fraction * len(by_class[label]))
            ordered.extend(by_class[label][taken[label]:count])
            taken[label] = max(taken[label], count)

        fraction_lists[fraction_key(fraction)] = list(ordered)
        normal_lists[fraction_key(fraction)] = by_class[Label.NORMAL][:taken[Label.NORMAL]]

    return fraction_lists, normal_lists
