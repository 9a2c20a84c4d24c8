"""
Exact ranking metrics and cross-validation aggregation

auroc is the Mann-Whitney statistic P(s+ > s-) + P(s+ = s-) / 2 computed from average ranks,
auprc is the step-wise area sum over distinct thresholds of precision * recall increment.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .exceptions import AggregationError, ArgumentError, MetricError

METRICS = ('auroc', 'auprc', 'f1')
CONFIDENCE = 0.95


def _as_arrays(scores: typing.Sequence[float], labels: typing.Sequence[int]) -> typing.Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()

    if scores.shape != labels.shape:
        raise ArgumentError(f'Got {scores.size} scores but {labels.size} labels')

    if not np.all(np.isfinite(scores)):
        raise MetricError('Scores must be finite')

    if not np.all(np.isin(labels, (0, 1))):
        raise MetricError('Labels must be binary')

    return scores, labels.astype(np.int64)


def auroc(scores: typing.Sequence[float], labels: typing.Sequence[int]) -> float:
    scores, labels = _as_arrays(scores, labels)
    positives = int(labels.sum())
    negatives = labels.size - positives

    if positives == 0 or negatives == 0:
        raise MetricError('AUROC needs both classes present')

    ranks = stats.rankdata(scores)
    # average ranks are multiples of 1/2, the rank sum is exact
    statistic = ranks[labels == 1].sum() - positives * (positives + 1) / 2

    return float(statistic / (positives * negatives))


def auprc(scores: typing.Sequence[float], labels: typing.Sequence[int]) -> float:
    scores, labels = _as_arrays(scores, labels)
    positives = int(labels.sum())

    if positives == 0:
        raise MetricError('AUPRC needs at least one positive')

    order = np.argsort(-scores, kind='mergesort')
    ordered = scores[order]
    hits = np.cumsum(labels[order])

    # last position of every group of tied scores
    ends = np.r_[np.flatnonzero(np.diff(ordered)), ordered.size - 1]
    true_positives = hits[ends]
    precision = true_positives / (ends + 1)
    recall_step = np.diff(np.r_[0, true_positives]) / positives

    return float(np.sum(precision * recall_step))


def f1(preds: typing.Sequence[int], labels: typing.Sequence[int]) -> float:
    preds = np.asarray(preds).ravel().astype(bool)
    labels = np.asarray(labels).ravel().astype(bool)

    if preds.shape != labels.shape:
        raise ArgumentError(f'Got {preds.size} predictions but {labels.size} labels')

    true_positives = int(np.sum(preds & labels))

    if true_positives == 0:
        return 0.0

    precision = true_positives / int(preds.sum())
    recall = true_positives / int(labels.sum())

    return 2 * precision * recall / (precision + recall)


@dataclass
class FoldMetrics:
    fold: int
    auroc: float
    auprc: float
    f1: float
    n_test: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricSummary:
    values: typing.List[float]
    mean: float
    ci95_low: float
    ci95_high: float

    @property
    def n_folds(self) -> int:
        return len(self.values)

    def format(self, digits: int = 2) -> str:
        return f'{self.mean:.{digits}f} ({self.ci95_low:.{digits}f}-{self.ci95_high:.{digits}f})'

    def to_dict(self) -> dict:
        return {
            'values': list(self.values),
            'mean': self.mean,
            'ci95_low': self.ci95_low,
            'ci95_high': self.ci95_high,
            'n_folds': self.n_folds,
        }


@dataclass
class MetricsReport:
    per_fold: typing.List[FoldMetrics]
    summaries: typing.Dict[str, MetricSummary] = field(default_factory=dict)
    resampling_ratio: float = 0.0

    @property
    def n_folds(self) -> int:
        return len(self.per_fold)

    @property
    def auroc(self) -> MetricSummary:
        return self.summaries['auroc']

    @property
    def auprc(self) -> MetricSummary:
        return self.summaries['auprc']

    @property
    def f1(self) -> MetricSummary:
        return self.summaries['f1']

    def to_dict(self) -> dict:
        return {
            'n_folds': self.n_folds,
            'per_fold': [fold.to_dict() for fold in self.per_fold],
            'resampling_ratio': self.resampling_ratio,
            **{name: summary.to_dict() for name, summary in self.summaries.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> MetricsReport:
        return aggregate_folds(
                [FoldMetrics(**fold) for fold in data['per_fold']],
                resampling_ratio=data.get('resampling_ratio', 0.0),
        )


def summarize(
        values: typing.Sequence[float],
        confidence: float = CONFIDENCE,
        *,
        resampling_ratio: float = 0.0,
) -> MetricSummary:
    """
    Mean with a Student-t interval over folds, bounds clipped to [0, 1].
    A positive resampling_ratio (test/train size of correlated folds) scales the variance of the mean
    from 1/k to 1/k + ratio.
    """
    values = [float(value) for value in values]
    count = len(values)

    if count < 2:
        raise AggregationError(f'Confidence intervals need at least 2 folds, got {count}')

    if resampling_ratio < 0:
        raise AggregationError(f'Resampling ratio must be >= 0, got {resampling_ratio}')

    mean = float(np.mean(values))
    scale = math.sqrt(1 / count + resampling_ratio)
    half_width = stats.t.ppf(0.5 + confidence / 2, count - 1) * float(np.std(values, ddof=1)) * scale

    return MetricSummary(
            values,
            mean,
            max(0.0, min(mean, mean - half_width)),
            min(1.0, max(mean, mean + half_width)),
    )


def aggregate_folds(
        per_fold: typing.Sequence[typing.Union[FoldMetrics, dict]],
        *,
        resampling_ratio: float = 0.0,
) -> MetricsReport:
    folds = [fold if isinstance(fold, FoldMetrics) else FoldMetrics(**fold) for fold in per_fold]

    if len(folds) < 2:
        raise AggregationError(f'Aggregation needs at least 2 folds, got {len(folds)}')

    return MetricsReport(
            folds,
            {
                name: summarize([getattr(fold, name) for fold in folds], resampling_ratio=resampling_ratio)
                for name in METRICS
            },
            resampling_ratio,
    )
