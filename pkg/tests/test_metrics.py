import typing
import unittest

import numpy as np

from msssl.exceptions import AggregationError, ArgumentError, MetricError
from msssl.metrics import FoldMetrics, MetricsReport, aggregate_folds, auprc, auroc, f1, summarize


def pairwise_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    positives, negatives = scores[labels == 1], scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in positives for n in negatives)

    return wins / (len(positives) * len(negatives))


def enumerated_auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    area, last_recall = 0.0, 0.0

    for threshold in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= threshold
        true_positives = int(np.sum(predicted & (labels == 1)))
        recall = true_positives / int(labels.sum())
        area += true_positives / int(predicted.sum()) * (recall - last_recall)
        last_recall = recall

    return area


def random_instances(count: int, seed: int) -> typing.Iterator[typing.Tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)

    while count:
        size = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size)

        if labels.min() == labels.max():
            continue

        # a coarse grid forces ties
        scores = rng.integers(0, 8, size) / 8 if rng.random() < 0.5 else rng.random(size)
        count -= 1

        yield scores, labels


class TestMetricOracles(unittest.TestCase):
    def check(self, count: int) -> None:
        for scores, labels in random_instances(count, seed=count):
            self.assertLessEqual(abs(auroc(scores, labels) - pairwise_auroc(scores, labels)), 1e-12)
            self.assertLessEqual(abs(auprc(scores, labels) - enumerated_auprc(scores, labels)), 1e-12)

    def test_metrics_match_brute_force(self) -> None:
        self.check(10_000)


class TestMetrics(unittest.TestCase):
    def test_auroc_of_perfect_and_inverted_ranking(self) -> None:
        self.assertEqual(auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]), 1.0)
        self.assertEqual(auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]), 0.0)

    def test_auroc_counts_ties_as_half(self) -> None:
        self.assertEqual(auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]), 0.5)
        # pairs (+, -): (0.8, 0.3) wins, (0.8, 0.8) ties, (0.4, 0.3) wins, (0.4, 0.8) loses
        self.assertEqual(auroc([0.8, 0.4, 0.3, 0.8], [1, 1, 0, 0]), 0.625)

    def test_auprc_matches_hand_computed_value(self) -> None:
        # ranking + - + -: precision 1 at recall 0.5, precision 2/3 at recall 1
        self.assertAlmostEqual(auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]), 0.5 + 0.5 * 2 / 3)
        self.assertEqual(auprc([0.9, 0.8, 0.1], [1, 1, 0]), 1.0)

    def test_auprc_groups_tied_scores(self) -> None:
        # one threshold admits all four samples at once
        self.assertEqual(auprc([0.5, 0.5, 0.5, 0.5], [1, 0, 0, 1]), 0.5)

    def test_cant_score_degenerate_labels(self) -> None:
        with self.assertRaises(MetricError):
            auroc([0.1, 0.2], [1, 1])

        with self.assertRaises(MetricError):
            auprc([0.1, 0.2], [0, 0])

        with self.assertRaises(MetricError):
            auroc([0.1, float('nan')], [0, 1])

        with self.assertRaises(ArgumentError):
            auroc([0.1, 0.2, 0.3], [0, 1])

    def test_f1(self) -> None:
        self.assertEqual(f1([1, 1, 0, 0], [1, 0, 1, 0]), 0.5)
        self.assertEqual(f1([0, 0], [1, 0]), 0.0)
        self.assertEqual(f1([1, 0], [1, 0]), 1.0)

    def test_summary_uses_t_interval(self) -> None:
        summary = summarize([0.8, 0.9])

        self.assertAlmostEqual(summary.mean, 0.85)
        # t(0.975, 1) = 12.706, sd = 0.0707, half width = 0.635 clipped to [0, 1]
        self.assertAlmostEqual(summary.ci95_low, 0.2147, places=3)
        self.assertEqual(summary.ci95_high, 1.0)

        tight = summarize([0.7, 0.7, 0.7])

        self.assertAlmostEqual(tight.ci95_low, 0.7)
        self.assertAlmostEqual(tight.ci95_high, 0.7)

        with self.assertRaises(AggregationError):
            summarize([0.5])

    def test_can_aggregate_folds_in_normal_conditions(self) -> None:
        folds = [FoldMetrics(fold, 0.8 + 0.02 * fold, 0.7, 0.6, 20) for fold in range(5)]

        report = aggregate_folds(folds)

        self.assertEqual(report.n_folds, 5)
        self.assertAlmostEqual(report.auroc.mean, 0.84)
        self.assertLess(report.auroc.ci95_low, report.auroc.mean)
        self.assertGreater(report.auroc.ci95_high, report.auroc.mean)
        self.assertEqual(report.auprc.format(), '0.70 (0.70-0.70)')

        restored = MetricsReport.from_dict(report.to_dict())

        self.assertEqual(restored.per_fold, report.per_fold)
        self.assertAlmostEqual(restored.auroc.ci95_low, report.auroc.ci95_low)

        with self.assertRaises(AggregationError):
            aggregate_folds(folds[:1])

    def test_correlated_folds_widen_the_interval(self) -> None:
        plain = summarize([0.5, 0.6, 0.7])
        widened = summarize([0.5, 0.6, 0.7], resampling_ratio=0.5)

        # t(0.975, 2) = 4.3027, sd = 0.1, sqrt(1/3 + 0.5) = 0.9129
        self.assertAlmostEqual(widened.ci95_low, 0.2072, places=3)
        self.assertAlmostEqual(widened.ci95_high, 0.9928, places=3)
        self.assertLess(widened.ci95_low, plain.ci95_low)

        folds = [FoldMetrics(fold, 0.5 + 0.1 * fold, 0.7, 0.6, 20) for fold in range(3)]
        report = aggregate_folds(folds, resampling_ratio=0.5)

        self.assertAlmostEqual(MetricsReport.from_dict(report.to_dict()).auroc.ci95_low, widened.ci95_low)

        with self.assertRaises(AggregationError):
            summarize([0.5, 0.6], resampling_ratio=-0.1)


if __name__ == '__main__':
    unittest.main()
