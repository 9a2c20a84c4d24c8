import dataclasses
import pathlib
import tempfile
import unittest

import numpy as np

from msssl.exceptions import ArgumentError, PhantomConfigError
from msssl.phantom import (
    ANOMALY_KINDS, CAVITY_INTENSITY, Label, PhantomConfig, UnlabelledSample, generate_dataset, inject_anomaly,
    load_dataset, save_dataset,
)
from msssl.volume import Volume
from tests import SMALL_PHANTOM, TINY_PHANTOM, mock_logger


class TestPhantom(unittest.TestCase):
    def setUp(self) -> None:
        self.logger = mock_logger()

    def test_can_generate_labelled_cohort_in_normal_conditions(self) -> None:
        samples = generate_dataset(SMALL_PHANTOM, logger=self.logger)

        self.assertEqual(len(samples), 2 * SMALL_PHANTOM.n_patients)
        self.assertEqual(len({sample.id for sample in samples}), len(samples))
        # round-half-up(0.4 * 20)
        self.assertEqual(sum(sample.is_anomalous for sample in samples), 8)

        for sample in samples:
            self.assertEqual(sample.volume.shape, SMALL_PHANTOM.shape)
            self.assertEqual(sample.volume.id, sample.id)
            self.assertGreaterEqual(float(sample.volume.data.min()), 0.0)
            self.assertLessEqual(float(sample.volume.data.max()), 1.0)
            self.assertEqual(sample.gt_mask is not None, sample.is_anomalous)

            if sample.is_anomalous:
                self.assertTrue(sample.gt_mask.any())

    def test_generation_is_reproducible(self) -> None:
        first = generate_dataset(TINY_PHANTOM)
        second = generate_dataset(TINY_PHANTOM)
        other = generate_dataset(dataclasses.replace(TINY_PHANTOM, rng_seed=8))

        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.volume.data, b.volume.data)
            self.assertEqual(a.label, b.label)

        self.assertFalse(all(np.array_equal(a.volume.data, b.volume.data) for a, b in zip(first, other)))

    def test_unlabelled_pool_has_masks_but_no_labels(self) -> None:
        samples = generate_dataset(SMALL_PHANTOM, pool='unlabelled')

        self.assertEqual(len(samples), 2 * SMALL_PHANTOM.n_unlabelled_patients)
        self.assertTrue(all(sample.label is None for sample in samples))
        self.assertTrue(all(sample.id.startswith('u') for sample in samples))
        self.assertEqual(sum(sample.gt_mask is not None for sample in samples), 3)

        view = samples[0].unlabelled()

        self.assertIsInstance(view, UnlabelledSample)
        self.assertFalse(hasattr(view, 'label'))

    def test_right_sides_are_in_canonical_orientation(self) -> None:
        cfg = dataclasses.replace(SMALL_PHANTOM, n_patients=4, anomaly_fraction=0.0, background_noise_std=0.0)
        samples = generate_dataset(cfg)

        # the cavity sits lateral of the midline on the same side for both orientations
        midline = (cfg.shape[2] - 1) / 2
        offsets = [np.argwhere(sample.volume.data < 0.2).mean(axis=0)[2] - midline for sample in samples]

        self.assertTrue(all(offset > -0.5 for offset in offsets))
        self.assertGreater(float(np.mean(offsets)), 0.5)

    def test_anomaly_changes_only_masked_voxels(self) -> None:
        data = np.full((24, 24, 24), 0.35, dtype=np.float32)
        grid = np.indices(data.shape)
        cavity = ((grid - 11.5) ** 2).sum(axis=0) <= 8 ** 2
        data[cavity] = CAVITY_INTENSITY
        volume = Volume(data)

        for kind in ANOMALY_KINDS:
            result, mask = inject_anomaly(volume, kind, np.random.default_rng(1), cavity=cavity, noise_std=0.0)

            self.assertTrue(mask.any())
            self.assertFalse((mask & ~cavity).any())
            np.testing.assert_array_equal(result.data[~mask], volume.data[~mask])
            self.assertGreaterEqual(float(result.data[mask].min()), 0.5)

        with self.assertRaises(ArgumentError):
            inject_anomaly(volume, 'tumour', np.random.default_rng(0), cavity=cavity)

    def test_cant_generate_with_geometry_exceeding_volume(self) -> None:
        cfg = dataclasses.replace(SMALL_PHANTOM, cavity_radius_range=(10.0, 14.0))

        self.assertIn('phantom.cavity_radius_range', [name for name, _ in cfg.diagnostics()])

        with self.assertRaises(PhantomConfigError):
            generate_dataset(cfg)

        with self.assertRaises(ArgumentError):
            generate_dataset(SMALL_PHANTOM, pool='extra')

    def test_can_save_and_load_dataset(self) -> None:
        samples = generate_dataset(TINY_PHANTOM)

        with tempfile.TemporaryDirectory() as tmp:
            manifest = save_dataset(samples, pathlib.Path(tmp) / 'labelled')
            loaded = load_dataset(manifest)

        self.assertEqual([sample.id for sample in loaded], [sample.id for sample in samples])

        for original, restored in zip(samples, loaded):
            np.testing.assert_array_equal(restored.volume.data, original.volume.data)
            self.assertEqual(restored.label, original.label)
            self.assertEqual(restored.patient_id, original.patient_id)

            if original.gt_mask is None:
                self.assertIsNone(restored.gt_mask)
            else:
                np.testing.assert_array_equal(restored.gt_mask, original.gt_mask)

    def test_config_round_trips_through_dict(self) -> None:
        self.assertEqual(PhantomConfig.from_dict(SMALL_PHANTOM.to_dict()), SMALL_PHANTOM)
        self.assertEqual(Label.parse('anomalous'), Label.ANOMALOUS)
        self.assertIsNone(Label.parse(None))


if __name__ == '__main__':
    unittest.main()
