import csv
import dataclasses
import json
import pathlib
import tempfile
import unittest

import numpy as np

from msssl.exceptions import ContractViolationError, DataError, StateError
from msssl.models import CAESpec, Checkpoint, ResNetEncoder
from msssl.phantom import generate_dataset
from msssl.training import seed_everything
from msssl.uad import (
    load_cae, load_residuals, localization_dice, postprocess_residual, reconstruction_errors, residual,
    residual_threshold, score_localization, sweep_unlabelled, train_cae,
)
from msssl.volume import Volume
from tests import (
    FAST_CAE, TINY_CAE, TINY_ENCODER, TINY_PHANTOM, make_samples, mock_logger, random_volume, unlabelled,
)


class TestUAD(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        seed_everything(0)

        cls.normals = make_samples(5)
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = pathlib.Path(cls.tmp.name)
        cls.checkpoint = train_cae(
                cls.normals,
                FAST_CAE,
                spec=TINY_CAE,
                history_path=cls.root / 'history.csv',
                logger=mock_logger(),
        )

    @classmethod
    def tearDownClass(cls) -> None:
        cls.tmp.cleanup()

    def test_can_train_cae_in_normal_conditions(self) -> None:
        self.assertEqual(self.checkpoint.stage, 'cae')
        self.assertEqual(set(self.checkpoint.specs), {'cae'})
        self.assertEqual(self.checkpoint.config['epochs'], FAST_CAE.epochs)

        with (self.root / 'history.csv').open() as stream:
            rows = list(csv.DictReader(stream))

        self.assertEqual([int(row['epoch']) for row in rows], [1, 2])
        self.assertTrue(all(np.isfinite(float(row['val_loss'])) for row in rows))

    def test_cant_train_cae_on_anomalous_samples(self) -> None:
        samples = make_samples(3, ['p00001-r'])

        with self.assertRaises(ContractViolationError):
            train_cae(samples, FAST_CAE, spec=TINY_CAE)

        with self.assertRaises(ContractViolationError):
            train_cae(make_samples(3, labelled=False), FAST_CAE, spec=TINY_CAE)

    def test_residual_is_bounded_and_shaped(self) -> None:
        x = random_volume((8, 8, 8), seed=42)

        r = residual(self.checkpoint, x)

        self.assertEqual(r.shape, x.shape)
        self.assertGreaterEqual(float(r.data.min()), 0.0)
        self.assertLessEqual(float(r.data.max()), 1.0)

    def test_postprocess_without_kernel_copies(self) -> None:
        r = random_volume((6, 6, 6))

        copied = postprocess_residual(r, None)
        filtered = postprocess_residual(r, 3)

        np.testing.assert_array_equal(copied.data, r.data)
        self.assertIsNot(copied.data, r.data)
        self.assertEqual(filtered.shape, r.shape)
        self.assertLess(float(filtered.data.std()), float(r.data.std()))

    def test_can_sweep_pool_and_reload_residuals(self) -> None:
        pool = unlabelled(make_samples(2, seed=100))
        out = self.root / 'residuals'

        written = sweep_unlabelled(self.checkpoint, pool, out, kernel=3, batch_size=3, logger=mock_logger())
        loaded = load_residuals(out / 'residuals.json')

        manifest = json.loads((out / 'residuals.json').read_text())

        self.assertEqual(manifest['postprocess'], 3)
        self.assertEqual([item.input_ref for item in loaded], [sample.id for sample in pool])

        for before, after in zip(written, loaded):
            np.testing.assert_array_equal(before.residual.data, after.residual.data)
            self.assertEqual(after.postprocess, 3)

    def test_cant_sweep_with_missing_checkpoint(self) -> None:
        with self.assertRaises(StateError):
            sweep_unlabelled(self.root / 'missing.pt', [], self.root / 'nowhere')

        with self.assertRaises(StateError):
            load_cae(Checkpoint.from_modules('ae', {'encoder': ResNetEncoder(TINY_ENCODER)}))

        with self.assertRaises(DataError):
            load_residuals(self.root / 'missing' / 'residuals.json')

    def test_reconstruction_errors_per_sample(self) -> None:
        errors = reconstruction_errors(self.checkpoint, self.normals)

        self.assertEqual(errors.shape, (len(self.normals),))
        self.assertTrue(np.all(errors >= 0))

    def test_threshold_and_dice(self) -> None:
        normals = [Volume(np.linspace(0.0, 1.0, 1000, dtype=np.float32).reshape(10, 10, 10))]
        mask = np.zeros((4, 4, 4), dtype=bool)
        mask[:2] = True
        r = Volume(mask.astype(np.float32) * 0.9)

        self.assertAlmostEqual(residual_threshold(normals, 50), 0.5, places=5)
        self.assertEqual(localization_dice(r, mask, 0.5), 1.0)
        self.assertEqual(localization_dice(r, ~mask, 0.5), 0.0)
        self.assertEqual(localization_dice(Volume(np.zeros((4, 4, 4))), np.zeros((4, 4, 4), dtype=bool), 0.5), 1.0)

        with self.assertRaises(DataError):
            residual_threshold([])

    def test_localization_score_is_a_mean_dice(self) -> None:
        samples = make_samples(3, ['p00000-l', 'p00002-r'], seed=7)

        score = score_localization(self.checkpoint, samples, kernel=None)

        self.assertGreaterEqual(score, 0.0)
        self.assertLessEqual(score, 1.0)

        with self.assertRaises(DataError):
            score_localization(self.checkpoint, self.normals, kernel=None)


class TestResidualSeparation(unittest.TestCase):
    """A CAE trained on normal phantoms leaves larger residuals on anomalies than on the anatomy around them"""

    def test_anomalies_stand_out_in_residuals(self) -> None:
        seed_everything(0)

        samples = generate_dataset(TINY_PHANTOM)
        normals = [sample for sample in samples if not sample.is_anomalous]
        anomalous = [sample for sample in samples if sample.is_anomalous]
        cae = train_cae(
                normals,
                dataclasses.replace(FAST_CAE, epochs=10),
                spec=CAESpec(input_shape=TINY_PHANTOM.shape, stage_channels=(4, 8), latent_dim=16),
                logger=mock_logger(),
        )

        inside, outside = [], []

        for sample in anomalous:
            r = residual(cae, sample.volume).data
            inside.append(float(r[sample.gt_mask].mean()))
            outside.append(float(r[~sample.gt_mask].mean()))

        self.assertEqual(len(anomalous), 6)
        self.assertGreater(np.mean(inside), np.mean(outside))


if __name__ == '__main__':
    unittest.main()
