import dataclasses
import pathlib
import tempfile
import unittest

import numpy as np
import torch

from msssl.exceptions import ContractViolationError, StateError
from msssl.finetune import FinetuneConfig, classification_loss, evaluate, finetune, fold_job, predict, resolve_init
from msssl.models import CAE, Checkpoint, SSLNetwork
from msssl.splits import make_split
from msssl.training import seed_everything
from tests import FAST_FINETUNE, TINY_CAE, TINY_DECODER, TINY_ENCODER, TINY_HEAD, balanced_samples, mock_logger


class TestFinetune(unittest.TestCase):
    SHAPE = (16, 16, 16)

    @classmethod
    def setUpClass(cls) -> None:
        seed_everything(0)

        cls.samples = balanced_samples(10, shape=cls.SHAPE)
        cls.plan = make_split(cls.samples, 2, seed=0)

    def setUp(self) -> None:
        self.logger = mock_logger()
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def pretrained(self) -> Checkpoint:
        network = SSLNetwork(TINY_ENCODER, TINY_DECODER)

        return Checkpoint.from_modules('ssl', {'encoder': network.encoder, 'decoder': network.decoder})

    def test_can_finetune_from_scratch_in_normal_conditions(self) -> None:
        checkpoint = finetune(
                TINY_ENCODER,
                TINY_HEAD,
                self.plan.train_samples(0),
                self.plan.val_samples(0),
                FAST_FINETUNE,
                history_path=self.root / 'history.csv',
                logger=self.logger,
        )

        self.assertEqual(checkpoint.stage, 'scratch')
        self.assertEqual(set(checkpoint.specs), {'encoder', 'head'})
        self.assertIsNone(checkpoint.config['init_stage'])
        self.assertTrue((self.root / 'history.csv').is_file())

    def test_finetune_starts_from_pretrained_encoder(self) -> None:
        init = self.pretrained()
        cfg = dataclasses.replace(FAST_FINETUNE, epochs=1, lr=1e-12, weight_decay=0.0)

        checkpoint = finetune(TINY_ENCODER, TINY_HEAD, self.plan.train_samples(0), [], cfg, init=init)

        self.assertEqual(checkpoint.stage, 'finetuned')
        self.assertEqual(checkpoint.config['init_stage'], 'ssl')
        name = 'stem.0.weight'
        self.assertTrue(torch.allclose(checkpoint.weights['encoder'][name], init.weights['encoder'][name], atol=1e-6))

    def test_can_resolve_init_from_path(self) -> None:
        path = self.pretrained().save(self.root / 'ssl.pt')

        self.assertIsNone(resolve_init(FAST_FINETUNE, TINY_ENCODER))
        self.assertEqual(resolve_init(dataclasses.replace(FAST_FINETUNE, init=str(path)), TINY_ENCODER).stage, 'ssl')

        with self.assertRaises(StateError):
            resolve_init(dataclasses.replace(FAST_FINETUNE, init=str(self.root / 'missing.pt')), TINY_ENCODER)

    def test_cant_finetune_from_cae_checkpoint(self) -> None:
        cae = Checkpoint.from_modules('cae', {'cae': CAE(TINY_CAE)})

        with self.assertRaises(StateError):
            finetune(TINY_ENCODER, TINY_HEAD, self.plan.train_samples(0), [], FAST_FINETUNE, init=cae)

    def test_predictions_are_probabilities(self) -> None:
        checkpoint = finetune(TINY_ENCODER, TINY_HEAD, self.plan.train_samples(0), [], FAST_FINETUNE)

        scores, preds = predict(checkpoint, self.samples, batch_size=3)

        self.assertEqual(scores.shape, (len(self.samples),))
        self.assertTrue(np.all((scores >= 0) & (scores <= 1)))
        np.testing.assert_array_equal(preds, (scores > 0.5).astype(np.int64))

    def test_evaluate_reads_test_set_once(self) -> None:
        checkpoint = finetune(TINY_ENCODER, TINY_HEAD, self.plan.train_samples(1), [], FAST_FINETUNE)
        session = self.plan.session()

        metrics = evaluate(checkpoint, session, 1, logger=self.logger)

        self.assertEqual(metrics.fold, 1)
        self.assertEqual(metrics.n_test, len(self.plan.session().test_samples(1)))
        self.assertTrue(0.0 <= metrics.auroc <= 1.0)
        self.assertTrue(0.0 <= metrics.auprc <= 1.0)
        self.logger.error.assert_not_called()

    def test_cant_read_test_set_twice_in_one_session(self) -> None:
        checkpoint = finetune(TINY_ENCODER, TINY_HEAD, self.plan.train_samples(1), [], FAST_FINETUNE)
        session = self.plan.session()

        evaluate(checkpoint, session, 1, logger=self.logger)

        with self.assertRaises(ContractViolationError):
            evaluate(checkpoint, session, 1, logger=self.logger)

        self.assertEqual(session.test_access[1], 1)
        self.assertEqual(evaluate(checkpoint, self.plan.session(), 1).fold, 1)

    def test_cant_evaluate_pretraining_checkpoint(self) -> None:
        with self.assertRaises(StateError):
            evaluate(self.pretrained(), self.plan.session(), 0)

    def test_fold_job_saves_checkpoint_and_history(self) -> None:
        cfg = dataclasses.replace(FAST_FINETUNE, label_fraction=0.6)

        metrics = fold_job(TINY_ENCODER, TINY_HEAD, self.plan.session(), 0, cfg, out_dir=self.root, logger=self.logger)

        self.assertEqual(metrics.fold, 0)
        self.assertEqual(Checkpoint.load(self.root / 'fold0.pt').stage, 'scratch')
        self.assertTrue((self.root / 'fold0-history.csv').is_file())

    def test_loss_matches_one_hot_bce(self) -> None:
        logits = torch.tensor([[2.0, -1.0], [0.0, 3.0]])
        labels = torch.tensor([0, 1])
        expected = torch.nn.functional.binary_cross_entropy_with_logits(logits, torch.tensor([[1.0, 0.0], [0.0, 1.0]]))

        self.assertTrue(torch.allclose(classification_loss(logits, labels), expected))

    def test_config_rejects_unknown_fraction(self) -> None:
        cfg = FinetuneConfig(label_fraction=0.3)

        self.assertEqual([name for name, _ in cfg.diagnostics()], ['finetune.label_fraction'])


if __name__ == '__main__':
    unittest.main()
