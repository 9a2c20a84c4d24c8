import dataclasses
import json
import pathlib
import tempfile
import unittest
import unittest.mock

from msssl.config import PathsConfig
from msssl.exceptions import ArgumentError, ConfigError, StageFailedError
from msssl.models import Checkpoint
from msssl.pipeline import (
    DONE_MARKER, EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_FAILED, STAGES, STATUS_FILE, Pipeline, git_revision,
    run_pipeline,
)
from tests import mock_logger, tiny_config


class TestPipeline(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = pathlib.Path(cls.tmp.name)
        (cls.root / 'data').mkdir()

        cls.config = tiny_config(str(cls.root / 'data'), str(cls.root / 'runs'))
        cls.pipeline = Pipeline(cls.config, logger=mock_logger())
        cls.status = cls.pipeline.run()

    @classmethod
    def tearDownClass(cls) -> None:
        cls.tmp.cleanup()

    def test_can_run_every_stage_in_normal_conditions(self) -> None:
        self.assertEqual({stage: self.status[stage]['status'] for stage in STAGES}, dict.fromkeys(STAGES, 'done'))

        for stage in STAGES:
            self.assertTrue((self.pipeline.stage_dir(stage) / DONE_MARKER).is_file(), stage)

        self.assertTrue(self.pipeline.stage_dir('gen-data').is_relative_to(self.root / 'data'))
        self.assertTrue((self.pipeline.stage_dir('finetune') / 'fold1.pt').is_file())

    def test_evaluation_reports_every_fold(self) -> None:
        report = self.pipeline.report()

        self.assertEqual(report.n_folds, self.config.split.fold_count)
        self.assertTrue(0.0 <= report.auroc.mean <= 1.0)

        uad = json.loads((self.pipeline.stage_dir('evaluate') / 'uad.json').read_text())

        self.assertEqual(set(uad), {'normal_l1', 'anomalous_l1', 'dice'})

    def test_run_directory_records_provenance(self) -> None:
        run_dir = self.pipeline.run_dir
        provenance = json.loads((run_dir / 'provenance.json').read_text())
        status = json.loads((run_dir / STATUS_FILE).read_text())

        self.assertEqual(provenance['seed'], 0)
        self.assertEqual(provenance['device'], 'cpu')
        self.assertEqual(set(provenance['stages']), set(STAGES))
        self.assertEqual(status['evaluate']['status'], 'done')
        self.assertTrue((run_dir / 'config.yaml').is_file())

    def test_finished_stages_are_skipped(self) -> None:
        status = Pipeline(self.config, logger=mock_logger()).run('pretrain')

        self.assertEqual(
                [status[stage]['status'] for stage in STAGES],
                ['skipped'] * 5 + ['pending'] * 2,
        )

    def test_stage_directories_follow_upstream_sections(self) -> None:
        changed = Pipeline(dataclasses.replace(self.config, finetune=dataclasses.replace(self.config.finetune, lr=0.5)))
        reseeded = Pipeline(self.config.with_seed(1))

        self.assertEqual(changed.stage_dir('pretrain'), self.pipeline.stage_dir('pretrain'))
        self.assertNotEqual(changed.stage_dir('finetune'), self.pipeline.stage_dir('finetune'))
        self.assertNotEqual(changed.stage_dir('evaluate'), self.pipeline.stage_dir('evaluate'))
        self.assertNotEqual(reseeded.stage_dir('gen-data'), self.pipeline.stage_dir('gen-data'))

    def test_can_run_label_fraction_sweep(self) -> None:
        table = self.pipeline.run_sweep('label-fraction')

        self.assertEqual(
                sorted((row.method, row.fraction, row.status) for row in table.rows),
                [('residual', 0.6, 'ok'), ('residual', 1.0, 'ok'), ('scratch', 0.6, 'ok'), ('scratch', 1.0, 'ok')],
        )

    def test_resumed_run_reproduces_metrics(self) -> None:
        paths = PathsConfig(self.config.paths.data_root, str(self.root / 'resumed'))
        config = dataclasses.replace(self.config, paths=paths)

        Pipeline(config, logger=mock_logger()).run('train-cae')
        resumed = Pipeline(config, logger=mock_logger())
        status = resumed.run()

        self.assertEqual([status[stage]['status'] for stage in STAGES], ['skipped'] * 3 + ['done'] * 4)
        self.assertEqual(
                (resumed.stage_dir('evaluate') / 'metrics.json').read_text(),
                (self.pipeline.stage_dir('evaluate') / 'metrics.json').read_text(),
        )

    def test_cant_run_unknown_stage_or_sweep(self) -> None:
        with self.assertRaises(ArgumentError):
            self.pipeline.run('deploy')

        with self.assertRaises(ArgumentError):
            self.pipeline.run_sweep('depth')


class TestPipelineFailures(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)
        self.logger = mock_logger()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_cant_run_without_data_root(self) -> None:
        config = tiny_config(str(self.root / 'missing'), str(self.root / 'runs'))

        with self.assertRaises(ConfigError):
            Pipeline(config, logger=self.logger).check()

        self.assertEqual(run_pipeline(config, logger=self.logger), EXIT_CONFIG_ERROR)
        self.assertEqual(run_pipeline(config, until='deploy', logger=self.logger), EXIT_CONFIG_ERROR)

    def test_cant_run_invalid_config(self) -> None:
        (self.root / 'data').mkdir()
        config = tiny_config(str(self.root / 'data'), str(self.root / 'runs'), workers=0)

        self.assertEqual(run_pipeline(config, logger=self.logger), EXIT_CONFIG_ERROR)

    def test_failed_stage_is_reported(self) -> None:
        (self.root / 'data').mkdir()
        config = tiny_config(str(self.root / 'data'), str(self.root / 'runs'))
        pipeline = Pipeline(config, logger=self.logger)

        pipeline.run('split')
        (pipeline.stage_dir('split') / 'plan.json').unlink()

        with self.assertRaises(StageFailedError):
            Pipeline(config, logger=self.logger).run('train-cae')

        status = json.loads((pipeline.run_dir / STATUS_FILE).read_text())

        self.assertEqual(status['train-cae']['status'], 'failed')
        self.assertIn('DataError', status['train-cae']['error'])
        self.assertFalse((pipeline.stage_dir('train-cae') / DONE_MARKER).exists())
        self.assertEqual(run_pipeline(config, until='train-cae', logger=self.logger), EXIT_STAGE_FAILED)
        self.assertEqual(run_pipeline(config, until='split', logger=self.logger), EXIT_OK)

    def test_transient_training_failures_are_retried(self) -> None:
        (self.root / 'data').mkdir()
        config = tiny_config(str(self.root / 'data'), str(self.root / 'runs'))
        save = Checkpoint.save
        failed = []

        def flaky_save(checkpoint: Checkpoint, path: pathlib.Path) -> pathlib.Path:
            name = pathlib.Path(path).name

            if name in ('cae.pt', 'residual.pt', 'fold0.pt') and name not in failed:
                failed.append(name)

                raise OSError(5, 'Input/output error')

            return save(checkpoint, path)

        with unittest.mock.patch.object(Checkpoint, 'save', flaky_save):
            self.assertEqual(run_pipeline(config, until='finetune', logger=self.logger), EXIT_OK)

        self.assertEqual(failed, ['cae.pt', 'residual.pt', 'fold0.pt'])
        self.assertTrue((Pipeline(config).stage_dir('finetune') / 'fold0.pt').is_file())

    def test_git_revision_follows_head_reference(self) -> None:
        refs = self.root / '.git' / 'refs' / 'heads'
        refs.mkdir(parents=True)
        (refs / 'main').write_text('0123abcd\n')
        (self.root / '.git' / 'HEAD').write_text('ref: refs/heads/main\n')

        self.assertEqual(git_revision(self.root), '0123abcd')
        self.assertIsNone(git_revision(self.root / 'elsewhere'))


if __name__ == '__main__':
    unittest.main()
