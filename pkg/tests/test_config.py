import pathlib
import tempfile
import unittest

from msssl.config import (
    PRETRAINED, ExperimentConfig, SweepConfig, dump_config, load_config, parse_config, unknown_fields,
    validate_config,
)
from msssl.exceptions import ConfigError, ConfigParseError

EXAMPLE = pathlib.Path(__file__).resolve().parent.parent / 'config.example.yaml'


class TestConfig(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_defaults_are_valid(self) -> None:
        config = ExperimentConfig.from_dict({})

        self.assertEqual(config.diagnostics(), [])
        self.assertEqual(config.finetune.init, PRETRAINED)
        self.assertEqual(config.models.decoder.stage_channels, (512, 256, 128, 64))

    def test_can_load_example_config_in_normal_conditions(self) -> None:
        config = load_config(EXAMPLE)

        self.assertEqual(validate_config(EXAMPLE.read_text()), [])
        self.assertEqual(config.phantom.shape, (64, 64, 64))
        self.assertEqual(config.sweep.methods, ('residual', 'ae', 'dae', 'scratch'))
        self.assertEqual(config.pretrain.augmentation.rotation_degrees, (10.0, 10.0, 10.0))

    def test_global_seed_fills_section_seeds(self) -> None:
        config = ExperimentConfig.from_dict({'seed': 3, 'split': {'seed': 9}})

        self.assertEqual(config.phantom.rng_seed, 3)
        self.assertEqual(config.cae.seed, 3)
        self.assertEqual(config.split.seed, 9)

        reseeded = config.with_seed(5)

        self.assertEqual(reseeded.seed, 5)
        self.assertEqual({reseeded.split.seed, reseeded.pretrain.seed, reseeded.finetune.seed}, {5})

    def test_cant_parse_broken_yaml(self) -> None:
        with self.assertRaises(ConfigParseError) as context:
            parse_config('seed: 0\nsplit:\n  fold_count: [1, 2\n')

        self.assertIsNotNone(context.exception.line)
        self.assertIsNotNone(context.exception.column)
        self.assertIsInstance(context.exception, ConfigError)
        self.assertEqual(parse_config(''), {})

    def test_cant_build_with_unknown_fields(self) -> None:
        data = {'sead': 1, 'cae': {'epochz': 3}, 'split': 5}

        fields = [problem.field for problem in unknown_fields(data)]

        self.assertEqual(fields, ['sead', 'split', 'cae.epochz'])

        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict(data)

        self.assertEqual(validate_config(['not', 'a', 'mapping'])[0].field, '<root>')

    def test_validation_collects_every_problem(self) -> None:
        text = (
            'device: tpu\n'
            'cae:\n  epochs: 5\n  warmup_epochs: 10\n'
            'finetune:\n  label_fraction: 0.3\n'
            'models:\n  head:\n    in_features: 7\n'
        )

        fields = {problem.field for problem in validate_config(text)}

        self.assertEqual(
                fields,
                {'device', 'cae.warmup_epochs', 'finetune.label_fraction', 'models.head.in_features'},
        )

    def test_cae_fractions_follow_their_own_grid(self) -> None:
        sweep = SweepConfig(fractions=(0.1, 1.0), cae_fractions=(0.1, 1.0))

        self.assertEqual([name for name, _ in sweep.diagnostics()], ['sweep.cae_fractions'])
        self.assertEqual(SweepConfig(cae_fractions=(0.2, 0.8)).diagnostics(), [])

    def test_section_hash_follows_section_content(self) -> None:
        config = ExperimentConfig.from_dict({})
        other = ExperimentConfig.from_dict({'finetune': {'lr': 0.5}})

        self.assertEqual(config.section_hash('cae', 'models.cae'), other.section_hash('cae', 'models.cae'))
        self.assertNotEqual(config.section_hash('finetune'), other.section_hash('finetune'))
        self.assertEqual(len(config.section_hash('split')), 8)

    def test_dumped_config_loads_back(self) -> None:
        config = ExperimentConfig.from_dict({'seed': 4, 'residuals': {'kernel': None}, 'sweep': {'fractions': [0.2]}})

        path = dump_config(config, self.root / 'nested' / 'config.yaml')

        self.assertEqual(load_config(path), config)

    def test_cant_load_missing_file(self) -> None:
        with self.assertRaises(ConfigError):
            load_config(self.root / 'missing.yaml')


if __name__ == '__main__':
    unittest.main()
