import argparse
import dataclasses
import json
import logging
import pathlib
import sys

import msssl
from msssl.config import ExperimentConfig
from msssl.exceptions import ArgumentError, ConfigError, ConfigParseError, MSSSLException
from msssl.pipeline import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_FAILED, STAGES, SWEEPS
from msssl.pretrain import TASKS

COMMANDS = {
    'gen-data': 'Generate the labelled and unlabelled phantom cohorts',
    'split': 'Build the patient-level cross-validation split plan',
    'train-cae': 'Train the convolutional autoencoder on normal training samples',
    'gen-residuals': 'Write CAE residual volumes for the unlabelled pool',
    'pretrain': 'Pretrain encoder and decoder on the unlabelled pool',
    'finetune': 'Fine-tune the classifier on every fold',
    'evaluate': 'Evaluate every fold on its test set and aggregate the metrics',
}


class ArgParser(argparse.ArgumentParser):
    def __init__(self, *, commands: bool = False, **kwargs):
        super().__init__(**kwargs)

        if not commands:
            return

        self.add_argument(
                '--config',
                '-c',
                help='experiment config filename',
                default='config.example.yaml',
                metavar='config filename',
                dest='config',
        )

        self.add_argument(
                '--seed',
                '-s',
                type=int,
                help='Override the global seed and every stage seed that derives from it',
                default=None,
                metavar='Seed',
                dest='seed',
        )

        self.add_argument(
                '--debug',
                '-d',
                help='Enable debug mode or not',
                action='store_true',
                dest='debug',
        )

        subparsers = self.add_subparsers(dest='command', metavar='command', required=True)

        for name, description in COMMANDS.items():
            parser = subparsers.add_parser(name, help=description, description=description)

            if name == 'pretrain':
                parser.add_argument(
                        '--task',
                        '-t',
                        help='Pretext task, defaults to the one in the config file',
                        choices=TASKS,
                        default=None,
                        dest='task',
                )

        run = subparsers.add_parser('run', help='Run every stage up to --until', description='Run the pipeline')
        run.add_argument(
                '--until',
                '-u',
                help='Last stage to run',
                choices=STAGES,
                default=STAGES[-1],
                dest='until',
        )

        sweep = subparsers.add_parser('sweep', help='Run a label-fraction or CAE-fraction sweep')
        sweep.add_argument(
                '--kind',
                '-k',
                help='Which sweep to run',
                choices=SWEEPS,
                default=SWEEPS[0],
                dest='kind',
        )

        subparsers.add_parser('validate', help='Check the config file and list every violated rule')

    def error(self, message: str):
        self._print_message(f'{self.prog} - error: {message}\n', sys.stderr)
        self.print_help(sys.stderr)
        self.exit(EXIT_CONFIG_ERROR)


def fail(message: str, code: int) -> int:
    print(f'ms-ssl - error: {message}', file=sys.stderr)

    return code


def validate(path: str) -> int:
    try:
        text = pathlib.Path(path).read_text()
        problems = msssl.validate_config(text)
    except ConfigParseError as e:
        return fail(str(e), EXIT_CONFIG_ERROR)
    except OSError as e:
        return fail(f'Could not read config {path}: {e}', EXIT_CONFIG_ERROR)

    for problem in problems:
        print(problem)

    if problems:
        return EXIT_CONFIG_ERROR

    print(f'{path} is valid')

    return EXIT_OK


def load(args: argparse.Namespace) -> ExperimentConfig:
    config = msssl.load_config(args.config)

    if args.seed is not None:
        config = config.with_seed(args.seed)

    if getattr(args, 'task', None) is not None:
        config = dataclasses.replace(config, pretrain=dataclasses.replace(config.pretrain, task=args.task))

    return config


def main() -> int:
    args = ArgParser(
            prog='ms-ssl',
            description='Residual-learning self-supervised pipeline for 3D sinus anomaly classification',
            epilog='Note: all stage outputs are cached by config hash and reused on rerun',
            commands=True,
    ).parse_args()

    logging.basicConfig(
            level=logging.DEBUG if args.debug else logging.INFO,
            format='%(asctime)s - %(levelname)s, %(name)s: %(message)s',
    )

    if args.command == 'validate':
        return validate(args.config)

    try:
        config = load(args)
    except ConfigError as e:
        return fail(str(e), EXIT_CONFIG_ERROR)

    if args.command == 'sweep':
        try:
            table = msssl.Pipeline(config).run_sweep(args.kind)
        except (ConfigError, ArgumentError) as e:
            return fail(str(e), EXIT_CONFIG_ERROR)
        except MSSSLException as e:
            return fail(str(e), EXIT_STAGE_FAILED)

        print(json.dumps(table.to_dict(), indent=2))

        return EXIT_OK

    until = args.until if args.command == 'run' else args.command

    return msssl.run_pipeline(config, until=until)


if __name__ == '__main__':
    sys.exit(main())
