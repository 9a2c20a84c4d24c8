from typing import Iterable


class MSSSLException(Exception):
    pass


class VolumeIOError(MSSSLException):
    pass


class VolumeValidationError(MSSSLException):
    def __init__(self, bad_voxels: int, source: str = None) -> None:
        super().__init__(f'{bad_voxels} non-finite voxel(s) in volume{f" {source}" if source else ""}')

        self.bad_voxels = bad_voxels
        self.source = source

    def __repr__(self):
        return f'Volume validation error, non-finite voxels: {self.bad_voxels}, source: {self.source}'


class DimensionError(MSSSLException):
    pass


class ArgumentError(MSSSLException):
    pass


class PhantomConfigError(MSSSLException):
    pass


class SplitError(MSSSLException):
    pass


class SpecMismatchError(MSSSLException):
    def __init__(self, expected: str, actual: str, part: str = None) -> None:
        super().__init__(f'Checkpoint spec hash {actual} does not match expected {expected} ({part or "model"})')

        self.expected = expected
        self.actual = actual
        self.part = part

    def __repr__(self):
        return f'Spec mismatch error, part: {self.part}, expected: {self.expected}, actual: {self.actual}'


class ContractViolationError(MSSSLException):
    pass


class DataError(MSSSLException):
    pass


class StateError(MSSSLException):
    pass


class MetricError(MSSSLException):
    pass


class AggregationError(MSSSLException):
    pass


class ConfigError(MSSSLException):
    pass


class ConfigParseError(ConfigError):
    def __init__(self, reason: str, *, line: int = None, column: int = None) -> None:
        location = '' if line is None else f' at line {line}, column {column}'

        super().__init__(f'Could not parse config{location}: {reason}')

        self.line = line
        self.column = column

    def __repr__(self):
        return f'Config parse error, line: {self.line}, column: {self.column}'


class StageFailedError(MSSSLException):
    def __init__(self, stage: str, reason: str) -> None:
        super().__init__(f'Stage {stage} failed: {reason}')

        self.stage = stage
        self.reason = reason

    def __repr__(self):
        return f'Stage execution error, stage: {self.stage}, reason: {self.reason}'


class RetryableJobError(MSSSLException):
    pass


def format_allowed(values: Iterable) -> str:
    return ', '.join(str(value) for value in values)
