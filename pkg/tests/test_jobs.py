import unittest

from msssl.exceptions import DataError, RetryableJobError, StateError
from msssl.jobs import Job, JobQueue, JobRunner, WaitExponential, run_once, transient_failures
from tests import mock_logger


class Flaky:
    def __init__(self, failures: int) -> None:
        self.failures = failures
        self.calls = 0

    def __call__(self) -> str:
        self.calls += 1

        if self.calls <= self.failures:
            raise RetryableJobError('device busy')

        return 'ok'


def broken() -> None:
    raise DataError('missing volume')


class FlakyDisk:
    def __init__(self) -> None:
        self.calls = 0

    def __call__(self) -> str:
        self.calls += 1

        with transient_failures('checkpoint write'):
            if self.calls == 1:
                raise OSError(28, 'No space left on device')

        return 'saved'


class TestJobs(unittest.TestCase):
    def setUp(self) -> None:
        self.logger = mock_logger()
        self.runner = JobRunner('test', workers=2, max_retry_after=0, logger=self.logger)

    def test_can_run_jobs_in_normal_conditions(self) -> None:
        jobs = [Job(f'fold{k}', lambda k=k: k * k) for k in range(4)]

        results = self.runner.run(jobs)

        self.assertEqual(results, {'fold0': 0, 'fold1': 1, 'fold2': 4, 'fold3': 9})
        self.assertEqual(list(results), ['fold0', 'fold1', 'fold2', 'fold3'])
        self.assertEqual(self.runner.get_state(), {'was_done': 4, 'was_rejected': 0})
        self.assertIsNone(self.runner.get_last_error())

    def test_retryable_failures_are_retried(self) -> None:
        flaky = Flaky(2)

        results = self.runner.run([Job('flaky', flaky)])

        self.assertEqual(results, {'flaky': 'ok'})
        self.assertEqual(flaky.calls, 3)

    def test_io_errors_are_retried(self) -> None:
        disk = FlakyDisk()

        self.assertEqual(self.runner.run([Job('fold0', disk)]), {'fold0': 'saved'})
        self.assertEqual(disk.calls, 2)

        with self.assertRaises(RetryableJobError):
            with transient_failures('read'):
                raise FileNotFoundError('cae.pt')

        with self.assertRaises(DataError):
            with transient_failures('read'):
                raise DataError('bad volume')

    def test_can_run_single_job_once_in_normal_conditions(self) -> None:
        disk = FlakyDisk()

        self.assertEqual(run_once('train-cae', disk, logger=self.logger), 'saved')
        self.assertEqual(disk.calls, 2)

        with self.assertRaises(StateError) as context:
            run_once('pretrain', broken, logger=self.logger)

        self.assertIn('missing volume', str(context.exception))

    def test_retries_are_bounded(self) -> None:
        flaky = Flaky(5)

        results = self.runner.run([Job('flaky', flaky)])

        self.assertEqual(results, {})
        self.assertEqual(flaky.calls, 3)
        self.assertIn('flaky', self.runner.failures)

    def test_cant_run_broken_job(self) -> None:
        results = self.runner.run([Job('broken', broken), Job('fine', lambda: 1)])

        self.assertEqual(results, {'fine': 1})
        self.assertEqual(self.runner.get_state(), {'was_done': 1, 'was_rejected': 1})
        self.assertIn('missing volume', self.runner.failures['broken'])
        self.logger.error.assert_called_once()

        error = self.runner.get_last_error(clear=True)

        self.assertEqual(error['job'], 'broken')
        self.assertIn('DataError', error['trace'])
        self.assertIsNone(self.runner.get_last_error())

    def test_unexpected_exceptions_are_rejected(self) -> None:
        results = self.runner.run([Job('zero', lambda: 1 / 0)])

        self.assertEqual(results, {})
        self.assertIn('ZeroDivisionError', self.runner.failures['zero'])

    def test_cant_overfill_queue(self) -> None:
        queue = JobQueue(queue_size=1, logger=self.logger)
        queue.add_job(Job('first', lambda: None))

        with self.assertRaises(StateError):
            queue.add_job(Job('second', lambda: None))

        self.assertEqual(queue.current_items_count(), 1)
        self.assertEqual(queue.get_job().name, 'first')
        self.assertIsNone(queue.get_job())

    def test_cant_build_runner_without_workers(self) -> None:
        with self.assertRaises(StateError):
            JobRunner('test', workers=0)

    def test_wait_is_capped(self) -> None:
        wait = WaitExponential(1, 5, 2)

        self.assertEqual(wait.calculate_delay(1), 3)
        self.assertEqual(wait.calculate_delay(2), 5)


if __name__ == '__main__':
    unittest.main()
