from __future__ import annotations

import asyncio
import contextlib
import logging
import traceback
import typing
from dataclasses import dataclass
from datetime import datetime

import tenacity
import torch

from .exceptions import MSSSLException, RetryableJobError, StateError

DEFAULT_LOGGER_NAME = 'ms-ssl.jobs'
DEFAULT_QUEUE_SIZE = 1000

DEFAULT_WORKERS = 1
MIN_RETRY_AFTER = 0
MAX_RETRY_AFTER = 60
RETRY_ATTEMPTS = 3
RETRY_BASE = 2


@dataclass
class Job:
    name: str
    fn: typing.Callable[[], typing.Any]

    def __repr__(self) -> str:
        return f'Job {self.name}'


class JobQueue:
    """In-memory queue of independent jobs (folds, sweep cells), filled before the workers start"""

    def __init__(self, *, queue_size: int = DEFAULT_QUEUE_SIZE, logger: logging.Logger = None) -> None:
        self._queue_size = int(queue_size)

        self.queue = asyncio.Queue(maxsize=self._queue_size)  # type: asyncio.Queue

        self._log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    def add_job(self, job: Job) -> None:
        try:
            self.queue.put_nowait(job)
        except asyncio.QueueFull:
            self._log.error('Failed to add %r - queue is full', job)

            raise StateError(f'Job queue is full ({self._queue_size} jobs)')

    def get_job(self) -> typing.Optional[Job]:
        try:
            job = self.queue.get_nowait()
        except asyncio.QueueEmpty:
            return None

        self.queue.task_done()

        return job

    def current_items_count(self) -> int:
        return self.queue.qsize()


@contextlib.contextmanager
def transient_failures(name: str) -> typing.Iterator[None]:
    """Reraises I/O errors and device out-of-memory as RetryableJobError"""
    try:
        yield
    except torch.cuda.OutOfMemoryError as e:
        torch.cuda.empty_cache()

        raise RetryableJobError(f'{name} ran out of device memory: {e}') from e
    except OSError as e:
        raise RetryableJobError(f'{name} hit an I/O error: {e}') from e


class WaitExponential(tenacity.wait.wait_base):
    def __init__(self, starts: float, ends: float, base: float = RETRY_BASE) -> None:
        self._starts = starts
        self._ends = ends
        self._base = base

    def __call__(self, retry_state: tenacity.RetryCallState) -> typing.Union[int, float]:
        return min(self.calculate_delay(retry_state.attempt_number), self._ends)

    def calculate_delay(self, rate: int) -> typing.Union[int, float]:
        try:
            return self._starts + (self._base ** rate)
        except OverflowError:
            return self._ends


class JobRunner:
    """
    Runs jobs on a pool of asyncio workers, each job in the default thread executor.
    RetryableJobError is retried with exponential back-off, any other failure rejects the job.
    One worker keeps execution order and therefore bitwise reproducibility.
    """

    def __init__(
            self,
            name: str,
            *,
            workers: int = DEFAULT_WORKERS,
            min_retry_after: float = None,
            max_retry_after: float = None,
            retry_attempts: int = None,
            retry_base: float = None,
            logger: logging.Logger = None,
    ) -> None:
        if workers < 1:
            raise StateError(f'Job runner needs at least one worker, got {workers}')

        self._name = name
        self._workers = workers
        self._min_retry_after = MIN_RETRY_AFTER if min_retry_after is None else min_retry_after
        self._max_retry_after = MAX_RETRY_AFTER if max_retry_after is None else max_retry_after
        self._retry_attempts = RETRY_ATTEMPTS if retry_attempts is None else retry_attempts
        self._retry_base = RETRY_BASE if retry_base is None else retry_base

        self._jobs_done = 0
        self._jobs_rejected = 0
        self._last_error = None

        self.results = {}  # type: typing.Dict[str, typing.Any]
        self.failures = {}  # type: typing.Dict[str, str]

        self._log_type = logger
        self._log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    def run(self, jobs: typing.Sequence[Job]) -> typing.Dict[str, typing.Any]:
        return asyncio.run(self.run_async(jobs))

    async def run_async(self, jobs: typing.Sequence[Job]) -> typing.Dict[str, typing.Any]:
        queue = JobQueue(queue_size=max(len(jobs), 1), logger=self._log_type)

        for job in jobs:
            queue.add_job(job)

        self._log.info('Running %d jobs of %s on %d worker(s)', len(jobs), self._name, self._workers)

        await asyncio.gather(*[self.assign_worker(queue) for _ in range(min(self._workers, max(len(jobs), 1)))])

        return {job.name: self.results[job.name] for job in jobs if job.name in self.results}

    async def assign_worker(self, queue: JobQueue) -> None:
        @tenacity.retry(
                stop=tenacity.stop_after_attempt(self._retry_attempts),
                wait=WaitExponential(self._min_retry_after, self._max_retry_after, self._retry_base),
                retry=tenacity.retry_if_exception_type(RetryableJobError),
                reraise=True,
        )
        async def execute(job: Job) -> typing.Any:
            return await asyncio.get_running_loop().run_in_executor(None, job.fn)

        while True:
            job = queue.get_job()

            if job is None:
                break

            try:
                self.results[job.name] = await execute(job)

                self._jobs_done += 1
            except RetryableJobError as e:
                self._reject(job, e, 'has failed after retries')
            except MSSSLException as e:
                self._reject(job, e, 'is rejected')
            except Exception as e:
                self._reject(job, e, 'raised an unexpected exception')

                self._log.debug('Traceback of %r', job, exc_info=True)

    def get_state(self) -> dict:
        return {
            'was_done': self._jobs_done,
            'was_rejected': self._jobs_rejected,
        }

    def get_last_error(self, clear: bool = False) -> typing.Optional[dict]:
        error = self._last_error

        if clear:
            self._last_error = None

        return error

    def _reject(self, job: Job, error: Exception, reason: str) -> None:
        self._jobs_rejected += 1
        self.failures[job.name] = repr(error)
        self._last_error = {
            'job': job.name,
            'reason': repr(error),
            'trace': traceback.format_exc(),
            'stamp': datetime.now().strftime('%d.%m.%Y %H:%M:%S'),
        }

        self._log.error('%r of %s %s: %s', job, self._name, reason, repr(error))

    def __repr__(self) -> str:
        return f'Job runner {self._name}, {self._workers} worker(s)'


def run_once(name: str, fn: typing.Callable[[], typing.Any], *, logger: logging.Logger = None) -> typing.Any:
    """Runs a single training job with transient failures retried. Any other failure raises StateError"""
    def job() -> typing.Any:
        with transient_failures(name):
            return fn()

    runner = JobRunner(name, workers=1, logger=logger)
    results = runner.run([Job(name, job)])

    if name not in results:
        raise StateError(f'{name} failed: {runner.failures[name]}')

    return results[name]
