import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Sequence

import numpy as np

from . import metrics
from .config import config

log = logging.getLogger("steering.worker_pool")


class WorkerPool:
    """Bounded thread pool for point-parallel numerics.

    Results are always reassembled in input order, so output never depends on
    which worker finished first. Work submitted from inside a worker runs
    inline on that worker. The executor is created on first use and released
    by `stop()` or on leaving a `with` block.
    """

    def __init__(self, workers: int | None = None):
        self.workers = max(1, int(workers if workers is not None else config.THREADS))
        self._occupied = 0
        self._lock = threading.Lock()
        self._local = threading.local()
        self._executor: ThreadPoolExecutor | None = None
        self._stopped = False

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def running(self) -> bool:
        return self._executor is not None

    def _pool(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="steering-worker")
                log.debug("worker pool started", extra={"workers": self.workers})
            return self._executor

    def stop(self) -> None:
        with self._lock:
            self._stopped = True
            ex, self._executor = self._executor, None
        if ex is not None:
            ex.shutdown(wait=True)
            log.debug("worker pool stopped", extra={"workers": self.workers})

    def _enter(self):
        with self._lock:
            self._occupied += 1
            metrics.ACTIVE_WORKERS.set(self._occupied)

    def _leave(self):
        with self._lock:
            self._occupied -= 1
            metrics.ACTIVE_WORKERS.set(self._occupied)

    def _run(self, fn: Callable, arg):
        self._enter()
        self._local.inside = True
        try:
            return fn(arg)
        finally:
            self._local.inside = False
            self._leave()

    def map_tasks(self, fn: Callable[[Any], Any], items: Sequence[Any]) -> list[Any]:
        if self._stopped:
            raise RuntimeError("worker pool is stopped")
        if self.workers <= 1 or len(items) <= 1 or getattr(self._local, "inside", False):
            return [fn(item) for item in items]
        return list(self._pool().map(lambda item: self._run(fn, item), items))

    def map_chunks(self, fn: Callable[[np.ndarray], np.ndarray], points: np.ndarray, chunk: int | None = None) -> np.ndarray:
        points = np.asarray(points)
        n = points.shape[0]
        if self.workers <= 1 or n < 2 * self.workers or getattr(self._local, "inside", False):
            return fn(points)
        chunk = chunk or -(-n // self.workers)
        pieces = [points[i:i + chunk] for i in range(0, n, chunk)]
        log.debug("dispatching chunks", extra={"chunks": len(pieces), "workers": self.workers})
        results = self.map_tasks(fn, pieces)
        return np.concatenate(results, axis=0)
