"""Bounded-concurrency mapping that preserves input order."""

from __future__ import annotations

import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from typing import Callable, Iterable, Iterator, TypeVar

T = TypeVar("T")
R = TypeVar("R")


class Gauge:
    """Thread-safe high-water mark for in-flight work."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def __enter__(self):
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)
        return self

    def __exit__(self, *exc):
        with self._lock:
            self.current -= 1
        return False


def bounded_map(
    fn: Callable[[T], R],
    items: Iterable[T],
    concurrency: int,
    *,
    gauge: Gauge | None = None,
) -> Iterator[R]:
    """Apply fn to items with at most `concurrency` calls in flight.

    Results come back in input order; items are pulled lazily so the
    input can be a stream.  Exceptions from fn propagate at yield time.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")

    def run(item: T) -> R:
        if gauge is None:
            return fn(item)
        with gauge:
            return fn(item)

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures: dict = {}
        done_buf: dict[int, R] = {}
        next_emit = 0
        submitted = 0
        it = iter(items)
        exhausted = False
        while True:
            while not exhausted and len(futures) < concurrency:
                try:
                    item = next(it)
                except StopIteration:
                    exhausted = True
                    break
                futures[pool.submit(run, item)] = submitted
                submitted += 1
            if not futures and exhausted:
                break
            done, _ = wait(set(futures), return_when=FIRST_COMPLETED)
            for fut in done:
                done_buf[futures.pop(fut)] = fut
            while next_emit in done_buf:
                yield done_buf.pop(next_emit).result()
                next_emit += 1
