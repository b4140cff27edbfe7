"""Single-threaded discrete-event loop over an integer-millisecond virtual clock."""

from __future__ import annotations

import heapq
import itertools
import random
from typing import Any, Callable


class Simulation:
    def __init__(self, seed: int = 0) -> None:
        self.now = 0
        self.seed = seed
        self.rng = random.Random(seed)
        self._queue: list[tuple[int, int, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()
        self.trace: list[str] = []

    def clock(self) -> int:
        return self.now

    def at(self, time: int, fn: Callable[..., Any], *args: Any) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        heapq.heappush(self._queue, (int(time), next(self._seq), fn, args))

    def after(self, delay: int, fn: Callable[..., Any], *args: Any) -> None:
        self.at(self.now + int(delay), fn, *args)

    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> int:
        """Process events in time order.

        Stops when the queue is empty, when the next event lies beyond ``until``
        (the clock is then advanced to ``until``), or as soon as ``stop()`` is true.
        Returns the number of events processed.
        """
        processed = 0
        while self._queue:
            if stop is not None and stop():
                return processed
            time = self._queue[0][0]
            if until is not None and time > until:
                break
            _, _, fn, args = heapq.heappop(self._queue)
            self.now = time
            fn(*args)
            processed += 1
        if until is not None and (stop is None or not stop()):
            self.now = max(self.now, until)
        return processed

    def log(self, message: str) -> None:
        self.trace.append(f"[t={self.now:>8}ms] {message}")
