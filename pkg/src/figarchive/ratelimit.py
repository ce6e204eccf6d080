"""Shared request pacing and retry helpers.

The limiter guarantees a strict sliding-window bound: for a configured rate
``r``, any window of one second contains at most ``ceil(r)`` grants.  A plain
token bucket cannot give that guarantee (a full bucket plus refill admits up
to ``ceil(r) + floor(r)`` grants in one window), so grants are paced off a log
of recent grant times instead: a new grant waits until the ``ceil(r)``-th most
recent grant is more than one second old.
"""

from __future__ import annotations

import math
import threading
import time
from collections import deque
from typing import Callable, TypeVar

from .errors import FetchError

# Safety margin added to the window so scheduling jitter between the grant
# and the observer's timestamp cannot compress gaps below one second.
_WINDOW_MARGIN = 0.05

T = TypeVar("T")


class SlidingWindowLimiter:
    """Thread-safe limiter enforcing <= ceil(rate) grants per sliding second."""

    def __init__(self, rate_per_second: float):
        if rate_per_second <= 0:
            raise ValueError("rate_per_second must be positive")
        self.rate = rate_per_second
        self.capacity = math.ceil(rate_per_second)
        self._grants: deque[float] = deque(maxlen=self.capacity)
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a grant is allowed; returns the grant time (monotonic)."""
        while True:
            with self._lock:
                now = time.monotonic()
                if len(self._grants) < self.capacity:
                    self._grants.append(now)
                    return now
                oldest = self._grants[0]
                wait = oldest + 1.0 + _WINDOW_MARGIN - now
                if wait <= 0:
                    self._grants.append(now)
                    return now
            time.sleep(wait)


def retry_call(
    func: Callable[[], T],
    *,
    max_retries: int,
    base_delay: float,
    retriable: tuple[type[BaseException], ...] = (Exception,),
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[T, int]:
    """Call ``func`` with exponential backoff.

    ``max_retries`` counts additional attempts after the first; the delay
    before retry ``i`` (1-based) is ``base_delay * 2**(i - 1)``.  Returns
    ``(result, attempts)``.  Raises :class:`FetchError` carrying the attempt
    count once retries are exhausted.
    """
    if max_retries < 0:
        raise ValueError("max_retries must be >= 0")
    attempts = 0
    while True:
        attempts += 1
        try:
            return func(), attempts
        except retriable as exc:
            if attempts > max_retries:
                raise FetchError(
                    f"gave up after {attempts} attempts: {exc}", attempts=attempts
                ) from exc
            sleep(base_delay * (2 ** (attempts - 1)))
