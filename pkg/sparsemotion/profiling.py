"""Stage timing used by the streamer and the runtime table.

Networks accept an optional clock and wrap their sublayers in
``clock.stage(name)``; nested stages accumulate independently, so a parent
stage's total is always at least the sum of the stages measured inside it.
"""

import contextlib
import time
from collections import defaultdict
from collections.abc import Iterator


class StageClock:
    """Accumulates monotonic elapsed seconds per named stage."""

    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)
        self.counts: dict[str, int] = defaultdict(int)

    @contextlib.contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - start
            self.counts[name] += 1

    def elapsed(self, name: str) -> float:
        return self.totals.get(name, 0.0)

    def reset(self) -> None:
        self.totals.clear()
        self.counts.clear()


class NullClock(StageClock):
    """Clock that measures nothing (training and tests)."""

    @contextlib.contextmanager
    def stage(self, name: str) -> Iterator[None]:
        yield


NULL_CLOCK = NullClock()
