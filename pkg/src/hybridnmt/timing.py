"""Scoped wall-clock accumulators for the decoding profiler.

Model code takes an optional timer and wraps its submodule calls in
``timer.scope(category)``; the null timer makes that free-ish when profiling
is off. Scopes must not nest (categories partition the decode loop).
"""

from __future__ import annotations

from contextlib import contextmanager, nullcontext
from time import perf_counter

ENCODING = "Encoding"
ATTENTION = "Attention"
SELF_OR_GRU = "SelfAtt/GRU"
FFN = "FFN"
SOFTMAX = "Softmax"
OTHERS = "Others"

DECODE_CATEGORIES = (ATTENTION, SELF_OR_GRU, FFN, SOFTMAX)


class ScopedTimer:
    """Accumulates seconds per category plus raw per-step samples."""

    def __init__(self):
        self.categories: dict[str, float] = {}
        # (step_index, seconds, live_hypotheses) for per-step trend fits
        self.step_samples: list[tuple[int, float, int]] = []

    @contextmanager
    def scope(self, name: str):
        t0 = perf_counter()
        try:
            yield
        finally:
            self.categories[name] = self.categories.get(name, 0.0) + perf_counter() - t0

    def add(self, name: str, seconds: float) -> None:
        self.categories[name] = self.categories.get(name, 0.0) + seconds

    def record_step(self, step_index: int, seconds: float, live: int) -> None:
        self.step_samples.append((step_index, seconds, live))

    def get(self, name: str) -> float:
        return self.categories.get(name, 0.0)


class _NullTimer:
    _ctx = nullcontext()

    def scope(self, name: str):
        return self._ctx

    def add(self, name: str, seconds: float) -> None:
        pass

    def record_step(self, step_index: int, seconds: float, live: int) -> None:
        pass


NULL_TIMER = _NullTimer()
