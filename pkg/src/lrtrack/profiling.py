"""Per-stage wall time and multiply-accumulate accounting."""
from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager, nullcontext

from .tensor import MacCounter


class StageProfile:
    def __init__(self):
        self.seconds: dict[str, float] = defaultdict(float)
        self.macs: dict[str, int] = defaultdict(int)
        self.calls: dict[str, int] = defaultdict(int)

    @contextmanager
    def stage(self, name: str):
        with MacCounter() as mc:
            t0 = time.perf_counter()
            try:
                yield
            finally:
                self.seconds[name] += time.perf_counter() - t0
                self.macs[name] += mc.total
                self.calls[name] += 1

    def total(self, names, what: str = "seconds") -> float:
        table = getattr(self, what)
        return sum(table.get(n, 0) for n in names)


def stage(profile: StageProfile | None, name: str):
    return nullcontext() if profile is None else profile.stage(name)
