from __future__ import annotations

import time


class SystemClock:
    def now(self) -> float:
        return time.time()


class SimulatedClock:
    """Manually advanced clock; nothing moves unless a test calls ``advance``."""

    def __init__(self, t0: float = 1_700_000_000.0):
        self._t = float(t0)

    def now(self) -> float:
        return self._t

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("time only moves forward")
        self._t += dt
        return self._t

    def set(self, t: float) -> None:
        if t < self._t:
            raise ValueError("time only moves forward")
        self._t = float(t)
