"""Branching-event logs: the empirical martingale measure of a particle run.

Each event is (time, position, sign) with sign +1 for a binary split and -1
for a death; every event moves total mass by one quantum 1/N.  Logs store the
events as flat arrays sorted by time, which makes stochastic integrals plain
masked sums and prefix sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class EventLogError(ValueError):
    """Inconsistent branch-event data."""


class BranchEvent(NamedTuple):
    time: float
    position: np.ndarray
    sign: int


@dataclass(frozen=True)
class BranchEventLog:
    """Time-sorted branching events of one replicate.

    ``n_quantum`` is the particle resolution N (every event carries mass 1/N),
    ``horizon`` the simulation horizon T.
    """

    times: np.ndarray
    positions: np.ndarray
    signs: np.ndarray
    n_quantum: int
    horizon: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        signs = np.asarray(self.signs, dtype=np.int8)
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[0] != times.shape[0]:
            raise EventLogError(
                f"positions shape {positions.shape} does not match {times.shape[0]} events")
        if signs.shape != times.shape:
            raise EventLogError("signs and times must have equal length")
        if times.size:
            if np.any(np.diff(times) < 0):
                raise EventLogError("event times must be nondecreasing")
            if not (times[0] > 0 and times[-1] <= self.horizon * (1 + 1e-12)):
                raise EventLogError("event times must lie in (0, horizon]")
            if not np.all(np.abs(signs) == 1):
                raise EventLogError("event signs must be +1 or -1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "signs", signs)

    @staticmethod
    def empty(dim: int, n_quantum: int, horizon: float) -> "BranchEventLog":
        return BranchEventLog(np.empty(0), np.empty((0, dim)), np.empty(0, dtype=np.int8),
                              n_quantum, horizon)

    @property
    def mass_quantum(self) -> float:
        return 1.0 / self.n_quantum

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def event(self, i: int) -> BranchEvent:
        return BranchEvent(float(self.times[i]), self.positions[i].copy(), int(self.signs[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.event(i)

    def count_upto(self, t: float) -> int:
        """Number of events with time <= t."""
        return int(np.searchsorted(self.times, t, side="right"))

    def cumulative_signed_counts(self) -> np.ndarray:
        return np.cumsum(self.signs.astype(np.int64))

    def validate_against_initial(self, n_initial: int) -> None:
        """Total particle count must never go negative along the log."""
        if len(self) == 0:
            return
        running = n_initial + self.cumulative_signed_counts()
        if running.min() < 0:
            i = int(np.argmax(running < 0))
            raise EventLogError(
                f"signed mass drives the population negative at event {i} "
                f"(t={self.times[i]:.6g})")

    def equals(self, other: "BranchEventLog") -> bool:
        return (self.n_quantum == other.n_quantum
                and self.horizon == other.horizon
                and self.positions.shape == other.positions.shape
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.signs, other.signs))
