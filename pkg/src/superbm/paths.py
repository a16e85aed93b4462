"""Measure-valued paths on a uniform time grid, stopped paths and the vertical bump.

A :class:`MeasurePath` stores one atomic measure per grid time.  Internally the
states live in one flat (sum n_k, d) position array with per-state offsets so
that pairing a single test function against *all* states is one vectorized
evaluation plus a segmented reduction; that path is the workhorse behind every
time quadrature in the library.

A :class:`StoppedPath` freezes the tail beyond its stop time and carries the
vertical bumps as an explicit list of (point, mass) pairs instead of copying
states.  Bumping is O(1) and pairings on a bumped path are computed as the
frozen pairing plus ``eps * f(x)`` terms, which keeps one-sided difference
quotients of affine functionals exact to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .measures import AtomicMeasure, MeasureError, as_point, bl_distance, _field_values


class GridError(ValueError):
    """Off-grid time or mismatched grids."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_K = T with t_k = k * dt."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (self.horizon > 0):
            raise GridError(f"horizon must be > 0, got {self.horizon}")
        if not (isinstance(self.n_steps, int) and self.n_steps >= 1):
            raise GridError(f"n_steps must be a positive integer, got {self.n_steps}")

    @staticmethod
    def from_step(horizon: float, dt: float) -> "TimeGrid":
        k = round(horizon / dt)
        if k < 1 or abs(k * dt - horizon) > 1e-9 * max(1.0, horizon):
            raise GridError(f"dt={dt} does not divide horizon={horizon}")
        return TimeGrid(float(horizon), int(k))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of t; raises when t is off the grid (no interpolation)."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(k * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            raise GridError(f"time {t} is not on the grid (dt={self.dt}, T={self.horizon})")
        return k

    def __len__(self) -> int:
        return self.n_steps + 1


class MeasurePath:
    """A sequence of atomic measures indexed by the grid times.

    ``events`` (a :class:`superbm.events.BranchEventLog` or None) and
    ``counts`` are attached by the simulator; paths assembled from explicit
    states leave them as None.
    """

    __slots__ = ("grid", "positions_flat", "masses_flat", "offsets", "events",
                 "counts", "mass_quantum", "meta")

    def __init__(self, grid: TimeGrid, states: Sequence[AtomicMeasure] | None = None, *,
                 flat: tuple | None = None, events=None, counts=None,
                 mass_quantum: float | None = None, meta: dict | None = None):
        self.grid = grid
        if flat is not None:
            self.positions_flat, self.masses_flat, self.offsets = flat
        else:
            if states is None or len(states) != len(grid):
                n = 0 if states is None else len(states)
                raise GridError(f"need {len(grid)} states, got {n}")
            dim = next((s.dim for s in states if not s.is_zero), states[0].dim or 1)
            self.positions_flat = np.concatenate(
                [s.positions.reshape(-1, dim) for s in states]) if states else np.empty((0, dim))
            self.masses_flat = np.concatenate([s.masses for s in states])
            self.offsets = np.concatenate(
                [[0], np.cumsum([s.n_atoms for s in states])]).astype(np.int64)
        self.events = events
        self.counts = counts
        self.mass_quantum = mass_quantum
        self.meta = meta or {}

    @property
    def dim(self) -> int:
        return self.positions_flat.shape[1]

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    def n_atoms_at(self, k: int) -> int:
        return int(self.offsets[k + 1] - self.offsets[k])

    def state_index(self, k: int) -> AtomicMeasure:
        lo, hi = int(self.offsets[k]), int(self.offsets[k + 1])
        return AtomicMeasure(self.positions_flat[lo:hi], self.masses_flat[lo:hi],
                             _validated=True)

    def state_at(self, t: float) -> AtomicMeasure:
        return self.state_index(self.grid.index_of(t))

    def pair_series(self, f) -> np.ndarray:
        """<X(t_k), f> for every grid index k, in one vectorized pass.

        Segment sums accumulate in float64; exact-identity tests should go
        through ``AtomicMeasure.pair`` (fsum) on single states instead.
        """
        out = np.zeros(len(self.grid))
        if self.positions_flat.shape[0] == 0:
            return out
        vals = _field_values(f, self.positions_flat) * self.masses_flat
        return _segment_sums(vals, self.offsets, out)

    def value_series(self, values_flat: np.ndarray) -> np.ndarray:
        """Segment-sum precomputed per-atom values (already mass-weighted)."""
        out = np.zeros(len(self.grid))
        if values_flat.shape[0] == 0:
            return out
        return _segment_sums(values_flat, self.offsets, out)

    def total_mass_series(self) -> np.ndarray:
        if self.counts is not None and self.mass_quantum is not None:
            return self.counts * self.mass_quantum
        out = np.zeros(len(self.grid))
        return _segment_sums(self.masses_flat.copy(), self.offsets, out)


def _segment_sums(vals: np.ndarray, offsets: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Sum vals over segments [offsets[k], offsets[k+1]) into out."""
    n = vals.shape[0]
    starts = offsets[:-1]
    lengths = np.diff(offsets)
    nonempty = lengths > 0
    if not nonempty.any():
        return out
    # reduceat misbehaves on empty segments and on start == len(vals)
    red = np.add.reduceat(vals, np.minimum(starts[nonempty], n - 1))
    out[nonempty] = red
    return out


class StoppedPath:
    """A path frozen from ``stop_index`` on, plus vertical bumps at that time.

    Reading at u > t returns the state at t; bumps (x, eps) are atoms added to
    every state from the stop time onward.  Instances are immutable.
    """

    __slots__ = ("base", "stop_index", "bumps")

    def __init__(self, base: MeasurePath, stop_index: int, bumps: tuple = ()):
        self.base = base
        self.stop_index = int(stop_index)
        self.bumps = bumps

    @property
    def grid(self) -> TimeGrid:
        return self.base.grid

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def stop_time(self) -> float:
        return self.stop_index * self.grid.dt

    def effective_index(self, k: int) -> int:
        return min(k, self.stop_index)

    def state_index(self, k: int) -> AtomicMeasure:
        st = self.base.state_index(self.effective_index(k))
        if self.bumps and k >= self.stop_index:
            for x, eps in self.bumps:
                st = st.add_atom(x, eps)
        return st

    def state_at(self, t: float) -> AtomicMeasure:
        return self.state_index(self.grid.index_of(t))

    def pair_at(self, k: int, f) -> float:
        """<state(t_k), f> computed as frozen pairing + sum eps * f(x).

        The bump contribution is added after the base sum so that pairing
        differences under a bump are exactly ``eps * f(x)`` up to one rounding.
        """
        val = self.base.state_index(self.effective_index(k)).pair(f)
        if self.bumps and k >= self.stop_index:
            val += math.fsum(
                float(eps) * float(_field_values(f, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])
                for x, eps in self.bumps)
        return val

    def pair_series(self, f) -> np.ndarray:
        vals = self.base.pair_series(f)
        vals[self.stop_index + 1:] = vals[self.stop_index]
        if self.bumps:
            bump_total = math.fsum(
                float(eps) * float(_field_values(f, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])
                for x, eps in self.bumps)
            vals[self.stop_index:] += bump_total
        return vals

    def total_mass_at_stop(self) -> float:
        st = self.base.state_index(self.stop_index)
        return st.total_mass() + math.fsum(float(eps) for _, eps in self.bumps)


def stop(path, t: float) -> StoppedPath:
    """Freeze the path at grid time t; idempotent."""
    if isinstance(path, StoppedPath):
        k = path.grid.index_of(t)
        if k >= path.stop_index:
            return path
        # stopping strictly earlier discards bumps, which only act from the
        # original stop time onward
        return StoppedPath(path.base, k, ())
    k = path.grid.index_of(t)
    return StoppedPath(path, k, ())


def bump(stopped: StoppedPath, x, eps: float) -> StoppedPath:
    """Add mass eps >= 0 at x to every state from the stop time on."""
    if not isinstance(stopped, StoppedPath):
        raise TypeError("bump acts on stopped paths; call stop(path, t) first")
    if not (eps >= 0):
        raise MeasureError(f"bump mass must be >= 0, got {eps}")
    p = as_point(x, stopped.dim)
    return StoppedPath(stopped.base, stopped.stop_index, stopped.bumps + ((p, float(eps)),))


def d_infty(a: tuple, b: tuple) -> float:
    """Metric on (time, stopped path) pairs.

    sup over grid times u of the bounded-Lipschitz distance between the
    stopped states, plus |t - t'|.  O(K) LP solves; test-scale only.
    """
    t1, p1 = a
    t2, p2 = b
    sp1 = p1 if isinstance(p1, StoppedPath) else stop(p1, t1)
    sp2 = p2 if isinstance(p2, StoppedPath) else stop(p2, t2)
    if sp1.grid != sp2.grid:
        raise GridError("d_infty requires both paths on the same grid")
    sp1 = stop(sp1, t1)
    sp2 = stop(sp2, t2)
    sup = 0.0
    for k in range(len(sp1.grid)):
        dist = bl_distance(sp1.state_index(k), sp2.state_index(k))
        if dist > sup:
            sup = dist
    return sup + abs(t1 - t2)
