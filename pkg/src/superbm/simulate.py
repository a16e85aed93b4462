"""Branching Brownian particle approximation of super-Brownian motion.

N particles of mass 1/N perform independent Brownian motions (generator half
Laplacian) and branch critically: each particle carries an exponential clock
of rate ``branching_rate * N``; when it rings the particle either dies or
splits into two at its current position, with equal probability.  Event times
are resolved exactly inside each grid step (offspring get fresh clocks for the
remainder of the step), so branching carries no time-discretization bias: the
total-mass process is an exact critical continuous-time Galton-Watson chain at
every N, with mean Z_0 and variance rate * t * Z_0 at time t.

The per-step branch probability of a live particle is 1 - exp(-rate*N*dt); at
production resolutions rate*N*dt exceeds 1, so several events per particle per
step are the norm and are all resolved and logged.

Grid states, per-step particle counts and the full event log are recorded; the
log is the empirical martingale measure consumed by the integration layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import BranchEventLog
from .measures import AtomicMeasure, MeasureError
from .paths import MeasurePath, TimeGrid
from .testfuncs import SchwartzTestFunction


class SimulationError(RuntimeError):
    pass


class PopulationCapExceeded(SimulationError):
    """Raised when a replicate exceeds the particle cap.

    Critical branching has heavy-tailed excursions; capped replicates must be
    excluded *and counted*, never silently truncated, or moments are biased.
    """

    def __init__(self, step: int, time: float, population: int, cap: int, n_events: int):
        super().__init__(
            f"population {population} exceeded cap {cap} at step {step} (t={time:.6g}) "
            f"after {n_events} branch events")
        self.step = step
        self.time = time
        self.population = population
        self.cap = cap
        self.n_events = n_events


@dataclass(frozen=True)
class SimParams:
    """Particle-system parameters.

    ``n_quantum`` is the resolution N (mass quantum 1/N); ``branching_rate``
    plays the role of the branching coefficient c and defaults to 1; override
    it only for convergence studies.
    """

    n_quantum: int
    dim: int
    grid: TimeGrid
    branching_rate: float = 1.0
    seed: int = 0
    cap_factor: float = 100.0

    def __post_init__(self):
        if self.n_quantum < 1:
            raise MeasureError(f"n_quantum must be >= 1, got {self.n_quantum}")
        if self.dim < 1:
            raise MeasureError(f"dim must be >= 1, got {self.dim}")
        if not (self.branching_rate > 0):
            raise MeasureError(f"branching_rate must be > 0, got {self.branching_rate}")
        if self.branching_rate * self.grid.dt > 0.1:
            raise MeasureError(
                f"branching_rate * dt = {self.branching_rate * self.grid.dt:.4g} exceeds "
                "the step-accuracy guard 0.1")

    @property
    def mass_quantum(self) -> float:
        return 1.0 / self.n_quantum

    @property
    def cap(self) -> int:
        return int(self.cap_factor * self.n_quantum)


def replicate_rng(master_seed: int, replicate: int) -> np.random.Generator:
    """Counter-based per-replicate stream: key = (master seed, replicate index)."""
    key = np.array([np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(replicate & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _initial_positions(m: AtomicMeasure, params: SimParams,
                       rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    total = m.total_mass()
    if total <= 0 or m.is_zero:
        return np.empty((0, params.dim)), False
    if m.dim != params.dim:
        raise MeasureError(f"initial measure has dimension {m.dim}, params say {params.dim}")
    n0_float = params.n_quantum * total
    n0 = int(round(n0_float))
    rounded = abs(n0 - n0_float) > 1e-9 * max(1.0, n0_float)
    if n0 == 0:
        return np.empty((0, params.dim)), rounded
    counts = rng.multinomial(n0, m.masses / total)
    return np.repeat(m.positions, counts, axis=0).astype(np.float64, copy=True), rounded


def simulate(m: AtomicMeasure, params: SimParams, *, record_states: bool = True,
             record_events: bool = True, track_motion: bool = True,
             rng: np.random.Generator | None = None) -> MeasurePath:
    """Run one replicate started from ``round(N * mass(m))`` particles drawn from m.

    Returns a :class:`MeasurePath` with per-grid states (when recorded), the
    per-grid particle counts, and the branching-event log.  Raises
    :class:`PopulationCapExceeded` when an excursion passes the cap.

    ``track_motion=False`` skips the Brownian increments (total-mass law is
    unchanged: branching is spatially homogeneous), for mass-only ensembles.
    It requires both record flags off, and it changes which draws are
    consumed, so realizations differ from motion-tracking runs per seed.
    """
    if not track_motion and (record_states or record_events):
        raise MeasureError("track_motion=False requires record_states=False and "
                           "record_events=False (positions would be wrong)")
    from ._kernel import STATUS_CAPPED, run_replicate

    if rng is None:
        rng = replicate_rng(params.seed, 0)
    grid = params.grid
    pos0, mass_rounded = _initial_positions(m, params, rng)
    n0 = pos0.shape[0]

    (status, capped_step, counts, states_flat, st_len, offsets,
     ev_t, ev_p, ev_s, ev_len, n_events) = run_replicate(
        rng, np.ascontiguousarray(pos0), grid.n_steps, grid.dt,
        params.branching_rate * params.n_quantum, params.cap,
        record_states, record_events, track_motion)

    if status == STATUS_CAPPED:
        raise PopulationCapExceeded(int(capped_step), (capped_step + 1) * grid.dt,
                                    int(counts[capped_step + 1]), params.cap, int(n_events))

    log = None
    if record_events:
        log = BranchEventLog(ev_t[:ev_len].copy(), ev_p[:ev_len].copy(), ev_s[:ev_len].copy(),
                             params.n_quantum, grid.horizon)

    q = params.mass_quantum
    meta = {"n_initial": n0, "mass_rounded": mass_rounded, "n_events": int(n_events),
            "seed": params.seed}
    if record_states:
        flat_pos = states_flat[:st_len].copy()
        flat_mass = np.full(st_len, q)
        return MeasurePath(grid, flat=(flat_pos, flat_mass, offsets[:len(grid) + 1].copy()),
                           events=log, counts=counts, mass_quantum=q, meta=meta)
    empty = (np.empty((0, params.dim)), np.empty(0), np.zeros(len(grid) + 1, dtype=np.int64))
    return MeasurePath(grid, flat=empty, events=log, counts=counts, mass_quantum=q, meta=meta)


def simulate_total_mass(z0: float, grid: TimeGrid, rng: np.random.Generator,
                        n_paths: int = 1) -> np.ndarray:
    """Euler-Maruyama paths of dZ = sqrt(Z) dB with absorption at 0.

    Full-truncation scheme (sqrt of the positive part); a fast oracle for
    total-mass statistics that is independent of the particle system.
    Returns an (n_paths, K+1) array.
    """
    if z0 < 0:
        raise MeasureError(f"z0 must be >= 0, got {z0}")
    dt = grid.dt
    z = np.full(n_paths, float(z0))
    out = np.empty((n_paths, len(grid)))
    out[:, 0] = z
    sdt = np.sqrt(dt)
    for k in range(grid.n_steps):
        noise = rng.standard_normal(n_paths)
        z = z + np.sqrt(np.maximum(z, 0.0)) * sdt * noise
        z = np.maximum(z, 0.0)
        out[:, k + 1] = z
    return out


@dataclass
class MartingaleProblemReport:
    """Ensemble diagnostics for the defining martingale problem."""

    times: np.ndarray
    mean_m: np.ndarray
    se_m: np.ndarray
    max_abs_mean: float
    max_abs_mean_se: float
    qv_lhs: float            # mean of M(T)^2
    qv_lhs_se: float
    qv_rhs: float            # mean of int <X, phi^2> ds
    qv_rhs_se: float
    gap: float               # paired mean of M(T)^2 - quadrature
    gap_se: float
    n_paths: int

    def summary(self) -> dict:
        return {
            "max_abs_mean": self.max_abs_mean, "max_abs_mean_se": self.max_abs_mean_se,
            "qv_lhs": self.qv_lhs, "qv_lhs_se": self.qv_lhs_se,
            "qv_rhs": self.qv_rhs, "qv_rhs_se": self.qv_rhs_se,
            "gap": self.gap, "gap_se": self.gap_se, "n_paths": self.n_paths,
        }


def martingale_series(path: MeasurePath, phi: SchwartzTestFunction) -> np.ndarray:
    """M(t)(phi) = <X(t),phi> - <X(0),phi> - int_0^t <X(s), half-lap phi> ds per grid t.

    The drift integral uses left-endpoint quadrature (predictable sampling);
    this routine is the single implementation shared by the closed-form
    stochastic integrals and the functional layer.
    """
    p = path.pair_series(phi)
    hl = path.pair_series(phi.half_laplacian_fn)
    return _martingale_series_from_pairings(p, hl, path.grid.dt)


def _martingale_series_from_pairings(p: np.ndarray, hl: np.ndarray, dt: float) -> np.ndarray:
    drift = np.concatenate([[0.0], np.cumsum(hl[:-1]) * dt])
    return p - p[0] - drift


def verify_martingale_problem(paths, phi: SchwartzTestFunction) -> MartingaleProblemReport:
    """Check mean-zero and quadratic variation of M(phi) over an ensemble.

    ``paths`` is an iterable of MeasurePaths simulated with common parameters.
    """
    from .stats import mean_se

    m_rows = []
    mt2 = []
    quad = []
    grid = None
    for path in paths:
        if grid is None:
            grid = path.grid
        ms = martingale_series(path, phi)
        m_rows.append(ms)
        mt2.append(ms[-1] ** 2)
        phi_sq = path.pair_series(lambda pos: phi(pos) ** 2)
        quad.append(float(np.trapezoid(phi_sq, dx=grid.dt)))
    m_rows = np.asarray(m_rows)
    mt2 = np.asarray(mt2)
    quad = np.asarray(quad)
    r = m_rows.shape[0]
    mean_m = m_rows.mean(axis=0)
    se_m = m_rows.std(axis=0, ddof=1) / np.sqrt(r) if r > 1 else np.full(m_rows.shape[1], np.nan)
    worst = int(np.argmax(np.abs(mean_m)))
    lhs, lhs_se = mean_se(mt2)
    rhs, rhs_se = mean_se(quad)
    gap, gap_se = mean_se(mt2 - quad)
    return MartingaleProblemReport(
        times=grid.times, mean_m=mean_m, se_m=se_m,
        max_abs_mean=float(np.abs(mean_m[worst])), max_abs_mean_se=float(se_m[worst]),
        qv_lhs=lhs, qv_lhs_se=lhs_se, qv_rhs=rhs, qv_rhs_se=rhs_se,
        gap=gap, gap_se=gap_se, n_paths=r)
