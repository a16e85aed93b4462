"""Stochastic integration against the branching-event log.

The particle-level stochastic integral of a predictable integrand phi is the
event sum

    I(phi)(t) = (1/N) * sum over events e with e.time <= t of
                sign(e) * phi(path, e.time, e.position),

the exact discrete analogue of integrating against the martingale measure of
the run: per-particle spatial motion contributes O(1/N) quadratic variation
and is deliberately excluded.  The closed-form route for windowed product
integrands goes the other way, through pairings and the drift quadrature, and
carries the motion noise; comparing the two at growing N is how finite-N error
is measured.

Time quadrature of ds-integrals over the grid is trapezoidal; the drift term
inside closed-form integrals uses left-endpoint sums (predictable sampling, so
a vertical bump at the evaluation time has zero quadrature weight).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import EvaluationError
from .paths import MeasurePath
from .stats import Estimate, mean_se
from .testfuncs import ProductIntegrand


class PredictableIntegrand:
    """Base for custom integrands phi(path, t, x).

    The value may depend on the path only through its states strictly before
    t; that adaptedness contract is declared, not checked, for subclasses
    (windowed product integrands enforce it structurally).  Override
    ``at_events`` when a vectorized form exists.
    """

    def __call__(self, path, t: float, x) -> float:
        raise NotImplementedError

    def at_events(self, path, times: np.ndarray, positions: np.ndarray) -> np.ndarray:
        return np.array([self(path, float(t), positions[i])
                         for i, t in enumerate(times)], dtype=np.float64)

    def state_values(self, path, k: int, positions: np.ndarray) -> np.ndarray:
        """phi(path, t_k, x) on an array of positions (for quadratures)."""
        t = path.grid.times[k]
        return np.array([self(path, float(t), x) for x in positions], dtype=np.float64)


class ConstantIntegrand(PredictableIntegrand):
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, path, t, x) -> float:
        return self.value

    def at_events(self, path, times, positions) -> np.ndarray:
        return np.full(times.shape[0], self.value)

    def state_values(self, path, k, positions) -> np.ndarray:
        return np.full(positions.shape[0], self.value)


class LinearCombinationIntegrand(PredictableIntegrand):
    """sum_i coeff_i * phi_i with the same event/state protocol."""

    def __init__(self, coefficients, integrands):
        self.coefficients = [float(c) for c in coefficients]
        self.integrands = list(integrands)
        if len(self.coefficients) != len(self.integrands):
            raise ValueError("need one coefficient per integrand")

    def __call__(self, path, t, x) -> float:
        return sum(c * phi(path, t, x) for c, phi in zip(self.coefficients, self.integrands))

    def at_events(self, path, times, positions) -> np.ndarray:
        out = np.zeros(times.shape[0])
        for c, phi in zip(self.coefficients, self.integrands):
            out += c * phi.at_events(path, times, positions)
        return out

    def state_values(self, path, k, positions) -> np.ndarray:
        out = np.zeros(positions.shape[0])
        for c, phi in zip(self.coefficients, self.integrands):
            if isinstance(phi, ProductIntegrand):
                t = path.grid.times[k]
                vals = phi.weight_value(path) * phi.h(positions) if t > phi.window_start \
                    else np.zeros(positions.shape[0])
                out += c * vals
            else:
                out += c * phi.state_values(path, k, positions)
        return out


class PathFieldCache:
    """Per-path memo for flat field values, pair series and event values.

    Streaming statistics evaluate the same handful of spatial functions
    against every state and every event of a path; this cache makes each
    distinct function one vectorized evaluation.
    """

    def __init__(self, path: MeasurePath):
        self.path = path
        # entries pin the function object so a recycled id() cannot alias
        self._flat: dict = {}
        self._series: dict = {}
        self._events: dict = {}

    def flat_values(self, f) -> np.ndarray:
        key = id(f)
        if key not in self._flat:
            self._flat[key] = (f, np.asarray(f(self.path.positions_flat), dtype=np.float64))
        return self._flat[key][1]

    def series(self, f) -> np.ndarray:
        """<X(t_k), f> for all k."""
        key = ("s", id(f))
        if key not in self._series:
            vals = self.flat_values(f) * self.path.masses_flat
            self._series[key] = (f, self.path.value_series(vals))
        return self._series[key][1]

    def half_laplacian_series(self, h) -> np.ndarray:
        """<X(t_k), (1/2) Lap h>, reusing cached h values when the family allows."""
        hook = getattr(h, "half_laplacian_from_values", None)
        if hook is None:
            return self.series(h.half_laplacian_fn)
        key = ("hl", id(h))
        if key not in self._series:
            vals = hook(self.path.positions_flat, self.flat_values(h)) * self.path.masses_flat
            self._series[key] = (h, self.path.value_series(vals))
        return self._series[key][1]

    def series_product(self, f, g) -> np.ndarray:
        """<X(t_k), f*g> for all k."""
        a, b = (id(f), id(g)) if id(f) <= id(g) else (id(g), id(f))
        key = ("p", a, b)
        if key not in self._series:
            vals = self.flat_values(f) * self.flat_values(g) * self.path.masses_flat
            self._series[key] = (f, g, self.path.value_series(vals))
        return self._series[key][-1]

    def event_values(self, f) -> np.ndarray:
        key = id(f)
        if key not in self._events:
            self._events[key] = (f, np.asarray(f(self.path.events.positions),
                                               dtype=np.float64))
        return self._events[key][1]


def _require_events(path: MeasurePath):
    if path.events is None:
        raise ValueError("path carries no branching-event log; "
                         "simulate with record_events=True")
    return path.events


def _event_contributions(phi, path: MeasurePath, cache: PathFieldCache | None) -> np.ndarray:
    log = _require_events(path)
    if isinstance(phi, ProductIntegrand):
        hvals = cache.event_values(phi.h) if cache is not None else phi.h(log.positions)
        vals = phi.weight_value(path) * hvals * (log.times > phi.window_start)
    elif isinstance(phi, LinearCombinationIntegrand):
        vals = np.zeros(len(log))
        for c, sub in zip(phi.coefficients, phi.integrands):
            vals += c * _event_contributions(sub, path, cache)
    else:
        vals = phi.at_events(path, log.times, log.positions)
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.argmax(bad))
        raise EvaluationError(
            f"integrand non-finite at event {i} (t={log.times[i]:.6g}, "
            f"x={log.positions[i]}, value={vals[i]})")
    return vals


def integrate(phi, path: MeasurePath, t: float, cache: PathFieldCache | None = None) -> float:
    """Event-sum stochastic integral of phi over (0, t]."""
    log = _require_events(path)
    path.grid.index_of(t)  # validate on-grid
    vals = _event_contributions(phi, path, cache)
    upto = log.count_upto(t)
    if upto == 0:
        return 0.0
    contrib = log.signs[:upto] * vals[:upto]
    return float(contrib.sum()) * log.mass_quantum


def integrate_series(phi, path: MeasurePath, cache: PathFieldCache | None = None) -> np.ndarray:
    """The event-sum integral at every grid time (cumulative)."""
    log = _require_events(path)
    vals = _event_contributions(phi, path, cache)
    cum = np.concatenate([[0.0], np.cumsum(log.signs * vals)]) * log.mass_quantum
    idx = np.searchsorted(log.times, path.grid.times, side="right")
    return cum[idx]


# -- closed form for windowed product integrands -----------------------------

def closed_form_series(phi: ProductIntegrand, path_like, cache: PathFieldCache | None = None
                       ) -> np.ndarray:
    """weight * (M(t)(h) - M(a)(h)) * 1_{t > a} at every grid time.

    ``path_like`` may be a MeasurePath or a StoppedPath; pair series and the
    left-endpoint drift quadrature read states at or before each evaluation
    time only, so values at t below the stop time agree with the full path
    bit for bit.
    """
    grid = path_like.grid
    a_idx = grid.index_of(phi.window_start)
    if cache is not None:
        p_h = cache.series(phi.h)
        p_hl = cache.half_laplacian_series(phi.h)
    else:
        p_h = path_like.pair_series(phi.h)
        p_hl = path_like.pair_series(phi.h.half_laplacian_fn)
    gamma = phi.weight_value(path_like)
    drift_cum = np.concatenate([[0.0], np.cumsum(p_hl[:-1])]) * grid.dt
    m_series = p_h - p_h[a_idx] - (drift_cum - drift_cum[a_idx])
    out = gamma * m_series
    out[:a_idx + 1] = 0.0
    return out


def integrate_u_closed_form(phi: ProductIntegrand, path_like, t: float,
                            cache: PathFieldCache | None = None) -> float:
    """Closed-form value of the stochastic integral of a product integrand at t."""
    k = path_like.grid.index_of(t)
    return float(closed_form_series(phi, path_like, cache)[k])


# -- quadratic-functional quadratures ----------------------------------------

def quadrature_cross(phi, psi, path: MeasurePath, cache: PathFieldCache | None = None) -> float:
    """Trapezoidal int_0^T <X(s), phi(.,s,.) psi(.,s,.)> ds along one path."""
    grid = path.grid
    series = _cross_series(phi, psi, path, cache)
    return float(np.trapezoid(series, dx=grid.dt))


def _cross_series(phi, psi, path: MeasurePath, cache: PathFieldCache | None) -> np.ndarray:
    if isinstance(phi, ProductIntegrand) and isinstance(psi, ProductIntegrand):
        if cache is not None:
            prod = cache.series_product(phi.h, psi.h)
        else:
            vals = phi.h(path.positions_flat) * psi.h(path.positions_flat) * path.masses_flat
            prod = path.value_series(vals)
        w = phi.weight_value(path) * psi.weight_value(path)
        start = max(phi.window_start, psi.window_start)
        return w * prod * (path.grid.times > start)
    if isinstance(phi, LinearCombinationIntegrand):
        out = np.zeros(len(path.grid))
        for c, sub in zip(phi.coefficients, phi.integrands):
            out += c * _cross_series(sub, psi, path, cache)
        return out
    if isinstance(psi, LinearCombinationIntegrand):
        out = np.zeros(len(path.grid))
        for c, sub in zip(psi.coefficients, psi.integrands):
            out += c * _cross_series(phi, sub, path, cache)
        return out
    # generic fallback: evaluate both integrands on every state
    out = np.zeros(len(path.grid))
    for k in range(len(path.grid)):
        st = path.state_index(k)
        if st.is_zero:
            continue
        vals = _state_vals(phi, path, k, st.positions) * _state_vals(psi, path, k, st.positions)
        out[k] = float(np.dot(st.masses, vals))
    return out


def _state_vals(phi, path, k: int, positions: np.ndarray) -> np.ndarray:
    if isinstance(phi, ProductIntegrand):
        t = path.grid.times[k]
        if t <= phi.window_start:
            return np.zeros(positions.shape[0])
        return phi.weight_value(path) * phi.h(positions)
    return phi.state_values(path, k, positions)


@dataclass
class CovariationReport:
    """Both sides of the covariation identity over an ensemble."""

    lhs: Estimate          # mean of I(phi)(T) * I(psi)(T)
    rhs: Estimate          # mean of int <X, phi psi> ds
    gap: Estimate          # paired per-path difference
    n_paths: int

    @property
    def within(self) -> float:
        """|gap| in units of the combined (unpaired) standard error."""
        return abs(self.lhs.value - self.rhs.value) / max(self.lhs.se + self.rhs.se, 1e-300)


def l2_norm(phi, paths) -> Estimate:
    """Monte Carlo estimate of the squared integrand norm E int <X, phi^2> ds."""
    vals = []
    for path in paths:
        cache = PathFieldCache(path)
        vals.append(quadrature_cross(phi, phi, path, cache))
    return mean_se(np.asarray(vals))


def covariation(phi, psi, paths) -> CovariationReport:
    """Product of event-sum integrals at T versus the quadrature estimate."""
    lhs = []
    rhs = []
    for path in paths:
        cache = PathFieldCache(path)
        t = path.grid.horizon
        lhs.append(integrate(phi, path, t, cache) * integrate(psi, path, t, cache))
        rhs.append(quadrature_cross(phi, psi, path, cache))
    lhs = np.asarray(lhs)
    rhs = np.asarray(rhs)
    return CovariationReport(mean_se(lhs), mean_se(rhs), mean_se(lhs - rhs), lhs.shape[0])


def norm_bound_report(phi: ProductIntegrand, paths) -> dict:
    """Estimate of the norm against its a-priori bound
    weight_bound^2 * sup(h)^2 * (T - a) * E[max_t Z_t]."""
    norms = []
    maxz = []
    horizon = None
    for path in paths:
        cache = PathFieldCache(path)
        horizon = path.grid.horizon
        norms.append(quadrature_cross(phi, phi, path, cache))
        a_idx = path.grid.index_of(phi.window_start)
        masses = path.total_mass_series()
        maxz.append(float(masses[a_idx:].max()))
    norm = mean_se(np.asarray(norms))
    mz = mean_se(np.asarray(maxz))
    factor = phi.bound_sq * (horizon - phi.window_start)
    return {
        "norm_sq": norm,
        "bound": Estimate(factor * mz.value, factor * mz.se),
        "max_mass": mz,
    }
