"""Non-anticipative path functionals and their vertical (Dupire) derivatives.

A functional F(t, path) is non-anticipative when it reads the path only up to
t; evaluation here goes through stopped paths, so that property holds by
construction and F(t, path) == F(t, stop(path, t)) bit for bit.

The vertical derivative at (t, path) in direction x is the one-sided limit of

    (F(t, path_t + eps * delta_x on [t, T]) - F(t, path_t)) / eps

as eps decreases to 0.  Bumps with negative mass would leave the cone of
finite measures, so only eps > 0 is allowed; functionals that are affine in
the bump (all the windowed-product integrals) have exact one-sided quotients,
and the general case is handled by Richardson extrapolation over (eps, eps/2).
"""

from __future__ import annotations

import numpy as np

from .integrals import PathFieldCache, closed_form_series, integrate_series
from .paths import MeasurePath, StoppedPath, bump, stop
from .testfuncs import AdaptedWeight, ProductIntegrand, SchwartzTestFunction


class NonAnticipativeFunctional:
    """Base class: subclasses implement evaluate(t, stopped_path)."""

    def evaluate(self, t: float, sp: StoppedPath) -> float:
        raise NotImplementedError

    def __call__(self, t: float, path) -> float:
        return self.evaluate(t, stop(path, t))

    def analytic_vderiv(self, t: float, sp: StoppedPath, x) -> float | None:
        """Closed-form vertical derivative, or None when unavailable."""
        return None


class ConstantFunctional(NonAnticipativeFunctional):
    def __init__(self, value: float):
        self.value = float(value)

    def evaluate(self, t, sp) -> float:
        return self.value

    def analytic_vderiv(self, t, sp, x) -> float:
        return 0.0


class PairingFunctional(NonAnticipativeFunctional):
    """F(t, path) = <path(t), h>; linear in the bump, derivative h(x)."""

    def __init__(self, h: SchwartzTestFunction):
        self.h = h

    def evaluate(self, t, sp) -> float:
        return sp.pair_at(sp.grid.index_of(t), self.h)

    def analytic_vderiv(self, t, sp, x) -> float:
        return self.h.at(x)


class SquaredPairingFunctional(NonAnticipativeFunctional):
    """F(t, path) = <path(t), h>^2; derivative 2 <path(t), h> h(x)."""

    def __init__(self, h: SchwartzTestFunction):
        self.h = h

    def evaluate(self, t, sp) -> float:
        return sp.pair_at(sp.grid.index_of(t), self.h) ** 2

    def analytic_vderiv(self, t, sp, x) -> float:
        return 2.0 * sp.pair_at(sp.grid.index_of(t), self.h) * self.h.at(x)


class WeightFunctional(NonAnticipativeFunctional):
    """F(t, path) = weight(path_t): constant in the bump once t passes the
    weight's measure time, so the derivative there is exactly zero."""

    def __init__(self, weight: AdaptedWeight):
        self.weight = weight

    def evaluate(self, t, sp) -> float:
        return self.weight.value(sp)


class ProductIntegralFunctional(NonAnticipativeFunctional):
    """The running closed-form integral of a windowed product integrand.

    evaluate() shares its implementation with the closed-form integral
    routine, so the two agree bit for bit, and the vertical derivative is the
    integrand itself: weight * 1_{(a, T]}(t) * h(x).
    """

    def __init__(self, integrand: ProductIntegrand):
        self.integrand = integrand

    def evaluate(self, t, sp) -> float:
        k = sp.grid.index_of(t)
        return float(closed_form_series(self.integrand, sp)[k])

    def analytic_vderiv(self, t, sp, x) -> float:
        if t <= self.integrand.window_start:
            return 0.0
        return self.integrand.weight_value(sp) * self.integrand.h.at(x)

    def series(self, path: MeasurePath, cache: PathFieldCache | None = None) -> np.ndarray:
        return closed_form_series(self.integrand, path, cache)


def _bump_scale(sp: StoppedPath) -> float:
    m = sp.total_mass_at_stop()
    return m if m > 0 else 1.0


def vertical_derivative_fd(f: NonAnticipativeFunctional, t: float, sp, x,
                           eps: float) -> float:
    """One-sided difference quotient (F(t, bumped) - F(t, path)) / eps, eps > 0."""
    if not (eps > 0):
        raise ValueError(f"bump size must be > 0, got {eps}")
    sp = stop(sp, t)
    base = f.evaluate(t, sp)
    bumped = f.evaluate(t, bump(sp, x, eps))
    if not (np.isfinite(base) and np.isfinite(bumped)):
        raise ValueError(f"functional non-finite under bump at t={t}, x={x}")
    return (bumped - base) / eps


def vertical_derivative_richardson(f, t: float, sp, x, eps: float) -> tuple[float, float, float]:
    """Quotients at eps and eps/2 plus their Richardson combination."""
    d1 = vertical_derivative_fd(f, t, sp, x, eps)
    d2 = vertical_derivative_fd(f, t, sp, x, eps / 2.0)
    return d1, d2, 2.0 * d2 - d1


def vertical_derivative(f: NonAnticipativeFunctional, t: float, path, x,
                        eps: float | None = None) -> float:
    """Analytic derivative when the functional provides one, else extrapolated
    difference quotients at eps and eps/2 (default eps = 1e-3 * current mass)."""
    sp = stop(path, t)
    analytic = f.analytic_vderiv(t, sp, x)
    if analytic is not None:
        return float(analytic)
    if eps is None:
        eps = 1e-3 * _bump_scale(sp)
    _, _, extrap = vertical_derivative_richardson(f, t, sp, x, eps)
    return extrap


class _VDerivFunctional(NonAnticipativeFunctional):
    """omega -> vertical derivative of f at (t, omega, x); used for iteration."""

    def __init__(self, f, x, eps: float | None):
        self.f = f
        self.x = x
        self.eps = eps

    def evaluate(self, t, sp) -> float:
        return vertical_derivative(self.f, t, sp, self.x, eps=self.eps)


def vertical_derivative2(f: NonAnticipativeFunctional, t: float, path, x, y,
                         eps: float | None = None) -> float:
    """Second vertical derivative: bump in direction y of the map
    omega -> vertical derivative of f in direction x."""
    sp = stop(path, t)
    if eps is None:
        eps = 1e-3 * _bump_scale(sp)
    inner = _VDerivFunctional(f, x, eps)
    d1 = vertical_derivative_fd(inner, t, sp, y, eps)
    d2 = vertical_derivative_fd(inner, t, sp, y, eps / 2.0)
    return 2.0 * d2 - d1


def pathwise_representation_error(f: ProductIntegralFunctional, path: MeasurePath,
                                  cache: PathFieldCache | None = None) -> dict:
    """sup over grid t of |F(t, path_t) - event-sum integral of the derivative|.

    For product-integral functionals the vertical derivative is the integrand,
    so the right side is the event-sum integral of the integrand itself.  The
    residual is the spatial-motion martingale plus quadrature error, both of
    which vanish as (N, dt) refine.
    """
    if cache is None:
        cache = PathFieldCache(path)
    functional_series = f.series(path, cache)
    event_series = integrate_series(f.integrand, path, cache)
    diff = np.abs(functional_series - event_series)
    k = int(np.argmax(diff))
    return {
        "sup_error": float(diff[k]),
        "argmax_time": float(path.grid.times[k]),
        "terminal_error": float(diff[-1]),
    }
