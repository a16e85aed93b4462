"""Smooth spatial test functions and the windowed product integrands built from them.

The spatial side consists of Schwartz-class functions with their half
Laplacians available in closed form: Gaussian bumps and Gaussian-windowed
Hermite polynomials, both closed under (1/2) Laplace.  The path side consists
of bounded weights that read the path only through one pairing at a fixed
early time, which makes their measurability window explicit and testable.

A :class:`ProductIntegrand` is the product

    weight(path) * h(x) * 1_{(window_start, T]}(t),

the basic predictable integrand of the stochastic-integration layer.  The
weight reads the path only up to ``measure_time <= window_start``, so the
product is predictable by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import hermite_e as herm

from .measures import MeasureError, as_point
from .paths import MeasurePath, StoppedPath


class SchwartzTestFunction:
    """A smooth rapidly-decaying function with an analytic half Laplacian.

    ``sup_bound`` and ``sup_bound_half_laplacian`` are valid sup-norm bounds
    for the function and its half Laplacian.
    """

    __slots__ = ("eval_fn", "half_laplacian_fn", "sup_bound",
                 "sup_bound_half_laplacian", "name", "params",
                 "half_laplacian_from_values")

    def __init__(self, eval_fn, half_laplacian_fn, sup_bound: float,
                 sup_bound_half_laplacian: float, name: str = "h", params: dict | None = None,
                 half_laplacian_from_values=None):
        if not (np.isfinite(sup_bound) and np.isfinite(sup_bound_half_laplacian)):
            raise MeasureError("test functions need finite declared bounds")
        self.eval_fn = eval_fn
        self.half_laplacian_fn = half_laplacian_fn
        self.sup_bound = float(sup_bound)
        self.sup_bound_half_laplacian = float(sup_bound_half_laplacian)
        self.name = name
        self.params = params or {}
        # optional fast path: recover (1/2) Lap h at given positions from
        # already-computed h values (families where hl = polynomial * h)
        self.half_laplacian_from_values = half_laplacian_from_values

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        return self.eval_fn(np.asarray(positions, dtype=np.float64))

    def half_laplacian(self, positions: np.ndarray) -> np.ndarray:
        return self.half_laplacian_fn(np.asarray(positions, dtype=np.float64))

    def at(self, x) -> float:
        return float(self(as_point(x).reshape(1, -1))[0])

    def half_laplacian_at(self, x) -> float:
        return float(self.half_laplacian(as_point(x).reshape(1, -1))[0])

    def __repr__(self) -> str:
        return f"SchwartzTestFunction({self.name})"


def gaussian_bump(center, sigma: float, amplitude: float = 1.0) -> SchwartzTestFunction:
    """A * exp(-|x-c|^2 / (2 sigma^2)) with its analytic half Laplacian."""
    if not (sigma > 0):
        raise MeasureError(f"sigma must be > 0, got {sigma}")
    c = as_point(center)
    d = c.size
    a = float(amplitude)
    s2 = sigma * sigma

    def h(pos: np.ndarray) -> np.ndarray:
        pos = pos.reshape(-1, d)
        r2 = np.einsum("ij,ij->i", pos - c, pos - c)
        return a * np.exp(-r2 / (2.0 * s2))

    def half_lap(pos: np.ndarray) -> np.ndarray:
        pos = pos.reshape(-1, d)
        r2 = np.einsum("ij,ij->i", pos - c, pos - c)
        return 0.5 * a * np.exp(-r2 / (2.0 * s2)) * (r2 / (s2 * s2) - d / s2)

    def half_lap_from_values(pos: np.ndarray, values: np.ndarray) -> np.ndarray:
        pos = pos.reshape(-1, d)
        r2 = np.einsum("ij,ij->i", pos - c, pos - c)
        return 0.5 * values * (r2 / (s2 * s2) - d / s2)

    # |(1/2) Lap h| peaks at the center with value |A| d / (2 sigma^2)
    return SchwartzTestFunction(
        h, half_lap, abs(a), abs(a) * d / (2.0 * s2),
        name=f"gauss(c={np.round(c, 3).tolist()},sigma={sigma},A={a})",
        params={"family": "gaussian", "center": c.tolist(), "sigma": float(sigma),
                "amplitude": a},
        half_laplacian_from_values=half_lap_from_values)


def hermite_bump(center, sigma: float, amplitude: float = 1.0, degree: int = 1,
                 axis: int = 0) -> SchwartzTestFunction:
    """A * He_n(u_axis) * exp(-|u|^2/2), u = (x - c)/sigma (probabilists' He_n).

    Closed under the half Laplacian via the Hermite recurrences.  Sup bounds
    are computed by a dense scan and padded; they are conservative, not sharp.
    """
    if not (sigma > 0):
        raise MeasureError(f"sigma must be > 0, got {sigma}")
    if degree < 0:
        raise MeasureError("degree must be >= 0")
    c = as_point(center)
    d = c.size
    if not (0 <= axis < d):
        raise MeasureError(f"axis {axis} out of range for dimension {d}")
    a = float(amplitude)
    coef = np.zeros(degree + 1)
    coef[degree] = 1.0
    d1 = herm.hermeder(coef, 1) if degree >= 1 else np.zeros(1)
    d2 = herm.hermeder(coef, 2) if degree >= 2 else np.zeros(1)

    def h(pos: np.ndarray) -> np.ndarray:
        u = (pos.reshape(-1, d) - c) / sigma
        r2 = np.einsum("ij,ij->i", u, u)
        return a * herm.hermeval(u[:, axis], coef) * np.exp(-r2 / 2.0)

    def half_lap(pos: np.ndarray) -> np.ndarray:
        u = (pos.reshape(-1, d) - c) / sigma
        r2 = np.einsum("ij,ij->i", u, u)
        ua = u[:, axis]
        poly = (herm.hermeval(ua, d2) - 2.0 * ua * herm.hermeval(ua, d1)
                + (r2 - d) * herm.hermeval(ua, coef))
        return (0.5 * a / (sigma * sigma)) * poly * np.exp(-r2 / 2.0)

    # bounds by scanning (u_axis, |u_rest|^2); the profile is radial in u_rest
    ua = np.linspace(-(8.0 + degree), 8.0 + degree, 4001)
    hv = herm.hermeval(ua, coef) * np.exp(-ua * ua / 2.0)
    bound_h = abs(a) * float(np.max(np.abs(hv))) * 1.000001 + 1e-300
    v = np.linspace(0.0, 8.0 * (d + degree + 4), 2001)
    uu, vv = np.meshgrid(ua, v, indexing="ij")
    poly = (herm.hermeval(uu, d2) - 2.0 * uu * herm.hermeval(uu, d1)
            + (uu * uu + vv - d) * herm.hermeval(uu, coef))
    hl = np.abs(poly) * np.exp(-(uu * uu + vv) / 2.0)
    bound_hl = (0.5 * abs(a) / (sigma * sigma)) * float(np.max(hl)) * 1.0001 + 1e-300
    return SchwartzTestFunction(
        h, half_lap, bound_h, bound_hl,
        name=f"hermite(n={degree},c={np.round(c, 3).tolist()},sigma={sigma},A={a})",
        params={"family": "hermite", "center": c.tolist(), "sigma": float(sigma),
                "amplitude": a, "degree": int(degree), "axis": int(axis)})


def validate_half_laplacian(h: SchwartzTestFunction, sample_points, step: float = 1e-3) -> float:
    """Max abs error between the declared half Laplacian and central differences.

    Returns max over the samples of
    |hl(x) - (1/2) sum_j (h(x+de_j) - 2h(x) + h(x-de_j)) / d^2|.
    """
    if not (step > 0):
        raise MeasureError(f"step must be > 0, got {step}")
    pts = np.asarray(sample_points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    n, d = pts.shape
    fd = -2.0 * d * h(pts)
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        fd = fd + h(pts + e) + h(pts - e)
    fd = 0.5 * fd / (step * step)
    return float(np.max(np.abs(h.half_laplacian(pts) - fd))) if n else 0.0


# -- bounded maps and adapted path weights ----------------------------------

@dataclass(frozen=True)
class BoundedMap:
    """A scalar map with a declared finite sup bound."""

    fn: Callable[[float], float]
    bound: float
    name: str = "map"

    def __post_init__(self):
        if not (np.isfinite(self.bound) and self.bound >= 0):
            raise MeasureError(f"map bound must be finite and >= 0, got {self.bound}")

    def __call__(self, v: float) -> float:
        return float(self.fn(v))


def const_map(c: float) -> BoundedMap:
    return BoundedMap(lambda v: float(c), abs(float(c)), name=f"const({c})")


def tanh_map(scale: float = 1.0) -> BoundedMap:
    s = float(scale)
    return BoundedMap(lambda v: s * math.tanh(v), abs(s), name=f"tanh(x{s})")


def clip_map(lo: float, hi: float) -> BoundedMap:
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise MeasureError(f"clip bounds must satisfy lo < hi, got {lo}, {hi}")
    return BoundedMap(lambda v: min(max(v, lo), hi), max(abs(lo), abs(hi)),
                      name=f"clip[{lo},{hi}]")


@dataclass(frozen=True)
class AdaptedWeight:
    """Bounded path weight reading the path only at one early time.

    value(path) = map(<path(measure_time), probe>).  The weight depends on the
    path only through its state at ``measure_time``, so it is measurable with
    respect to everything at or after that time by construction.
    """

    measure_time: float
    probe: SchwartzTestFunction
    map: BoundedMap

    def __post_init__(self):
        if not (self.measure_time >= 0):
            raise MeasureError(f"measure_time must be >= 0, got {self.measure_time}")

    @property
    def bound(self) -> float:
        return self.map.bound

    def value(self, path: MeasurePath | StoppedPath) -> float:
        if isinstance(path, StoppedPath):
            k = path.grid.index_of(self.measure_time)
            return self.map(path.pair_at(k, self.probe))
        return self.map(path.state_at(self.measure_time).pair(self.probe))

    def __call__(self, path) -> float:
        return self.value(path)


def adapted_weight(measure_time: float, probe: SchwartzTestFunction,
                   map: BoundedMap) -> AdaptedWeight:
    """Construct a bounded weight; maps without a declared bound are rejected."""
    if not isinstance(map, BoundedMap):
        raise MeasureError("weight map must be a BoundedMap with a declared bound")
    return AdaptedWeight(float(measure_time), probe, map)


def unit_weight() -> AdaptedWeight:
    """The deterministic weight identically 1."""
    return AdaptedWeight(0.0, gaussian_bump([0.0], 1.0, 1.0), const_map(1.0))


# -- windowed product integrands ---------------------------------------------

@dataclass(frozen=True)
class ProductIntegrand:
    """weight(path) * h(x) * 1_{(window_start, T]}(t); predictable by construction."""

    weight: AdaptedWeight
    window_start: float
    h: SchwartzTestFunction
    label: str = ""

    def __post_init__(self):
        if not (self.window_start >= 0):
            raise MeasureError(f"window_start must be >= 0, got {self.window_start}")
        if self.weight.measure_time > self.window_start:
            raise MeasureError(
                f"weight reads the path at {self.weight.measure_time}, after the "
                f"window opens at {self.window_start}; the product would not be predictable")

    @property
    def bound_sq(self) -> float:
        """Bound on the squared integrand, weight^2 * sup h^2."""
        return (self.weight.bound * self.h.sup_bound) ** 2

    def weight_value(self, path) -> float:
        return self.weight.value(path)

    def time_indicator(self, times: np.ndarray) -> np.ndarray:
        return (np.asarray(times) > self.window_start).astype(np.float64)

    def at_events(self, path, times: np.ndarray, positions: np.ndarray) -> np.ndarray:
        return self.weight_value(path) * self.h(positions) * self.time_indicator(times)

    def __call__(self, path, t: float, x) -> float:
        if t <= self.window_start:
            return 0.0
        return self.weight_value(path) * self.h.at(x)

    def name(self) -> str:
        return self.label or f"{self.weight.map.name}*{self.h.name}*1(({self.window_start},T])"
