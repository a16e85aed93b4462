"""Finite atomic measures on R^d and the elementary pairings built on them.

An atomic measure is a finite list of (position, mass) atoms with nonnegative
masses.  Everything downstream (particle states, vertical bumps, stochastic
integrals) reduces to pairings <mu, f> = sum_i m_i f(x_i), so those sums are
computed with compensated accumulation: ensembles reach 1e6 atoms and naive
summation loses the digits the exact-identity tests rely on.

Atoms at equal positions are never merged; two measures count as equal when
they pair equally against test functions, not when their atom lists coincide.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class MeasureError(ValueError):
    """Invalid atomic-measure construction or operation."""


class EvaluationError(ValueError):
    """A field evaluated to a non-finite value at an atom."""


def as_point(x, dim: int | None = None) -> np.ndarray:
    """Coerce to a 1-d float64 coordinate array and validate finiteness."""
    p = np.asarray(x, dtype=np.float64).reshape(-1)
    if p.ndim != 1 or p.size < 1:
        raise MeasureError(f"point must be a nonempty coordinate vector, got shape {np.shape(x)}")
    if dim is not None and p.size != dim:
        raise MeasureError(f"point has dimension {p.size}, expected {dim}")
    if not np.all(np.isfinite(p)):
        raise MeasureError(f"point has non-finite coordinates: {p}")
    return p


class ScalarField:
    """A real-valued function of space with a declared sup-norm bound.

    ``fn`` must accept an (n, d) array of positions and return an (n,) array;
    scalar points are handled by :meth:`at`.  ``bound`` may be ``inf`` when no
    bound is known, but operations that need one will reject it.
    """

    __slots__ = ("fn", "bound", "name")

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], bound: float = math.inf,
                 name: str = "field"):
        if not (bound == bound and bound >= 0):  # NaN or negative
            raise MeasureError(f"field bound must be a nonnegative number, got {bound}")
        self.fn = fn
        self.bound = float(bound)
        self.name = name

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(positions, dtype=np.float64)), dtype=np.float64)

    def at(self, x) -> float:
        """Evaluate at a single point."""
        p = as_point(x)
        return float(self(p.reshape(1, -1))[0])

    @staticmethod
    def constant(c: float, name: str | None = None) -> "ScalarField":
        value = float(c)

        def fn(pos: np.ndarray) -> np.ndarray:
            return np.full(pos.shape[0], value)

        return ScalarField(fn, bound=abs(value), name=name or f"const({value})")


FieldLike = Callable[[np.ndarray], np.ndarray]


def _field_values(f, positions: np.ndarray) -> np.ndarray:
    vals = f(positions) if not isinstance(f, ScalarField) else f.fn(positions)
    vals = np.asarray(vals, dtype=np.float64)
    if vals.shape != (positions.shape[0],):
        raise EvaluationError(
            f"field returned shape {vals.shape} for {positions.shape[0]} atoms")
    return vals


class AtomicMeasure:
    """Finite atomic measure: positions (n, d) with nonnegative masses (n,).

    Instances are immutable; all operations return new measures sharing the
    input arrays where possible.
    """

    __slots__ = ("positions", "masses")

    def __init__(self, positions, masses, *, _validated: bool = False):
        positions = np.asarray(positions, dtype=np.float64)
        masses = np.asarray(masses, dtype=np.float64)
        if positions.ndim != 2:
            positions = positions.reshape(len(masses), -1)
        if not _validated:
            if positions.shape[0] != masses.shape[0]:
                raise MeasureError(
                    f"{positions.shape[0]} positions but {masses.shape[0]} masses")
            if positions.shape[0] > 0 and positions.shape[1] < 1:
                raise MeasureError("atoms must have dimension >= 1")
            if not np.all(np.isfinite(positions)):
                raise MeasureError("atom positions must be finite")
            if not np.all(np.isfinite(masses)) or np.any(masses < 0):
                raise MeasureError("atom masses must be finite and nonnegative")
        self.positions = positions
        self.masses = masses
        self.positions.flags.writeable = False
        self.masses.flags.writeable = False

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(dim: int) -> "AtomicMeasure":
        return AtomicMeasure(np.empty((0, dim)), np.empty(0), _validated=True)

    @staticmethod
    def dirac(x, mass: float = 1.0) -> "AtomicMeasure":
        p = as_point(x)
        return AtomicMeasure(p.reshape(1, -1), np.array([float(mass)]))

    @staticmethod
    def from_atoms(atoms: Sequence[tuple]) -> "AtomicMeasure":
        """Build from a list of (position, mass) pairs."""
        if not atoms:
            raise MeasureError("from_atoms needs at least one atom; use zero(dim) instead")
        pts = [as_point(x) for x, _ in atoms]
        dim = pts[0].size
        pos = np.stack([as_point(x, dim) for x, _ in atoms])
        return AtomicMeasure(pos, np.array([m for _, m in atoms], dtype=np.float64))

    @staticmethod
    def uniform(positions, mass_each: float) -> "AtomicMeasure":
        """All atoms carry the same mass (particle-system states)."""
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim == 1:
            positions = positions.reshape(-1, 1)
        return AtomicMeasure(positions, np.full(positions.shape[0], float(mass_each)))

    # -- basic queries -----------------------------------------------------

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def is_zero(self) -> bool:
        return self.n_atoms == 0

    def __repr__(self) -> str:
        return f"AtomicMeasure(n_atoms={self.n_atoms}, dim={self.dim}, total={self.total_mass():.6g})"

    # -- operations --------------------------------------------------------

    def total_mass(self) -> float:
        """Sum of masses, exactly rounded (fsum)."""
        if self.is_zero:
            return 0.0
        return math.fsum(self.masses.tolist())

    def pair(self, f) -> float:
        """<mu, f> = sum_i m_i f(x_i), compensated summation, no quadrature.

        Raises :class:`EvaluationError` identifying the offending atom when f
        is non-finite somewhere on the support.
        """
        if self.is_zero:
            return 0.0
        vals = _field_values(f, self.positions)
        bad = ~np.isfinite(vals)
        if bad.any():
            i = int(np.argmax(bad))
            raise EvaluationError(
                f"field non-finite at atom {i} (position {self.positions[i]}, value {vals[i]})")
        return math.fsum((self.masses * vals).tolist())

    def add_atom(self, x, eps: float) -> "AtomicMeasure":
        """Return this measure plus an atom of mass eps >= 0 at x.

        Signed bumps are rejected: the vertical perturbation must stay inside
        the cone of nonnegative measures.
        """
        if not (eps >= 0):
            raise MeasureError(f"bump mass must be >= 0, got {eps}")
        p = as_point(x, self.dim if self.n_atoms else None)
        if self.is_zero:
            return AtomicMeasure(p.reshape(1, -1), np.array([float(eps)]), _validated=True)
        pos = np.concatenate([self.positions, p.reshape(1, -1)])
        mas = np.concatenate([self.masses, [float(eps)]])
        return AtomicMeasure(pos, mas, _validated=True)


def total_mass(mu: AtomicMeasure) -> float:
    return mu.total_mass()


def pair(mu: AtomicMeasure, f) -> float:
    return mu.pair(f)


def add_atom(mu: AtomicMeasure, x, eps: float) -> AtomicMeasure:
    return mu.add_atom(x, eps)


# -- bounded-Lipschitz distance -------------------------------------------
#
# d(mu, nu) = sup |<mu - nu, f>| over f with 0 <= f <= 1 and Lip(f) <= 1.
# For atomic measures the sup is attained on the union of the supports, so it
# is a finite linear program in the values f_i at the atom locations.  This
# metrizes the same weak topology as the Prokhorov metric and is what every
# continuity statement in the library is measured against.

def _bl_lp(weights: np.ndarray, dists: np.ndarray) -> float:
    # maximize w.f  s.t.  0 <= f <= 1,  |f_i - f_j| <= dists_ij
    from scipy.optimize import linprog

    n = weights.size
    iu, ju = np.triu_indices(n, k=1)
    if iu.size:
        rows = np.arange(iu.size)
        data_rows = np.concatenate([rows, rows, rows + iu.size, rows + iu.size])
        data_cols = np.concatenate([iu, ju, iu, ju])
        data_vals = np.concatenate([np.ones(iu.size), -np.ones(iu.size),
                                    -np.ones(iu.size), np.ones(iu.size)])
        from scipy.sparse import csr_matrix
        a_ub = csr_matrix((data_vals, (data_rows, data_cols)), shape=(2 * iu.size, n))
        b_ub = np.concatenate([dists[iu, ju], dists[iu, ju]])
    else:
        a_ub, b_ub = None, None
    res = linprog(-weights, A_ub=a_ub, b_ub=b_ub, bounds=[(0.0, 1.0)] * n, method="highs")
    if not res.success:
        raise RuntimeError(f"bounded-Lipschitz LP failed: {res.message}")
    return float(-res.fun)


def bl_distance(mu: AtomicMeasure, nu: AtomicMeasure) -> float:
    """Bounded-Lipschitz distance between two finite atomic measures.

    Exact for atomic measures (finite LP over the joint support).  Cost grows
    quadratically in the atom count; intended for test-scale measures.
    """
    if mu.is_zero and nu.is_zero:
        return 0.0
    dim = mu.dim if not mu.is_zero else nu.dim
    if not nu.is_zero and not mu.is_zero and mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    pos = np.concatenate([mu.positions.reshape(-1, dim), nu.positions.reshape(-1, dim)])
    w = np.concatenate([mu.masses, -nu.masses])
    # collapse duplicate positions so the LP sees each location once
    uniq, inv = np.unique(pos, axis=0, return_inverse=True)
    weights = np.zeros(uniq.shape[0])
    np.add.at(weights, inv.reshape(-1), w)
    if uniq.shape[0] == 1:
        # single support point: the optimal f is 1 there
        return abs(float(weights[0]))
    diff = uniq[:, None, :] - uniq[None, :, :]
    dists = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return max(_bl_lp(weights, dists), _bl_lp(-weights, dists))
