"""Galerkin construction of the weak derivative of a square-integrable martingale.

A target martingale is specified by its terminal functional G with finite
second moment; its initial value is estimated by the ensemble mean of G.  The
weak derivative is sought in the span of a finite basis of windowed product
integrands by solving the normal equations of the integration-by-parts
identity

    E[(G - mean G) * I(phi_i)(T)] = sum_j c_j * E[int <X, phi_i phi_j> ds],

i.e. Gram matrix from covariation quadratures, right side from terminal
cross-moments, ridge-regularized symmetric solve.  Residuals are always
reported on a holdout ensemble disjoint from the fitting ensemble: in-sample
residuals are biased low.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .integrals import PathFieldCache, integrate, quadrature_cross
from .stats import Estimate, mean_se
from .testfuncs import ProductIntegrand


@dataclass(frozen=True)
class IntegrandBasis:
    """An ordered basis of windowed product integrands."""

    elements: tuple

    def __post_init__(self):
        if len(self.elements) < 1:
            raise ValueError("basis needs at least one element")
        for e in self.elements:
            if not isinstance(e, ProductIntegrand):
                raise TypeError(f"basis elements must be ProductIntegrand, got {type(e)}")

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def functionals(self):
        from .functionals import ProductIntegralFunctional
        return [ProductIntegralFunctional(e) for e in self.elements]


@dataclass
class BasisSamples:
    """Per-path design data for one ensemble.

    z[p, i] is the event-sum integral of basis element i at T on path p;
    q[p, i, j] the quadrature of <X, phi_i phi_j> along path p.
    """

    z: np.ndarray
    q: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.z.shape[0]

    @property
    def n_basis(self) -> int:
        return self.z.shape[1]


def basis_path_stats(basis: IntegrandBasis, path, cache: PathFieldCache | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """(z_i, q_ij) for one path; q is symmetric and computed on the upper triangle."""
    if cache is None:
        cache = PathFieldCache(path)
    n = len(basis)
    t_end = path.grid.horizon
    z = np.array([integrate(phi, path, t_end, cache) for phi in basis])
    q = np.empty((n, n))
    for i, phi in enumerate(basis.elements):
        for j in range(i, n):
            q[i, j] = q[j, i] = quadrature_cross(phi, basis.elements[j], path, cache)
    return z, q


def collect_basis_samples(basis: IntegrandBasis, paths) -> BasisSamples:
    zs, qs = [], []
    for path in paths:
        z, q = basis_path_stats(basis, path)
        zs.append(z)
        qs.append(q)
    return BasisSamples(np.asarray(zs), np.asarray(qs))


def gram_matrix(samples: BasisSamples) -> tuple[np.ndarray, np.ndarray]:
    """Mean quadrature Gram matrix with per-entry standard errors."""
    a = samples.q.mean(axis=0)
    r = samples.n_paths
    se = samples.q.std(axis=0, ddof=1) / np.sqrt(r) if r > 1 else np.full_like(a, np.nan)
    return a, se


def rhs_vector(target_values: np.ndarray, samples: BasisSamples,
               center: float | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """b_i = mean[(G - center) * z_i] with standard errors; center defaults to mean G."""
    g = np.asarray(target_values, dtype=np.float64)
    if center is None:
        center = float(g.mean())
    prod = (g - center)[:, None] * samples.z
    r = prod.shape[0]
    b = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(r) if r > 1 else np.full_like(b, np.nan)
    return b, se, center


class SolveError(RuntimeError):
    pass


@dataclass
class GalerkinSolution:
    """Fitted expansion of the weak derivative in the basis."""

    coefficients: np.ndarray
    gram: np.ndarray
    rhs: np.ndarray
    ridge: float
    center: float
    condition: float
    coefficient_cov: np.ndarray | None = None
    residual: Estimate | None = None
    target_variance: float | None = None

    def integrand(self, basis: IntegrandBasis):
        from .integrals import LinearCombinationIntegrand
        return LinearCombinationIntegrand(self.coefficients.tolist(), list(basis.elements))

    def joint_chi2(self, reference: np.ndarray) -> float:
        """(c - ref)' Cov^-1 (c - ref); compare against a chi-square quantile."""
        if self.coefficient_cov is None:
            raise SolveError("coefficient covariance was not computed")
        delta = self.coefficients - np.asarray(reference, dtype=np.float64)
        return float(delta @ np.linalg.solve(self.coefficient_cov, delta))


def solve(gram: np.ndarray, rhs: np.ndarray, ridge: float | None = None,
          center: float = 0.0, max_escalations: int = 3) -> GalerkinSolution:
    """Solve (A + ridge I) c = b by Cholesky, escalating ridge x10 on failure.

    Default ridge is 1e-8 * trace(A)/n: Gram matrices of overlapping bumps are
    near-singular and need a floor even though the continuum operator is
    injective.
    """
    a = np.asarray(gram, dtype=np.float64)
    b = np.asarray(rhs, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or b.shape != (n,):
        raise SolveError(f"shape mismatch: gram {a.shape}, rhs {b.shape}")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-14):
        raise SolveError("gram matrix must be symmetric")
    lam = 1e-8 * float(np.trace(a)) / n if ridge is None else float(ridge)
    if lam < 0:
        raise SolveError(f"ridge must be >= 0, got {lam}")
    attempt = 0
    while True:
        try:
            cho = scipy.linalg.cho_factor(a + lam * np.eye(n), lower=True)
            break
        except np.linalg.LinAlgError:
            attempt += 1
            if attempt > max_escalations:
                raise SolveError(
                    f"factorization failed after {max_escalations} ridge escalations "
                    f"(last ridge {lam:.3g}); increase ridge or prune the basis")
            lam = max(lam, 1e-12 * float(np.trace(a)) / n) * 10.0
    coeff = scipy.linalg.cho_solve(cho, b)
    cond = float(np.linalg.cond(a + lam * np.eye(n)))
    return GalerkinSolution(coefficients=coeff, gram=a, rhs=b, ridge=lam, center=center,
                            condition=cond)


def coefficient_covariance(solution: GalerkinSolution, samples: BasisSamples,
                           target_values: np.ndarray) -> np.ndarray:
    """Sandwich covariance of the fitted coefficients.

    Influence of path p: u_p = z_p (g_p - center) - q_p c; then
    Cov(c) ~ A^-1 Cov(u) A^-1 / R.
    """
    g = np.asarray(target_values, dtype=np.float64) - solution.center
    c = solution.coefficients
    u = samples.z * g[:, None] - np.einsum("pij,j->pi", samples.q, c)
    r = u.shape[0]
    s = np.cov(u, rowvar=False, ddof=1)
    n = solution.gram.shape[0]
    a_inv = np.linalg.inv(solution.gram + solution.ridge * np.eye(n))
    cov = a_inv @ np.atleast_2d(s) @ a_inv / r
    solution.coefficient_cov = cov
    return cov


def fit(basis: IntegrandBasis, samples: BasisSamples, target_values: np.ndarray,
        ridge: float | None = None) -> GalerkinSolution:
    """Gram + rhs + solve + coefficient covariance in one call."""
    a, _ = gram_matrix(samples)
    b, _, center = rhs_vector(target_values, samples)
    solution = solve(a, b, ridge=ridge, center=center)
    coefficient_covariance(solution, samples, target_values)
    return solution


def residual(target_values_holdout: np.ndarray, samples_holdout: BasisSamples,
             solution: GalerkinSolution) -> tuple[Estimate, float]:
    """Mean squared representation error on a disjoint holdout ensemble.

    Returns (residual estimate, holdout variance of G) so callers can form a
    relative score; centering uses the fitted center, not the holdout mean.
    """
    g = np.asarray(target_values_holdout, dtype=np.float64)
    fitted = samples_holdout.z @ solution.coefficients
    err2 = (g - solution.center - fitted) ** 2
    est = mean_se(err2)
    var_g = float(g.var(ddof=1)) if g.shape[0] > 1 else float("nan")
    solution.residual = est
    solution.target_variance = var_g
    return est, var_g


@dataclass
class AdjointReport:
    lhs: Estimate   # E[I(phi)(T) (G - center)]
    rhs: Estimate   # E[int <X, phi * fitted integrand> ds]
    gap: Estimate   # paired difference
    n_paths: int

    @property
    def within(self) -> float:
        return abs(self.lhs.value - self.rhs.value) / max(self.lhs.se + self.rhs.se, 1e-300)


def check_adjoint(phi_index: int, target_values: np.ndarray, samples: BasisSamples,
                  solution: GalerkinSolution) -> AdjointReport:
    """Adjoint identity for one basis element against a fitted target.

    lhs pairs the element's integral with the centered terminal values; rhs
    integrates the element against the fitted derivative along paths.
    """
    g = np.asarray(target_values, dtype=np.float64) - solution.center
    lhs_samples = samples.z[:, phi_index] * g
    rhs_samples = samples.q[:, phi_index, :] @ solution.coefficients
    return AdjointReport(mean_se(lhs_samples), mean_se(rhs_samples),
                         mean_se(lhs_samples - rhs_samples), samples.n_paths)


def fitted_norm_sq(samples: BasisSamples, solution: GalerkinSolution) -> Estimate:
    """||fitted integrand||^2 estimated pathwise: c' q_p c averaged."""
    c = solution.coefficients
    vals = np.einsum("pij,i,j->p", samples.q, c, c)
    return mean_se(vals)


def planted_target(samples: BasisSamples, coefficients) -> np.ndarray:
    """Terminal values of the martingale planted as a known basis combination."""
    c = np.asarray(coefficients, dtype=np.float64)
    return samples.z @ c
