import math

import numpy as np
import pytest

from superbm.integrals import (ConstantIntegrand, LinearCombinationIntegrand, PathFieldCache,
                               PredictableIntegrand, closed_form_series, covariation,
                               integrate, integrate_series, integrate_u_closed_form, l2_norm,
                               norm_bound_report, quadrature_cross)
from superbm.measures import EvaluationError
from superbm.testfuncs import (ProductIntegrand, adapted_weight, const_map, gaussian_bump,
                               tanh_map, unit_weight)


@pytest.fixture(scope="module")
def phi_u():
    return ProductIntegrand(weight=unit_weight(), window_start=0.1,
                            h=gaussian_bump([0.0], 1.0, 1.0), label="phi_u")


@pytest.fixture(scope="module")
def phi_w():
    w = adapted_weight(0.05, gaussian_bump([0.0], 0.8, 1.0), tanh_map())
    return ProductIntegrand(weight=w, window_start=0.1,
                            h=gaussian_bump([0.3], 0.7, 0.9), label="phi_w")


def test_integrate_zero_integrand(smoke_path):
    assert integrate(ConstantIntegrand(0.0), smoke_path, 0.5) == 0.0


def test_integrate_constant_is_mass_increment(smoke_path):
    # (1/N) sum of signs telescopes to Z_T - Z_0 exactly
    got = integrate(ConstantIntegrand(1.0), smoke_path, smoke_path.grid.horizon)
    n = smoke_path.events.n_quantum
    expected = (smoke_path.counts[-1] - smoke_path.meta["n_initial"]) / n
    assert got == pytest.approx(expected, abs=1e-12)


def test_integrate_series_matches_pointwise(smoke_path, phi_u):
    series = integrate_series(phi_u, smoke_path)
    for t in (0.0, 0.1, 0.27, 0.5):
        assert series[smoke_path.grid.index_of(t)] == pytest.approx(
            integrate(phi_u, smoke_path, t), abs=1e-14)


def test_integrate_window_zero_before_start(smoke_path, phi_u):
    assert integrate(phi_u, smoke_path, 0.05) == 0.0
    assert integrate(phi_u, smoke_path, 0.1) == 0.0
    assert integrate_u_closed_form(phi_u, smoke_path, 0.1) == 0.0


def test_event_sum_bilinearity(smoke_path, phi_u, phi_w):
    combo = LinearCombinationIntegrand([2.0, -0.5], [phi_u, phi_w])
    t = smoke_path.grid.horizon
    got = integrate(combo, smoke_path, t)
    expected = 2.0 * integrate(phi_u, smoke_path, t) - 0.5 * integrate(phi_w, smoke_path, t)
    assert got == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_closed_form_vs_event_sum(medium_paths, phi_u):
    # the two routes differ by the spatial-motion martingale, O(1/sqrt(N))
    diffs = []
    for path in medium_paths[:10]:
        t = path.grid.horizon
        diffs.append(abs(integrate(phi_u, path, t) - integrate_u_closed_form(phi_u, path, t)))
    assert np.median(diffs) < 0.15


def test_closed_form_series_shared_with_scalar(smoke_path, phi_w):
    series = closed_form_series(phi_w, smoke_path)
    for t in (0.1, 0.3, 0.5):
        k = smoke_path.grid.index_of(t)
        assert integrate_u_closed_form(phi_w, smoke_path, t) == series[k]


def test_cache_consistency(smoke_path, phi_u, phi_w):
    cache = PathFieldCache(smoke_path)
    no_cache = quadrature_cross(phi_u, phi_w, smoke_path)
    with_cache = quadrature_cross(phi_u, phi_w, smoke_path, cache)
    assert with_cache == pytest.approx(no_cache, rel=1e-12)
    assert integrate(phi_u, smoke_path, 0.5, cache) == pytest.approx(
        integrate(phi_u, smoke_path, 0.5), abs=1e-14)


def test_quadrature_fast_path_matches_generic(smoke_path, phi_w):
    class GenericWrapper(PredictableIntegrand):
        def __init__(self, inner):
            self.inner = inner

        def __call__(self, path, t, x):
            return self.inner(path, t, x)

        def state_values(self, path, k, positions):
            t = path.grid.times[k]
            if t <= self.inner.window_start:
                return np.zeros(positions.shape[0])
            return self.inner.weight_value(path) * self.inner.h(positions)

    generic = GenericWrapper(phi_w)
    fast = quadrature_cross(phi_w, phi_w, smoke_path)
    slow = quadrature_cross(generic, generic, smoke_path)
    assert fast == pytest.approx(slow, rel=1e-10)


def test_l2_norm_zero_and_total_mass(medium_paths):
    zero = ConstantIntegrand(0.0)
    est = l2_norm(zero, medium_paths[:5])
    assert est.value == 0.0 and est.se == 0.0
    one = ConstantIntegrand(1.0)
    est = l2_norm(one, medium_paths)
    t = medium_paths[0].grid.horizon
    # E int_0^T Z_s ds = T * Z_0
    assert abs(est.value - t) < 3.5 * est.se


def test_covariation_isometry(medium_paths, phi_u):
    rep = covariation(phi_u, phi_u, medium_paths)
    assert abs(rep.gap.value) < 4.0 * rep.gap.se
    assert rep.lhs.value > 0
    assert rep.within < 4.0


def test_covariation_zero_psi(medium_paths, phi_u):
    rep = covariation(phi_u, ConstantIntegrand(0.0), medium_paths[:6])
    assert rep.lhs.value == 0.0 and rep.rhs.value == 0.0


def test_covariation_disjoint_supports(medium_paths):
    a = ProductIntegrand(weight=unit_weight(), window_start=0.1,
                         h=gaussian_bump([-8.0], 0.25, 1.0))
    b = ProductIntegrand(weight=unit_weight(), window_start=0.1,
                         h=gaussian_bump([8.0], 0.25, 1.0))
    rep = covariation(a, b, medium_paths)
    assert abs(rep.rhs.value) < 1e-8
    assert abs(rep.lhs.value) < 4.0 * max(rep.lhs.se, 1e-12)


def test_integrate_martingale_mean_zero(medium_paths, phi_w):
    vals = np.array([integrate(phi_w, p, p.grid.horizon) for p in medium_paths])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean()) < 4.0 * se


class FutureLeakIntegrand(PredictableIntegrand):
    """Test double that reads the path beyond t: the mass move from just before
    the event to the next grid time, which contains the event's own outcome."""

    def at_events(self, path, times, positions):
        idx_before = np.searchsorted(path.events.times, times, side="left")
        cum = np.concatenate([[0], np.cumsum(path.events.signs.astype(np.int64))])
        n_before = path.meta["n_initial"] + cum[idx_before]
        next_grid = np.ceil(times / path.grid.dt - 1e-12).astype(int)
        n_next = path.counts[np.minimum(next_grid, path.grid.n_steps)]
        return np.sign(n_next - n_before).astype(np.float64)


def test_future_peeking_breaks_zero_mean(medium_paths):
    vals = np.array([integrate(FutureLeakIntegrand(), p, p.grid.horizon)
                     for p in medium_paths])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert vals.mean() > 10.0 * se  # anticipation shows up as a strong positive drift


def test_integrand_nonfinite_reports_event(smoke_path):
    class Bad(PredictableIntegrand):
        def at_events(self, path, times, positions):
            vals = np.ones(times.shape[0])
            vals[7] = np.inf
            return vals

    with pytest.raises(EvaluationError, match="event 7"):
        integrate(Bad(), smoke_path, smoke_path.grid.horizon)


def test_requires_event_log(smoke_params, dirac0):
    from superbm.simulate import replicate_rng, simulate
    path = simulate(dirac0, smoke_params, record_events=False, rng=replicate_rng(1, 1))
    with pytest.raises(ValueError, match="event log"):
        integrate(ConstantIntegrand(1.0), path, 0.5)


def test_norm_bound_chain(medium_paths, phi_u, phi_w):
    for phi in (phi_u, phi_w):
        rep = norm_bound_report(phi, medium_paths)
        lhs, bound = rep["norm_sq"], rep["bound"]
        assert lhs.value <= bound.value + 3.0 * (lhs.se + bound.se)


def test_closed_form_wide_gaussian_is_mass_increment(smoke_path):
    # a very wide bump is ~1 on the support with negligible half Laplacian,
    # so the closed form collapses to the mass increment over the window
    wide = ProductIntegrand(weight=unit_weight(), window_start=0.1,
                            h=gaussian_bump([0.0], 50.0, 1.0))
    t = smoke_path.grid.horizon
    got = integrate_u_closed_form(wide, smoke_path, t)
    mass = smoke_path.total_mass_series()
    a_idx = smoke_path.grid.index_of(0.1)
    expected = mass[-1] - mass[a_idx]
    assert got == pytest.approx(expected, abs=5e-3)
