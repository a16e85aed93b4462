import numpy as np
import pytest

from superbm.functionals import (ConstantFunctional, PairingFunctional,
                                 ProductIntegralFunctional, SquaredPairingFunctional,
                                 WeightFunctional, pathwise_representation_error,
                                 vertical_derivative, vertical_derivative2,
                                 vertical_derivative_fd, vertical_derivative_richardson)
from superbm.integrals import integrate_u_closed_form
from superbm.paths import bump, d_infty, stop
from superbm.simulate import SimParams, replicate_rng, simulate
from superbm.paths import TimeGrid
from superbm.testfuncs import (ProductIntegrand, adapted_weight, clip_map, gaussian_bump,
                               tanh_map, unit_weight)


@pytest.fixture(scope="module")
def u_func():
    phi = ProductIntegrand(weight=unit_weight(), window_start=0.1,
                           h=gaussian_bump([0.0], 1.0, 1.0))
    return ProductIntegralFunctional(phi)


@pytest.fixture(scope="module")
def u_func_weighted():
    w = adapted_weight(0.05, gaussian_bump([0.0], 0.8, 1.0), tanh_map())
    phi = ProductIntegrand(weight=w, window_start=0.1,
                           h=gaussian_bump([0.4], 0.7, 1.2))
    return ProductIntegralFunctional(phi)


def test_fd_linear_functional_exact(smoke_path, wide_h):
    f = PairingFunctional(wide_h)
    for eps in (1e-2, 1e-4, 1e-6):
        fd = vertical_derivative_fd(f, 0.3, stop(smoke_path, 0.3), [0.7], eps)
        assert abs(fd - wide_h.at([0.7])) < 1e-9


def test_fd_constant_zero_exact(smoke_path):
    f = ConstantFunctional(3.5)
    assert vertical_derivative_fd(f, 0.2, stop(smoke_path, 0.2), [0.0], 1e-3) == 0.0


def test_fd_requires_positive_eps(smoke_path):
    f = ConstantFunctional(0.0)
    with pytest.raises(ValueError):
        vertical_derivative_fd(f, 0.2, stop(smoke_path, 0.2), [0.0], 0.0)


def test_squared_pairing_richardson_exact(smoke_path, wide_h):
    # (u + eps h)^2 gives quotient 2 u h + eps h^2; the Richardson pair kills
    # the eps term identically
    f = SquaredPairingFunctional(wide_h)
    t = 0.4
    sp = stop(smoke_path, t)
    u = sp.pair_at(sp.grid.index_of(t), wide_h)
    x = [0.5]
    d1, d2, extrap = vertical_derivative_richardson(f, t, sp, x, 1e-3)
    expected = 2.0 * u * wide_h.at(x)
    assert abs(extrap - expected) < 1e-9
    assert abs(d1 - expected - 1e-3 * wide_h.at(x) ** 2) < 1e-9


def test_vderiv_dispatches_to_analytic(smoke_path, u_func):
    x = [0.3]
    got = vertical_derivative(u_func, 0.3, smoke_path, x)
    gamma = u_func.integrand.weight_value(stop(smoke_path, 0.3))
    assert got == gamma * u_func.integrand.h.at(x)


def test_u_functional_vderiv_zero_before_window(smoke_path, u_func):
    assert vertical_derivative(u_func, 0.05, smoke_path, [0.0]) == 0.0
    assert vertical_derivative(u_func, 0.1, smoke_path, [0.0]) == 0.0


@pytest.mark.parametrize("t", [0.15, 0.3, 0.5])
def test_u_functional_fd_matches_analytic(smoke_path, u_func_weighted, t):
    # the functional is affine in the bump, so one-sided quotients are exact
    rng = np.random.default_rng(17)
    sp = stop(smoke_path, t)
    for _ in range(10):
        x = rng.normal(size=1)
        eps = 1e-3 * max(sp.total_mass_at_stop(), 1.0)
        fd = vertical_derivative_fd(u_func_weighted, t, sp, x, eps)
        analytic = u_func_weighted.analytic_vderiv(t, sp, x)
        assert abs(fd - analytic) < 1e-10


def test_weight_functional_vderiv_zero_after_measure_time(smoke_path):
    w = adapted_weight(0.1, gaussian_bump([0.0], 0.9, 1.0), clip_map(-3, 3))
    f = WeightFunctional(w)
    for t in (0.15, 0.3, 0.5):
        fd = vertical_derivative_fd(f, t, stop(smoke_path, t), [0.2], 1e-4)
        assert fd == 0.0


def test_vderiv2_linear_functional_zero(smoke_path, wide_h):
    f = PairingFunctional(wide_h)
    got = vertical_derivative2(f, 0.3, smoke_path, [0.1], [0.6])
    assert got == 0.0


def test_vderiv2_squared_pairing(smoke_path, wide_h):
    f = SquaredPairingFunctional(wide_h)
    x, y = [0.2], [-0.4]
    got = vertical_derivative2(f, 0.35, smoke_path, x, y)
    expected = 2.0 * wide_h.at(x) * wide_h.at(y)
    assert got == pytest.approx(expected, abs=1e-8)
    sym = vertical_derivative2(f, 0.35, smoke_path, y, x)
    assert got == pytest.approx(sym, abs=1e-8)


def test_non_anticipativity_bit_exact(smoke_path, wide_h, u_func, u_func_weighted):
    fs = [PairingFunctional(wide_h), SquaredPairingFunctional(wide_h),
          WeightFunctional(adapted_weight(0.1, wide_h, tanh_map())),
          u_func, u_func_weighted, ConstantFunctional(2.0)]
    for t in (0.0, 0.2, 0.45, 0.5):
        sp = stop(smoke_path, t)
        for f in fs:
            assert f(t, smoke_path) == f(t, sp)


def test_u_consistency_bit_for_bit(smoke_path, u_func_weighted):
    phi = u_func_weighted.integrand
    for t in (0.1, 0.3, 0.5):
        assert u_func_weighted(t, smoke_path) == integrate_u_closed_form(phi, smoke_path, t)


def test_representation_error_zero_before_window(smoke_path, u_func):
    from superbm.integrals import closed_form_series, integrate_series
    f_series = closed_form_series(u_func.integrand, smoke_path)
    e_series = integrate_series(u_func.integrand, smoke_path)
    a_idx = smoke_path.grid.index_of(0.1)
    assert np.all(f_series[:a_idx + 1] == 0.0)
    assert np.all(e_series[:a_idx + 1] == 0.0)


def test_representation_error_report(smoke_path, u_func):
    rep = pathwise_representation_error(u_func, smoke_path)
    assert rep["sup_error"] >= rep["terminal_error"] >= 0
    assert 0 <= rep["argmax_time"] <= smoke_path.grid.horizon


def test_representation_error_shrinks_with_refinement(dirac0):
    """Median sup_t |F - event integral| falls when (N, dt) refine 4x, 2x."""
    phi = ProductIntegrand(weight=unit_weight(), window_start=0.05,
                           h=gaussian_bump([0.0], 0.8, 1.0))
    f = ProductIntegralFunctional(phi)

    def median_err(n_q, dt, seed, reps=14):
        grid = TimeGrid.from_step(0.4, dt)
        params = SimParams(n_quantum=n_q, dim=1, grid=grid, seed=seed)
        errs = []
        for i in range(reps):
            path = simulate(dirac0, params, rng=replicate_rng(seed, i))
            errs.append(pathwise_representation_error(f, path)["sup_error"])
        return float(np.median(errs))

    coarse = median_err(150, 0.005, 51)
    fine = median_err(600, 0.0025, 52)
    assert fine < coarse


def test_continuity_probe_bounded_ratio(dirac0):
    """Lipschitz surrogate of d_infty continuity on sampled pairs.

    Not a proof of continuity: the probe only checks that the ratio
    |F(a) - F(b)| / d_infty(a, b) stays within a generous constant on a
    sample of nearby stopped paths.
    """
    grid = TimeGrid.from_step(0.2, 0.02)
    params = SimParams(n_quantum=30, dim=1, grid=grid, seed=8)
    paths = [simulate(dirac0, params, record_events=False, rng=replicate_rng(8, i))
             for i in range(4)]
    h = gaussian_bump([0.0], 1.0, 1.0)
    f = PairingFunctional(h)
    pts = [(t, stop(p, t)) for p in paths for t in (0.1, 0.2)]
    ratios = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = d_infty(pts[i], pts[j])
            if d > 1e-3:
                diff = abs(f.evaluate(*pts[i]) - f.evaluate(*pts[j]))
                ratios.append(diff / d)
    assert ratios
    bound = 50.0 * (h.sup_bound + h.sup_bound_half_laplacian)
    assert max(ratios) < bound


def test_representation_error_with_path_weight(smoke_path):
    w = adapted_weight(0.05, gaussian_bump([0.0], 0.8, 1.0), tanh_map())
    phi = ProductIntegrand(weight=w, window_start=0.1, h=gaussian_bump([0.2], 0.9, 1.0))
    rep = pathwise_representation_error(ProductIntegralFunctional(phi), smoke_path)
    assert np.isfinite(rep["sup_error"])
    assert rep["sup_error"] >= rep["terminal_error"]
