import math

import numpy as np
import pytest

from superbm.measures import (AtomicMeasure, EvaluationError, MeasureError, ScalarField,
                              add_atom, bl_distance, pair, total_mass)


def test_pair_constant_is_total_mass():
    mu = AtomicMeasure.dirac([0.0], 2.0)
    assert pair(mu, ScalarField.constant(1.0)) == 2.0


def test_pair_zero_measure():
    mu = AtomicMeasure.zero(1)
    assert pair(mu, lambda pos: pos[:, 0] ** 2) == 0.0


def test_pair_hand_sum():
    mu = AtomicMeasure.from_atoms([([0.0], 0.5), ([1.0], 0.5)])
    assert pair(mu, lambda pos: pos[:, 0] ** 2) == pytest.approx(0.5, abs=1e-15)


def test_pair_linearity():
    rng = np.random.default_rng(0)
    mu = AtomicMeasure(rng.normal(size=(50, 2)), rng.uniform(0.1, 1.0, 50))
    f = lambda pos: np.sin(pos[:, 0])
    g = lambda pos: pos[:, 1] ** 2
    alpha, beta = 0.7, -2.3
    combo = lambda pos: alpha * f(pos) + beta * g(pos)
    assert pair(mu, combo) == pytest.approx(alpha * pair(mu, f) + beta * pair(mu, g),
                                            rel=1e-13)


def test_total_mass_zero_and_simple():
    assert total_mass(AtomicMeasure.zero(3)) == 0.0
    mu = AtomicMeasure.from_atoms([([0.0], 0.25), ([3.0], 0.75)])
    assert total_mass(mu) == 1.0


def test_total_mass_many_quanta_exact():
    # fsum of n copies of fl(1/n) equals the correctly rounded product n * fl(1/n)
    n = 10 ** 6
    mu = AtomicMeasure.uniform(np.zeros((n, 1)), 1.0 / n)
    tm = total_mass(mu)
    assert tm == float(n * (1.0 / n))
    assert abs(tm - 1.0) < n * 2.3e-16


def test_add_atom_dirac_from_zero():
    mu = add_atom(AtomicMeasure.zero(2), [1.0, 2.0], 1.0)
    assert total_mass(mu) == 1.0
    assert mu.n_atoms == 1


def test_add_atom_zero_mass_pairing_identity():
    mu = AtomicMeasure.from_atoms([([0.5], 0.3), ([1.5], 0.7)])
    nu = add_atom(mu, [9.0], 0.0)
    for f in (lambda p: p[:, 0], lambda p: np.exp(-p[:, 0] ** 2)):
        assert pair(nu, f) == pytest.approx(pair(mu, f), abs=1e-15)
    assert total_mass(nu) == total_mass(mu)


def test_add_atom_pairing_linearity():
    rng = np.random.default_rng(1)
    mu = AtomicMeasure(rng.normal(size=(30, 1)), rng.uniform(0.0, 1.0, 30))
    h = lambda pos: np.exp(-pos[:, 0] ** 2 / 2)
    x, eps = [0.3], 1e-3
    bumped = add_atom(mu, x, eps)
    expected = eps * float(h(np.array([[0.3]]))[0])
    # exact up to one rounding of the full (correctly rounded) pairing sum
    ulp = np.spacing(abs(pair(mu, h)))
    assert pair(bumped, h) - pair(mu, h) == pytest.approx(expected, abs=2 * ulp)


def test_add_atom_never_mutates_and_commutes():
    mu = AtomicMeasure.dirac([0.0], 1.0)
    a = add_atom(add_atom(mu, [1.0], 0.25), [2.0], 0.5)
    b = add_atom(add_atom(mu, [2.0], 0.5), [1.0], 0.25)
    assert mu.n_atoms == 1
    for f in (lambda p: p[:, 0], lambda p: np.cos(p[:, 0])):
        assert pair(a, f) == pytest.approx(pair(b, f), abs=1e-15)


def test_add_atom_rejects_negative():
    with pytest.raises(MeasureError):
        add_atom(AtomicMeasure.zero(1), [0.0], -1e-9)


def test_measure_validation():
    with pytest.raises(MeasureError):
        AtomicMeasure([[0.0]], [-1.0])
    with pytest.raises(MeasureError):
        AtomicMeasure([[np.inf]], [1.0])
    with pytest.raises(MeasureError):
        AtomicMeasure([[0.0], [1.0]], [1.0])


def test_pair_reports_bad_atom():
    mu = AtomicMeasure.from_atoms([([0.0], 1.0), ([1.0], 1.0)])
    with pytest.raises(EvaluationError, match="atom 0"):
        pair(mu, lambda pos: 1.0 / pos[:, 0])


# -- bounded-Lipschitz metric -------------------------------------------------

def test_bl_reflexive():
    mu = AtomicMeasure.from_atoms([([0.0], 1.0), ([2.0], 0.5)])
    assert bl_distance(mu, mu) == pytest.approx(0.0, abs=1e-9)


def test_bl_dirac_vs_zero():
    assert bl_distance(AtomicMeasure.dirac([0.0]), AtomicMeasure.zero(1)) == pytest.approx(1.0, abs=1e-9)
    assert bl_distance(AtomicMeasure.zero(1), AtomicMeasure.dirac([0.0])) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("y", [0.3, 0.9, 1.0, 1.7, 5.0])
def test_bl_two_diracs(y):
    d = bl_distance(AtomicMeasure.dirac([0.0]), AtomicMeasure.dirac([y]))
    assert d == pytest.approx(min(y, 1.0), abs=1e-8)


def test_bl_pairing_equal_measures():
    mu = AtomicMeasure.from_atoms([([1.0], 1.0)])
    nu = AtomicMeasure.from_atoms([([1.0], 0.25), ([1.0], 0.75)])
    assert bl_distance(mu, nu) == pytest.approx(0.0, abs=1e-9)


def _random_measure(rng, max_atoms=6):
    n = int(rng.integers(0, max_atoms + 1))
    if n == 0:
        return AtomicMeasure.zero(2)
    return AtomicMeasure(rng.normal(scale=2.0, size=(n, 2)), rng.uniform(0.0, 1.5, n))


def test_bl_metric_axioms_random():
    rng = np.random.default_rng(7)
    for _ in range(12):
        a, b, c = (_random_measure(rng) for _ in range(3))
        dab = bl_distance(a, b)
        dba = bl_distance(b, a)
        assert dab >= -1e-12
        assert dab == pytest.approx(dba, abs=1e-8)
        assert dab <= bl_distance(a, c) + bl_distance(c, b) + 1e-8


def test_bl_against_cvxpy_oracle():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(11)
    for _ in range(4):
        a, b = _random_measure(rng, 4), _random_measure(rng, 4)
        if a.is_zero and b.is_zero:
            continue
        pos = np.concatenate([a.positions.reshape(-1, 2), b.positions.reshape(-1, 2)])
        w = np.concatenate([a.masses, -b.masses])
        n = pos.shape[0]
        dmat = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        best = 0.0
        for sign in (1.0, -1.0):
            f = cp.Variable(n)
            cons = [f >= 0, f <= 1]
            for i in range(n):
                for j in range(i + 1, n):
                    cons += [f[i] - f[j] <= dmat[i, j], f[j] - f[i] <= dmat[i, j]]
            prob = cp.Problem(cp.Maximize(sign * w @ f), cons)
            prob.solve(solver=cp.CLARABEL)
            best = max(best, prob.value)
        assert bl_distance(a, b) == pytest.approx(best, abs=1e-6)


def test_scalar_field_bound_and_at():
    f = ScalarField(lambda pos: np.tanh(pos[:, 0]), bound=1.0)
    assert f.at([0.5]) == pytest.approx(math.tanh(0.5))
    with pytest.raises(MeasureError):
        ScalarField(lambda pos: pos[:, 0], bound=-1.0)
