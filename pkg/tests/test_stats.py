import numpy as np
import pytest

from superbm.stats import (Estimate, MomentAccumulator, mean_se, parallel_map, resolve_jobs,
                           variance_se)


def test_mean_se_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, 500)
    est = mean_se(x)
    assert est.value == pytest.approx(x.mean())
    assert est.se == pytest.approx(x.std(ddof=1) / np.sqrt(500))


def test_mean_se_degenerate():
    assert np.isnan(mean_se(np.array([])).value)
    one = mean_se(np.array([4.0]))
    assert one.value == 4.0 and np.isnan(one.se)


def test_variance_se_gaussian_coverage():
    rng = np.random.default_rng(1)
    x = rng.normal(0.0, 2.0, 2000)
    est = variance_se(x)
    assert abs(est.value - 4.0) < 4.0 * est.se
    # gaussian: Var(s^2) ~ 2 sigma^4 / n
    assert est.se == pytest.approx(np.sqrt(2 * 4.0 ** 2 / 2000), rel=0.2)


def test_accumulator_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.normal(size=333)
    acc = MomentAccumulator()
    acc.update_batch(x)
    assert acc.count == 333
    assert acc.mean == pytest.approx(x.mean(), rel=1e-12)
    assert acc.variance == pytest.approx(x.var(ddof=1), rel=1e-10)
    assert acc.estimate().se == pytest.approx(x.std(ddof=1) / np.sqrt(333), rel=1e-10)


def test_accumulator_merge_consistency():
    rng = np.random.default_rng(3)
    x = rng.normal(5.0, 0.1, 1000)
    whole = MomentAccumulator()
    whole.update_batch(x)
    for cut in (1, 17, 500, 999):
        a, b = MomentAccumulator(), MomentAccumulator()
        a.update_batch(x[:cut])
        b.update_batch(x[cut:])
        merged = a.merge(b)
        assert merged.count == whole.count
        assert merged.mean == pytest.approx(whole.mean, rel=1e-12)
        assert merged.m2 == pytest.approx(whole.m2, rel=1e-9)


def test_accumulator_merge_associative_random_splits():
    rng = np.random.default_rng(4)
    x = rng.exponential(size=400)
    parts = np.array_split(x, 7)
    accs = []
    for p in parts:
        a = MomentAccumulator()
        a.update_batch(p)
        accs.append(a)
    left = accs[0]
    for a in accs[1:]:
        left = left.merge(a)
    right = accs[-1]
    for a in reversed(accs[:-1]):
        right = a.merge(right)
    assert left.count == right.count
    assert left.mean == pytest.approx(right.mean, rel=1e-12)
    assert left.m2 == pytest.approx(right.m2, rel=1e-9)


def test_accumulator_merge_empty():
    a = MomentAccumulator()
    b = MomentAccumulator()
    b.update_batch([1.0, 2.0])
    assert a.merge(b).mean == b.mean
    assert b.merge(a).count == 2


def _square(i, ctx):
    return i * i + ctx


def test_parallel_map_matches_serial():
    serial = parallel_map(_square, 20, 7, n_jobs=1)
    parallel = parallel_map(_square, 20, 7, n_jobs=2)
    assert serial == parallel == [i * i + 7 for i in range(20)]


def test_resolve_jobs():
    assert resolve_jobs(3) == 3
    assert resolve_jobs(None) >= 1
    assert resolve_jobs(0) >= 1


def test_estimate_repr():
    assert "+-" in repr(Estimate(1.0, 0.1))
