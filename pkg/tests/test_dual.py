import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otrect.core import CostSpec
from otrect.dual import (
    active_indices,
    build_profile,
    dual_value,
    enumerate_knots_oracle,
    expected_loss,
    lad_objective,
    mean_objective,
    rectified_distribution,
    solve_dual,
    squared_loss_objective,
    squared_loss_rectify,
)

SQ2 = np.sqrt(2.0)
ETA = 1 - 0.2 / (SQ2 / 3)


def test_build_profile_examples():
    p = build_profile([2, 0, 1], r=0.5)
    np.testing.assert_allclose(p.values, [0, 1, 2])
    np.testing.assert_array_equal(p.perm, [1, 2, 0])
    assert list(build_profile([1, 1]).perm) == [0, 1]
    p = build_profile([0, 1, 2], r=0.5)
    np.testing.assert_allclose(p.pow_suffix[:3], [(1 + SQ2) / 3, (1 + SQ2) / 3, SQ2 / 3])
    with pytest.raises(ValueError):
        build_profile([-1.0, 2.0])


def test_solve_dual_worked_example():
    sol = solve_dual(build_profile([0, 1, 2], r=0.5), 0.2)
    assert sol.lambda_star == pytest.approx(SQ2)
    assert sol.knot == 2
    assert sol.eta == pytest.approx(ETA)
    assert sol.eta == pytest.approx(0.57574, abs=1e-5)
    assert sol.objective == pytest.approx(0.71716, abs=1e-5)
    lam = np.arange(0, 3, 1e-5)
    grid = dual_value(build_profile([0, 1, 2], r=0.5), 0.2, lam)
    assert sol.objective == pytest.approx(grid.max(), abs=1e-4)


def test_solve_dual_corner_cases():
    p = build_profile([0, 1, 2], r=0.5)
    triv = solve_dual(p, p.total_pow)
    assert triv.trivial and triv.objective == 0 and triv.lambda_star == 0
    zero = solve_dual(p, 0.0)
    assert zero.objective == pytest.approx(1.0) and zero.knot == 3


def _random_profile(rng):
    n = int(rng.integers(1, 13))
    r = float(rng.choice([0.3, 0.5, 0.7]))
    x = np.abs(rng.normal(size=n))
    w = rng.dirichlet(np.ones(n)) if rng.random() < 0.5 else None
    p = build_profile(x, w, r)
    return p, float(rng.uniform(0, 2 * p.total_pow))


def test_oracle_agrees_on_all_fields():
    rng = np.random.default_rng(11)
    for _ in range(300):
        p, delta = _random_profile(rng)
        a, b = solve_dual(p, delta), enumerate_knots_oracle(p, delta)
        assert a.objective == pytest.approx(b.objective, abs=1e-9)
        assert a.knot == b.knot
        assert a.lambda_star == pytest.approx(b.lambda_star, abs=1e-9)
        assert a.eta == pytest.approx(b.eta, abs=1e-9)


def test_oracle_handles_ties():
    p = build_profile([1, 1, 1, 2, 2], r=0.5)
    for delta in np.linspace(0.01, p.total_pow, 17):
        assert solve_dual(p, delta).objective == pytest.approx(
            enumerate_knots_oracle(p, delta).objective, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=12),
       st.floats(0, 1), st.sampled_from([0.3, 0.5, 0.7]))
def test_objective_bounds_grid(x, frac, r):
    p = build_profile(x, r=r)
    delta = frac * p.total_pow
    sol = solve_dual(p, delta)
    lam = np.linspace(0, 2 * max(1.0, max(x)), 2001)
    assert np.all(dual_value(p, delta, lam) <= sol.objective + 1e-9)


def test_monotone_in_budget_and_scaling():
    rng = np.random.default_rng(5)
    x = np.abs(rng.normal(size=9))
    p = build_profile(x, r=0.5)
    vals = [solve_dual(p, d).objective for d in np.linspace(0, p.total_pow, 30)]
    assert np.all(np.diff(vals) <= 1e-12)
    s, delta = 3.7, 0.4 * p.total_pow
    a = solve_dual(p, delta)
    b = solve_dual(build_profile(s * x, r=0.5), delta * s**0.5)
    assert b.objective == pytest.approx(s * a.objective)
    assert b.lambda_star == pytest.approx(s**0.5 * a.lambda_star)


def test_convex_regime_water_fills():
    p = build_profile([0.0, 1.0, 2.0], r=2.0)
    sol = solve_dual(p, 0.5)
    lam = np.linspace(0, 5, 50001)
    # dual of the convex problem is max_lam sum a (x - c)_+ style; check objective directly
    c = sol.level
    assert np.sum(np.minimum([0.0, 1.0, 2.0], c) ** 2) / 3 == pytest.approx(0.5)
    assert sol.objective == pytest.approx(np.sum(np.maximum(np.array([0, 1, 2]) - c, 0)) / 3)
    assert list(active_indices(p, sol)) == [1, 2] or list(active_indices(p, sol)) == [2]
    del lam


def test_mean_and_lad_objective_examples():
    spec = CostSpec(0.5)
    assert mean_objective([0, 1, 2], [0.0], spec, 0.2).objective == pytest.approx(0.71716, abs=1e-5)
    assert mean_objective([3.0], [3.0], spec, 0.4).objective == 0.0
    X = np.ones((3, 1))
    y = np.array([0.0, 1.0, 2.0])
    sol = lad_objective((X, y), [0.0], spec, 0.2)
    assert sol.delta_effective == pytest.approx(0.2)
    assert sol.objective == pytest.approx(0.71716, abs=1e-5)
    assert lad_objective((X, X[:, 0] * 2), [2.0], spec, 1.0).objective == 0
    assert lad_objective((X, y), [0.0], spec, 0).objective == pytest.approx(1.0)
    coef = np.array([0.6])
    sol = lad_objective((X, y), coef, spec, 0.2)
    assert sol.delta_effective == pytest.approx(0.2 * np.sqrt(1.36) ** 0.5)


def test_rectified_distribution_worked_example():
    d = rectified_distribution([0, 1, 2], [0.0], "mean", CostSpec(0.5), 0.2)
    pts, mass = d.support()
    assert mass.sum() == pytest.approx(1.0, abs=1e-12)
    got = dict(zip(pts[:, 0].round(12), mass))
    assert got[0.0] == pytest.approx((2 - ETA) / 3)
    assert got[1.0] == pytest.approx(1 / 3)
    assert got[2.0] == pytest.approx(ETA / 3)
    assert d.transport_cost() == pytest.approx(0.2, abs=1e-12)
    assert list(d.fully_moved_sources()) == []


def test_rectified_distribution_corners():
    z = np.array([0.0, 1.0, 2.0])
    d = rectified_distribution(z, [0.5], "mean", CostSpec(0.5), 0.0)
    np.testing.assert_allclose(d.points[:, 0], z)
    d = rectified_distribution(z, [0.5], "mean", CostSpec(0.5), 10.0)
    np.testing.assert_allclose(d.points[:, 0], 0.5)


def test_rectified_consistency_random():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(2, 15))
        spec = CostSpec(float(rng.uniform(0.2, 0.9)))
        if rng.random() < 0.5:
            z = rng.normal(size=(n, 2))
            theta = rng.normal(size=2)
            data, task, kw = z, "mean", {}
            sol = mean_objective(z, theta, spec, 0.0)
            S1 = build_profile(np.linalg.norm(z - theta, axis=1), r=spec.r).total_pow
            delta = rng.uniform(0, 1.5 * S1)
            sol = mean_objective(z, theta, spec, delta)
        else:
            X = rng.normal(size=(n, 2))
            y = rng.normal(size=n)
            theta, b = rng.normal(size=2), float(rng.normal())
            data, task, kw = (X, y), "regression", {"intercept": b}
            delta = rng.uniform(0, 1.5)
            sol = lad_objective(data, theta, spec, delta, intercept=b)
        d = rectified_distribution(data, theta, task, spec, delta, **kw)
        assert d.mass.sum() == pytest.approx(1.0, abs=1e-12)
        assert expected_loss(d, theta, task, kw.get("intercept", 0.0)) == pytest.approx(
            sol.objective, abs=1e-9)
        # long-haul structure: at most one source is split
        assert len(d.source) - len(set(d.source.tolist())) <= 1


def test_squared_loss_examples():
    big = squared_loss_rectify(1.0, 1.0, 100.0)
    assert big.regime == "no-move" and big.displacement == 0
    res = squared_loss_rectify(1.0, 1.0, 0.01)
    assert res.regime == "long-haul"
    d = np.arange(0, 1 + 1e-7, 1e-6)
    assert res.displacement == pytest.approx(
        d[np.argmin(squared_loss_objective(d, 1.0, 1.0, 0.01))], abs=1e-6)
    flat = squared_loss_rectify(0.0, 2.0, 0.3)
    assert flat.displacement == 0 and flat.objective == 0
    with pytest.raises(ValueError):
        squared_loss_rectify(1.0, 0.0, 1.0)
