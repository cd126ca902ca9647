import numpy as np
import pytest

from voltvar.fixed_point import AndersonConfig, solve


def contraction(rng, n, rho):
    A = rng.normal(size=(n, n))
    A *= rho / np.linalg.norm(A, 2)
    return A, rng.normal(size=n)


def test_linear_contraction_solution():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        A, b = contraction(rng, 8, 0.9)
        exact = np.linalg.solve(np.eye(8) - A, b)
        for method in ("anderson", "picard"):
            r = solve(lambda x: A @ x + b, np.zeros(8), AndersonConfig(method=method, tol=1e-11, max_iter=2000))
            assert r.converged and r.residual <= 1e-11
            assert np.allclose(r.v_star, exact, atol=1e-9)


def test_anderson_beats_picard_on_slow_contraction():
    rng = np.random.default_rng(0)
    A, b = contraction(rng, 10, 0.97)
    F = lambda x: A @ x + b  # noqa: E731
    fast = solve(F, np.zeros(10), AndersonConfig(max_iter=2000))
    slow = solve(F, np.zeros(10), AndersonConfig(method="picard", max_iter=2000))
    assert fast.converged and slow.converged and fast.iterations < slow.iterations


def test_exact_start_returns_immediately():
    r = solve(lambda x: 0.5 * x + 1.0, np.array([2.0]))
    assert r.converged and r.iterations == 0


def test_failure_returns_best_iterate():
    r = solve(lambda x: 2.0 * x + 1.0, np.array([0.0]), AndersonConfig(method="picard", max_iter=10))
    assert not r.converged and r.iterations == 0 and r.residual == 1.0


def test_config_validation():
    for bad in ({"memory": 0}, {"relaxation": 0.0}, {"tol": 0.0}, {"method": "newton"}):
        with pytest.raises(ValueError):
            AndersonConfig(**bad)
