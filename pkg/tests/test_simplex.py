import numpy as np

from recalib.simplex import initial_simplex, minimize


def test_quadratic_converges():
    target = np.array([0.3, -1.2, 2.0])
    f = lambda x: float(np.sum((x - target) ** 2))
    res = minimize(f, initial_simplex(np.zeros(3), np.ones(3)), 2000, ftol=1e-14, xtol=1e-8)
    assert res.converged
    assert np.abs(res.x - target).max() < 1e-6
    assert res.evaluations <= 2000


def test_rosenbrock():
    f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
    res = minimize(f, initial_simplex([-1.2, 1.0], [0.5, 0.5]), 5000, ftol=1e-16, xtol=1e-10)
    assert np.abs(res.x - 1).max() < 1e-5


def test_box_is_respected():
    f = lambda x: float(np.sum((x - 5) ** 2))
    lo, hi = np.full(2, -1.0), np.full(2, 1.0)
    seen = []

    def g(x):
        seen.append(np.array(x))
        return f(x)

    res = minimize(g, initial_simplex(np.zeros(2), np.full(2, 0.5), lo, hi), 500, lo, hi)
    assert np.all(np.vstack(seen) >= lo) and np.all(np.vstack(seen) <= hi)
    assert np.allclose(res.x, 1.0, atol=1e-6)


def test_budget_is_hard():
    calls = []
    f = lambda x: calls.append(1) or float(np.sum(x**2))
    res = minimize(f, initial_simplex(np.ones(4), np.ones(4)), 37)
    assert len(calls) == res.evaluations <= 37


def test_initial_simplex_steps_inward_at_bound():
    sim = initial_simplex([1.0, 0.0], [0.5, 0.5], np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    assert sim.tolist() == [[1.0, 0.0], [0.5, 0.0], [1.0, 0.5]]
