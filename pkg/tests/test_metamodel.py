import itertools

import numpy as np
import pytest

from bilevel.core import Individual, Tag
from bilevel.metamodel import (
    InsufficientDataError,
    fit_linear,
    fit_phi,
    fit_psi,
    fit_quadratic,
    quadratic_basis_size,
)


def normal_equations_oracle(X, y):
    """Raw-coordinate fit in the same coefficient order, via (A^T A) c = A^T y."""
    n = X.shape[1]
    cols = [np.ones(len(X))] + [X[:, i] for i in range(n)]
    cols += [X[:, i] * X[:, j] for i, j in itertools.combinations_with_replacement(range(n), 2)]
    A = np.column_stack(cols)
    return np.linalg.solve(A.T @ A, A.T @ y)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_basis_size(n):
    assert quadratic_basis_size(n) == (n + 1) * (n + 2) // 2


def test_coefficients_match_oracle_on_random_samples():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        n = 1 + trial % 3
        X = rng.uniform(-1.0, 1.0, (2 * quadratic_basis_size(n) + 5, n))
        y = rng.normal(size=len(X))
        got = fit_quadratic(X, y).coefficients()
        ref = normal_equations_oracle(X, y)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    assert worst <= 1e-6


def test_in_hypothesis_target_is_reproduced():
    rng = np.random.default_rng(7)
    X = rng.uniform(-3, 3, (20, 2))
    y = 1.5 - 2 * X[:, 0] + 0.5 * X[:, 1] + 3 * X[:, 0] ** 2 - X[:, 0] * X[:, 1] + 0.25 * X[:, 1] ** 2
    m = fit_quadratic(X, y)
    assert m.mse <= 1e-12
    assert np.allclose(m.coefficients(), [1.5, -2, 0.5, 3, -1, 0.25], atol=1e-9)
    assert np.allclose(m.quadratic, [[3, -0.5], [-0.5, 0.25]])
    assert m.predict([1.0, 1.0]) == pytest.approx(1.5 - 2 + 0.5 + 3 - 1 + 0.25)


def test_badly_scaled_inputs_still_fit():
    rng = np.random.default_rng(3)
    X = np.column_stack([rng.uniform(1e4, 1e4 + 1, 30), rng.uniform(-1e-3, 1e-3, 30)])
    y = (X[:, 0] - 1e4) ** 2 + 1e3 * X[:, 1]
    assert fit_quadratic(X, y).mse <= 1e-12


def test_insufficient_samples():
    with pytest.raises(InsufficientDataError):
        fit_quadratic(np.zeros((5, 2)), np.zeros(5))
    with pytest.raises(InsufficientDataError):
        fit_linear(np.zeros((2, 2)), np.zeros(2))


def test_rank_deficiency_is_flagged():
    X = np.tile(np.array([[1.0, 2.0]]), (10, 1))
    assert fit_quadratic(X, np.ones(10)).rank_deficient


def test_linear_fit():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10, 3))
    y = 2 + X @ np.array([1.0, -1.0, 0.5])
    m = fit_linear(X, y)
    assert m.mse <= 1e-20 + 1e-12
    assert np.allclose(m.linear, [1, -1, 0.5]) and m.intercept == pytest.approx(2)


def test_psi_and_phi_fits_on_exact_mapping():
    rng = np.random.default_rng(5)
    members = []
    for x in rng.uniform(-2, 2, (12, 2)):
        y = np.array([x[0] + x[1], x[0] ** 2])
        members.append(Individual(x, y, F_val=0.0, f_val=float(x @ x), tag=Tag.TAG1))
    psi, phi = fit_psi(members), fit_phi(members)
    assert psi.mse <= 1e-12 and phi.mse <= 1e-12
    assert np.allclose(psi.predict([0.5, -1.0]), [-0.5, 0.25])
    assert phi.predict([0.5, -1.0]) == pytest.approx(1.25)
    with pytest.raises(InsufficientDataError):
        fit_psi(members[:5])
