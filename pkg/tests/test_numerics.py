import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import BlowUpError, SingularMatrixError
from numerics import (
    LinearFactor,
    contract_jacobian,
    contract_quadratic,
    make_grid,
    matricize,
    rk4_integrate,
    solve_linear,
    thin_svd,
    unmatricize,
)


def test_contract_quadratic_matches_index_sum(rng):
    H = rng.standard_normal((3, 3, 3))
    z = rng.standard_normal(3)
    assert_allclose(contract_quadratic(H, z), np.einsum("ipq,p,q->i", H, z, z), rtol=1e-12)

    Z = rng.standard_normal((5, 3))
    assert_allclose(contract_quadratic(H, Z), np.einsum("ipq,tp,tq->ti", H, Z, Z), rtol=1e-12)


def test_contract_quadratic_zero_vector(rng):
    H = rng.standard_normal((4, 4, 4))
    assert np.all(contract_quadratic(H, np.zeros(4)) == 0.0)


def test_contract_jacobian_is_derivative(rng):
    H = rng.standard_normal((3, 3, 3))
    z = rng.standard_normal(3)
    J = contract_jacobian(H, z)
    eps = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        fd = (contract_quadratic(H, z + e) - contract_quadratic(H, z - e)) / (2 * eps)
        assert_allclose(J[:, j], fd, atol=1e-8)


def test_matricize_layout(rng):
    H = rng.standard_normal((3, 3, 3))
    Hm = matricize(H)
    assert Hm.shape == (3, 9)
    assert Hm[1, 2 * 3 + 0] == H[1, 2, 0]
    assert np.array_equal(unmatricize(Hm), H)


def test_solve_linear(rng):
    M = rng.standard_normal((4, 4)) + 4 * np.eye(4)
    B = rng.standard_normal((4, 2))
    assert_allclose(M @ solve_linear(M, B), B, atol=1e-12)


def test_solve_linear_singular():
    with pytest.raises(SingularMatrixError) as info:
        solve_linear(np.zeros((3, 3)), np.ones(3))
    assert info.value.cond == float("inf")


def test_linear_factor_transposed_solve(rng):
    M = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    factor = LinearFactor(M)
    b = rng.standard_normal(3)
    assert_allclose(M.T @ factor.solve_transposed(b), b, atol=1e-12)


def test_thin_svd_reconstructs(rng):
    X = rng.standard_normal((6, 4))
    U, s, V = thin_svd(X)
    assert U.shape == (6, 4) and V.shape == (4, 4)
    assert np.all(np.diff(s) <= 0)
    assert_allclose((U * s) @ V.T, X, atol=1e-12)


def test_make_grid_hits_sample_times():
    times = np.array([0.0, 1.0, 3.0])
    grid, idx = make_grid(times, 4)
    assert grid.size == 9
    assert np.array_equal(grid[idx], times)
    assert np.all(np.diff(grid) > 0)


def test_make_grid_rejects_unsorted_times():
    with pytest.raises(ValueError):
        make_grid(np.array([0.0, 2.0, 1.0]))


def test_rk4_linear_decay():
    A = np.diag([-1.0, -2.0])
    grid, _ = make_grid(np.array([0.0, 1.0]), 1000)
    states, blowup = rk4_integrate(lambda Y, U: Y @ A.T, np.array([[1.0, 1.0]]), grid, lambda t: None)
    assert_allclose(states[-1, 0], [np.exp(-1.0), np.exp(-2.0)], atol=1e-8)
    assert np.all(np.isinf(blowup))


def test_rk4_zero_initial_condition_stays_zero():
    grid, _ = make_grid(np.linspace(0.0, 1.0, 5), 3)
    states, _ = rk4_integrate(lambda Y, U: -Y + Y ** 2, np.zeros((2, 3)), grid, lambda t: None)
    assert np.all(states == 0.0)


def test_rk4_order_of_accuracy():
    A = np.array([[-0.5, 2.0], [-2.0, -0.5]])
    y0 = np.array([[1.0, 0.0]])

    def terminal(steps):
        grid, _ = make_grid(np.array([0.0, 2.0]), steps)
        return rk4_integrate(lambda Y, U: Y @ A.T, y0, grid, lambda t: None)[0][-1, 0]

    reference = terminal(16 * 40)
    ratio = np.linalg.norm(terminal(20) - reference) / np.linalg.norm(terminal(40) - reference)
    assert 12.0 < ratio < 20.0


def test_rk4_blowup_raises():
    grid, _ = make_grid(np.linspace(0.0, 2.0, 21), 10)
    with pytest.raises(BlowUpError) as info:
        rk4_integrate(lambda Y, U: Y ** 2, np.array([[1.0]]), grid, lambda t: None, bound=1e6)
    assert 0.9 < info.value.time <= 2.0
    assert info.value.index == 0


def test_rk4_blowup_mask_keeps_other_trajectories():
    grid, _ = make_grid(np.linspace(0.0, 2.0, 21), 10)
    states, blowup = rk4_integrate(lambda Y, U: Y ** 2, np.array([[1.0], [0.0]]), grid,
                                   lambda t: None, on_blowup="mask", bound=1e6)
    assert np.isfinite(blowup[0]) and np.isinf(blowup[1])
    assert np.isnan(states[-1, 0, 0])
    assert states[-1, 1, 0] == 0.0
