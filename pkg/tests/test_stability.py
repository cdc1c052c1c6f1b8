import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import solve_continuous_lyapunov

from conftest import random_stable_params
from errors import SingularMatrixError
from numerics import spectral_abscissa
from stability import (
    StableLatentParams,
    assemble,
    energy_rate,
    identity_params,
    lyapunov_weight,
    pullback,
    stabilize_spectrum,
    stable_params_from_matrix,
)


def test_identity_parameters_assemble_to_minus_identity():
    A, H, B = assemble(identity_params(3, 2))
    assert_allclose(A, -np.eye(3))
    assert not np.any(H)
    assert B.shape == (3, 2)


def test_single_entry_of_s_gives_antisymmetric_pair():
    S = np.zeros((2, 2, 2))
    S[0, 0, 1] = 1.0
    params = StableLatentParams(K=np.zeros((2, 2)), R=np.eye(2), Q=np.eye(2), S=S, B=np.zeros((2, 1)))
    _, H, _ = assemble(params)
    assert H[0, 0, 1] == 1.0
    assert H[1, 0, 0] == -1.0
    assert np.count_nonzero(H) == 2


@pytest.mark.parametrize("r", [2, 5, 10])
def test_random_parameters_are_hurwitz_and_energy_preserving(rng, r):
    for _ in range(10):
        params = random_stable_params(rng, r)
        A, H, _ = assemble(params)
        assert spectral_abscissa(A) < -1e-12 * np.linalg.norm(A)
        Qt = lyapunov_weight(params)
        for z in rng.standard_normal((5, r)):
            linear, quadratic = energy_rate(A, H, Qt, z)
            scale = np.linalg.norm(Qt @ z) * np.linalg.norm(np.einsum("ipq,p,q->i", H, z, z))
            assert abs(quadratic) <= 1e-12 * max(scale, 1.0)
            assert linear <= 1e-12 * np.linalg.norm(Qt @ z) ** 2


def test_singular_q_is_rejected():
    params = identity_params(2, 1)
    params.Q[:] = 0.0
    with pytest.raises(SingularMatrixError):
        assemble(params)


def test_pullback_matches_finite_differences(rng):
    r, m = 3, 2
    params = random_stable_params(rng, r, m)
    GA = rng.standard_normal((r, r))
    GH = rng.standard_normal((r, r, r))
    GB = rng.standard_normal((r, m))

    def f(p):
        A, H, B = assemble(p)
        return np.sum(GA * A) + np.sum(GH * H) + np.sum(GB * B)

    grads = pullback(params, GA, GH, GB)
    eps = 1e-6
    base = params.as_dict()
    for name, value in base.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            vals = []
            for sign in (1.0, -1.0):
                bumped = {k: v.copy() for k, v in base.items()}
                bumped[name][idx] += sign * eps
                vals.append(f(StableLatentParams.from_dict(bumped)))
            fd[idx] = (vals[0] - vals[1]) / (2 * eps)
        assert_allclose(grads[name], fd, rtol=1e-6, atol=1e-7 * np.abs(fd).max())


def test_stabilize_spectrum_reflects_unstable_eigenvalues():
    A = np.diag([0.5, -1.0])
    A_s = stabilize_spectrum(A)
    assert_allclose(np.sort(np.linalg.eigvals(A_s).real), [-1.0, -0.5], atol=1e-12)


def test_lyapunov_route_reproduces_hurwitz_matrix(rng):
    V = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    A0 = V @ np.diag([-1.0, -2.0, -3.0]) @ np.linalg.inv(V)
    params = stable_params_from_matrix(A0, np.ones((3, 1)), route="lyapunov")
    A, _, B = assemble(params)
    assert_allclose(A, A0, atol=1e-8)
    assert_allclose(B, np.ones((3, 1)))


def test_identity_route_projects_energy_preserving_tensor(rng):
    source = random_stable_params(rng, 3)
    source.Q[:] = np.eye(3)
    _, H0, _ = assemble(source)
    params = stable_params_from_matrix(-np.eye(3), np.zeros((3, 1)), H0, route="identity")
    A, H, _ = assemble(params)
    assert_allclose(A, -np.eye(3), atol=1e-12)
    assert_allclose(H, H0, atol=1e-12)


def test_lyapunov_route_reproduces_energy_preserving_tensor(rng):
    V = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    A0 = V @ np.diag([-1.0, -2.0, -3.0]) @ np.linalg.inv(V)
    P = solve_continuous_lyapunov(A0.T, -np.eye(3))
    source = random_stable_params(rng, 3)
    source.Q[:] = np.linalg.inv(np.linalg.cholesky(P))
    _, H0, _ = assemble(source)
    params = stable_params_from_matrix(A0, np.zeros((3, 1)), H0, route="lyapunov")
    A, H, _ = assemble(params)
    assert_allclose(A, A0, atol=1e-8)
    assert_allclose(H, H0, atol=1e-8)


def test_unknown_route():
    with pytest.raises(ValueError):
        stable_params_from_matrix(-np.eye(2), np.zeros((2, 1)), route="nope")
