from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_stable_params
from errors import DataError, RankDeficientError
from numerics import spectral_abscissa
from opinf import (
    OpInfData,
    compact_kron,
    expand_compact,
    finite_difference,
    fit_gasopinf,
    fit_opinf,
    gasopinf_loss_and_grad,
    latent_derivatives,
    opinf_lstsq,
)
from rom import latent_tensors
from stability import StableLatentParams


def _synthetic_regression(rng, A, H, B, K=60):
    Z = rng.standard_normal((K, A.shape[0]))
    U = rng.standard_normal((K, B.shape[1]))
    Zdot = Z @ A.T + np.einsum("ipq,kp,kq->ki", H, Z, Z) + U @ B.T
    return OpInfData(Z=Z, Zdot=Zdot, U=U, weights=np.ones(K))


def test_compact_kron_and_expand_agree(rng):
    Hc = rng.standard_normal((3, 6))
    H = expand_compact(Hc)
    assert_allclose(H, H.transpose(0, 2, 1))
    Z = rng.standard_normal((4, 3))
    assert_allclose(compact_kron(Z) @ Hc.T, np.einsum("ipq,kp,kq->ki", H, Z, Z), rtol=1e-12)


def test_lstsq_recovers_operators_without_regularization(rng):
    A = rng.standard_normal((3, 3))
    H = rng.standard_normal((3, 3, 3))
    H = 0.5 * (H + H.transpose(0, 2, 1))
    B = rng.standard_normal((3, 2))
    fitted = opinf_lstsq(_synthetic_regression(rng, A, H, B), reg=0.0)
    assert_allclose(fitted.A, A, atol=1e-9)
    assert_allclose(fitted.H, H, atol=1e-9)
    assert_allclose(fitted.B, B, atol=1e-9)


def test_regularization_shrinks_quadratic_term(rng):
    H = np.zeros((2, 2, 2))
    H[0, 0, 1] = H[0, 1, 0] = 1.0
    data = _synthetic_regression(rng, -np.eye(2), H, np.ones((2, 1)))
    loose = opinf_lstsq(data, reg=0.0)
    tight = opinf_lstsq(data, reg=1e3)
    assert np.linalg.norm(tight.H) < np.linalg.norm(loose.H)


def test_collinear_features_are_rank_deficient(rng):
    z = rng.standard_normal((20, 1))
    data = OpInfData(Z=np.hstack([z, 2.0 * z]), Zdot=rng.standard_normal((20, 2)),
                     U=rng.standard_normal((20, 1)), weights=np.ones(20))
    with pytest.raises(RankDeficientError):
        opinf_lstsq(data, reg=0.0)


def test_finite_difference_is_exact_on_quartics():
    t = np.linspace(0.0, 2.0, 21)
    X = np.column_stack([t ** 4, t ** 3 - t])
    D = finite_difference(X, t[1] - t[0])
    assert_allclose(D, np.column_stack([4 * t ** 3, 3 * t ** 2 - 1]), atol=1e-9)


def test_finite_difference_needs_five_samples():
    with pytest.raises(DataError):
        finite_difference(np.zeros((4, 1)), 0.1)


def test_latent_derivative_sources_agree(toy, toy_data):
    phi = np.eye(3)[:, :2]
    stored = latent_derivatives(toy_data, phi)
    from_fom = latent_derivatives(replace(toy_data, derivatives=None), phi, fom=toy)
    assert_allclose(from_fom.Zdot, stored.Zdot, atol=1e-12)
    assert_allclose(stored.weights[:toy_data.n_samples], 1.0 / toy_data.weights[0])


def test_gasopinf_gradient_matches_finite_differences(rng):
    params = random_stable_params(rng, 4)
    data = _synthetic_regression(rng, -np.eye(4), np.zeros((4, 4, 4)), np.ones((4, 1)), K=30)
    _, grads = gasopinf_loss_and_grad(params, data, reg=0.1)
    eps = 1e-6
    base = params.as_dict()
    for name in base:
        for flat in rng.choice(base[name].size, size=4, replace=False):
            idx = np.unravel_index(flat, base[name].shape)
            vals = []
            for sign in (1.0, -1.0):
                bumped = {k: v.copy() for k, v in base.items()}
                bumped[name][idx] += sign * eps
                vals.append(gasopinf_loss_and_grad(StableLatentParams.from_dict(bumped), data, 0.1)[0])
            fd = (vals[0] - vals[1]) / (2 * eps)
            assert grads[name][idx] == pytest.approx(fd, rel=1e-6, abs=1e-6), name


def test_fit_opinf_uses_pod_basis(toy, toy_data):
    model = fit_opinf(toy_data, 2, reg=1e-7, fom=toy)
    assert model.method == "opinf"
    assert_allclose(model.phi, model.psi)
    assert_allclose(model.phi.T @ model.phi, np.eye(2), atol=1e-12)
    assert_allclose(model.C, toy.C)


def test_fit_gasopinf_is_stable_and_improves_on_start(toy, toy_data):
    model, history = fit_gasopinf(toy_data, 2, reg=1e-8, fom=toy, max_iter=20)
    assert model.is_stable
    assert spectral_abscissa(latent_tensors(model)[0]) < 0
    assert history["loss"].iloc[-1] <= history["loss"].iloc[0]
