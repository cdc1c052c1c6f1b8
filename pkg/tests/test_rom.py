import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_stable_params
from errors import BlowUpError
from fom import simulate_fom, uniform_times
from rom import (
    RawLatentTensors,
    RomModel,
    decode,
    decoder,
    encode,
    latent_rhs,
    lift,
    pod_galerkin,
    simulate,
    simulate_batch,
)
from signals import Step
from stability import identity_params


@pytest.fixture
def oblique(rng):
    phi = rng.standard_normal((5, 2))
    psi = np.linalg.qr(rng.standard_normal((5, 2)))[0]
    return RomModel(phi=phi, psi=psi, dynamics=identity_params(2, 1))


def test_decoder_is_oblique_inverse(oblique):
    D = decoder(oblique)
    assert_allclose(oblique.psi.T @ D, np.eye(2), atol=1e-12)
    assert_allclose(D, oblique.phi @ np.linalg.inv(oblique.psi.T @ oblique.phi), atol=1e-12)


def test_decode_encode_is_identity_on_trial_subspace(rng, oblique):
    X = rng.standard_normal((3, 2)) @ oblique.phi.T
    assert encode(oblique, X).shape == (3, 2)
    assert_allclose(decode(oblique, encode(oblique, X)), X, atol=1e-12)

    x = X[0]
    assert decode(oblique, encode(oblique, x)).shape == (5,)


def test_latent_rhs(rng):
    A = rng.standard_normal((3, 3))
    H = rng.standard_normal((3, 3, 3))
    B = rng.standard_normal((3, 2))
    Z = rng.standard_normal((4, 3))
    U = rng.standard_normal((4, 2))
    expected = Z @ A.T + np.einsum("ipq,tp,tq->ti", H, Z, Z) + U @ B.T
    assert_allclose(latent_rhs(A, H, B)(Z, U), expected, rtol=1e-12)
    assert_allclose(latent_rhs(A, H, B)(Z, None), expected - U @ B.T, rtol=1e-12)


def test_model_shape_checks(rng):
    with pytest.raises(ValueError):
        RomModel(phi=np.eye(3)[:, :2], psi=np.eye(3), dynamics=identity_params(2, 1))
    with pytest.raises(ValueError):
        RomModel(phi=np.eye(3)[:, :2], psi=np.eye(3)[:, :2], dynamics=identity_params(3, 1))
    with pytest.raises(ValueError):
        RomModel(phi=np.eye(3)[:, :2], psi=np.eye(3)[:, :2], dynamics=identity_params(2, 1),
                 method="unknown")


def test_galerkin_on_identity_basis_reproduces_fom(small_fom):
    model = pod_galerkin(small_fom, np.eye(2))
    times = uniform_times(2.0, 11)
    y_hat, z = simulate(model, np.zeros(2), Step(0.5), times, step_factor=4)
    X, _, Y, _ = simulate_fom(small_fom, np.zeros((1, 2)), [Step(0.5)], times, step_factor=4)
    assert_allclose(z, X[0], atol=1e-12)
    assert_allclose(y_hat, Y[0], atol=1e-12)


def test_lift_keeps_predictions(rng):
    psi = np.linalg.qr(rng.standard_normal((2, 1)))[0]
    reduced = RomModel(phi=rng.standard_normal((2, 1)), psi=psi,
                       dynamics=random_stable_params(rng, 1), C=rng.standard_normal((1, 2)))
    V = np.linalg.qr(rng.standard_normal((5, 2)))[0]
    lifted = lift(reduced, V)
    assert lifted.n == 5 and lifted.C.shape == (1, 5)

    x0 = V @ rng.standard_normal(2)
    times = uniform_times(1.0, 5)
    y_reduced, _ = simulate(reduced, V.T @ x0, Step(0.2), times, step_factor=4)
    y_lifted, _ = simulate(lifted, x0, Step(0.2), times, step_factor=4)
    assert_allclose(y_lifted, y_reduced, atol=1e-12)


def _exploding():
    H = np.zeros((1, 1, 1))
    H[0, 0, 0] = 1.0
    dynamics = RawLatentTensors(A=np.zeros((1, 1)), H=H, B=np.zeros((1, 1)))
    return RomModel(phi=np.ones((1, 1)), psi=np.ones((1, 1)), dynamics=dynamics, method="opinf")


def test_simulate_raises_on_blowup():
    with pytest.raises(BlowUpError):
        simulate(_exploding(), np.ones(1), Step(0.0), uniform_times(3.0, 31))


def test_simulate_batch_masks_blowup():
    x0 = np.array([[1.0], [0.0]])
    states, _, idx, blowup = simulate_batch(_exploding(), x0, lambda t: np.zeros((2, 1)),
                                            uniform_times(3.0, 31), on_blowup="mask", bound=1e6)
    assert 0.9 < blowup[0] < 3.0
    assert np.isinf(blowup[1])
    assert np.all(states[idx, 1, 0] == 0.0)
