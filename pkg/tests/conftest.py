import numpy as np
import pytest

from fom import QuadraticFOM, make_dataset, make_training_set, toy_fom, uniform_times
from signals import Step
from stability import StableLatentParams


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy():
    return toy_fom()


@pytest.fixture
def toy_data(toy):
    """Four short step responses, coarse grid."""
    return make_training_set(toy, "step", t_end=2.0, samples=11, step_factor=4)


@pytest.fixture
def small_fom():
    """Two-state quadratic system whose Galerkin model on the identity basis is exact."""
    A = np.array([[-1.0, 0.3], [0.0, -2.0]])
    H = np.zeros((2, 2, 2))
    H[0, 0, 1] = H[0, 1, 0] = 0.2
    H[1, 0, 0] = -0.1
    return QuadraticFOM(A=A, H=H, B=np.array([[1.0], [0.5]]), C=np.array([[1.0, 1.0]]),
                        description="custom")


@pytest.fixture
def small_data(small_fom):
    signals = [Step(0.5), Step(-0.3)]
    return make_dataset(small_fom, signals, uniform_times(2.0, 11), "energy", step_factor=4)


def random_stable_params(rng, r, m=1, scale=0.3):
    """Well-conditioned random stable parameters with full-rank R."""
    return StableLatentParams(
        K=scale * rng.standard_normal((r, r)),
        R=np.eye(r) + 0.1 * rng.standard_normal((r, r)),
        Q=np.eye(r) + 0.1 * rng.standard_normal((r, r)),
        S=scale * rng.standard_normal((r, r, r)),
        B=rng.standard_normal((r, m)),
    )
