import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from conftest import random_stable_params
from errors import ConfigError, DataError
from evaluation import compare, evaluate_model, lyapunov_trace, make_test_set, time_average
from fom import uniform_times
from rom import RawLatentTensors, RomModel, pod_galerkin


@pytest.fixture
def truth(small_fom):
    return make_test_set(small_fom, "step", count=3, t_end=2.0, samples=11, seed=4, step_factor=4)


def _unstable(small_fom):
    H = np.zeros((2, 2, 2))
    H[0, 0, 0] = 1.0
    dynamics = RawLatentTensors(A=np.eye(2), H=H, B=np.ones((2, 1)))
    return RomModel(phi=np.eye(2), psi=np.eye(2), dynamics=dynamics, C=small_fom.C.copy(),
                    method="opinf")


def test_make_test_set_draws_reproducible_amplitudes(small_fom, truth):
    again = make_test_set(small_fom, "step", count=3, t_end=2.0, samples=11, seed=4, step_factor=4)
    assert truth.n_traj == 3
    assert np.array_equal(truth.outputs, again.outputs)
    assert all(0.0 < s.amplitude < 0.25 for s in truth.signals)


def test_make_test_set_explicit_sine(small_fom):
    data = make_test_set(small_fom, "sine", amplitudes=[0.3], frequency=2.0, t_end=1.0, samples=5)
    assert data.inputs[0, 2, 0] == pytest.approx(0.3 * np.sin(2.0 * 0.5))
    assert data.weight_convention == "energy"


@pytest.mark.parametrize("kwargs", [
    {"protocol": "chirp"},
    {"protocol": "step", "amplitudes": []},
    {"protocol": "sinusoid"},
])
def test_make_test_set_rejects(small_fom, kwargs):
    with pytest.raises(ConfigError):
        make_test_set(small_fom, **kwargs)


def test_exact_model_has_zero_error(small_fom, truth):
    curve, blowup = evaluate_model(pod_galerkin(small_fom, np.eye(2)), truth, step_factor=4)
    assert list(curve.columns) == ["t", "e", "e_0", "e_1", "e_2", "y_hat_norm", "blowup"]
    assert_allclose(curve["e"], 0.0, atol=1e-20)
    assert np.all(np.isinf(blowup))
    assert np.all(curve["blowup"] == 0)


def test_blowup_is_masked_not_fatal(small_fom):
    truth = make_test_set(small_fom, "step", amplitudes=[0.2], t_end=100.0, samples=11, step_factor=100)
    curve, blowup = evaluate_model(_unstable(small_fom), truth, step_factor=100)
    assert np.isfinite(blowup[0])
    assert curve["blowup"].iloc[-1] == 1
    assert np.isinf(curve["y_hat_norm"].iloc[-1])
    assert time_average(curve) == float("inf")


def test_output_dimension_mismatch(truth, rng):
    model = RomModel(phi=np.eye(2), psi=np.eye(2), dynamics=random_stable_params(rng, 2))
    with pytest.raises(DataError):
        evaluate_model(model, truth)


def test_time_average():
    curve = pd.DataFrame({"t": [0.0, 1.0, 2.0], "e": [0.0, 2.0, 2.0]})
    assert time_average(curve) == pytest.approx(1.5)
    assert time_average(curve, t_max=1.0) == pytest.approx(1.0)


def test_compare_summary(small_fom, truth):
    exact, _ = evaluate_model(pod_galerkin(small_fom, np.eye(2)), truth, step_factor=4)
    wrong = exact.copy()
    wrong["e"] = 1.0
    combined, summary = compare({"exact": exact, "wrong": wrong})
    assert list(combined.columns) == ["t", "exact", "wrong"]
    assert list(summary.columns) == ["method", "mean_error", "blowup", "blowup_time",
                                     "max_output_norm", "bounded"]
    row = summary.set_index("method").loc["wrong"]
    assert row["mean_error"] == pytest.approx(1.0)
    assert bool(row["bounded"]) and not bool(row["blowup"])
    assert np.isnan(row["blowup_time"])


def test_compare_rejects_mismatched_grids(truth, small_fom):
    curve, _ = evaluate_model(pod_galerkin(small_fom, np.eye(2)), truth, step_factor=4)
    shifted = curve.copy()
    shifted["t"] = shifted["t"] + 0.5
    with pytest.raises(DataError, match="'b' differs from the grid of 'a'"):
        compare({"a": curve, "b": shifted})
    with pytest.raises(DataError):
        compare({})


def test_lyapunov_trace_is_non_increasing(rng):
    model = RomModel(phi=np.eye(3), psi=np.eye(3), dynamics=random_stable_params(rng, 3),
                     method="gasnitrom")
    V = lyapunov_trace(model, rng.standard_normal((4, 3)), uniform_times(5.0, 51), step_factor=10)
    assert V.shape == (501, 4)
    assert np.all(np.diff(V, axis=0) <= 1e-12 * V[:-1])


def test_lyapunov_trace_needs_stable_dynamics(small_fom):
    with pytest.raises(ValueError):
        lyapunov_trace(pod_galerkin(small_fom, np.eye(2)), np.zeros((1, 2)), uniform_times(1.0, 3))
