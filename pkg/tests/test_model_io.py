import h5py
import numpy as np
import pandas as pd
import pytest

from conftest import random_stable_params
from errors import DataError
from model_io import load_model, save_model
from rom import RawLatentTensors, RomModel


@pytest.fixture
def stable_model(rng):
    psi = np.linalg.qr(rng.standard_normal((4, 2)))[0]
    return RomModel(phi=rng.standard_normal((4, 2)), psi=psi, dynamics=random_stable_params(rng, 2),
                    C=rng.standard_normal((1, 4)), method="gasnitrom", info={"fom": "toy:nu=20.0"})


def test_stable_model_round_trip_is_exact(tmp_path, stable_model):
    path = str(tmp_path / "model")
    save_model(stable_model, path)
    loaded = load_model(path + ".h5")
    assert loaded.method == "gasnitrom" and loaded.is_stable
    assert loaded.info == {"fom": "toy:nu=20.0"}
    assert np.array_equal(loaded.phi, stable_model.phi)
    assert np.array_equal(loaded.psi, stable_model.psi)
    assert np.array_equal(loaded.C, stable_model.C)
    for key, value in stable_model.dynamics.as_dict().items():
        assert np.array_equal(loaded.dynamics.as_dict()[key], value)


def test_csv_twins(tmp_path, stable_model):
    save_model(stable_model, str(tmp_path / "model.h5"))
    twin = tmp_path / "model_csv"
    S = pd.read_csv(twin / "dynamics_S.csv", header=None, float_precision="round_trip").to_numpy()
    assert S.shape == (2, 4)
    assert np.array_equal(S[1, 2:], stable_model.dynamics.S[1, 1])
    assert (twin / "phi.csv").exists()


def test_raw_model_without_output_matrix(tmp_path, rng):
    dynamics = RawLatentTensors(A=-np.eye(2), H=rng.standard_normal((2, 2, 2)), B=np.ones((2, 1)))
    model = RomModel(phi=np.eye(3)[:, :2], psi=np.eye(3)[:, :2], dynamics=dynamics, method="opinf")
    save_model(model, str(tmp_path / "raw.h5"), csv_twins=False)
    loaded = load_model(str(tmp_path / "raw.h5"))
    assert loaded.C is None and not loaded.is_stable
    assert np.array_equal(loaded.dynamics.H, dynamics.H)
    assert not (tmp_path / "raw_csv").exists()


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(str(tmp_path / "absent.h5"))


def test_wrong_version(tmp_path, stable_model):
    path = str(tmp_path / "model.h5")
    save_model(stable_model, path, csv_twins=False)
    with h5py.File(path, "a") as f:
        f["meta"].attrs["format_version"] = 99
    with pytest.raises(DataError, match="version 99"):
        load_model(path)


def test_not_a_model(tmp_path):
    path = str(tmp_path / "other.h5")
    with h5py.File(path, "w") as f:
        f.create_dataset("x", data=np.zeros(3))
    with pytest.raises(DataError):
        load_model(path)


def test_inconsistent_shapes(tmp_path, stable_model):
    path = str(tmp_path / "model.h5")
    save_model(stable_model, path, csv_twins=False)
    with h5py.File(path, "a") as f:
        del f["psi"]
        f.create_dataset("psi", data=np.eye(4)[:, :3])
    with pytest.raises(DataError):
        load_model(path)
