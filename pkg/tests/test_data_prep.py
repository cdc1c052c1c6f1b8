import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from data_prep import (
    SnapshotDataset,
    energy_table,
    error_normalizers,
    infer_output_matrix,
    preproject,
    read_dataset,
    trajectory_weights,
    write_dataset,
)
from errors import DataError, DatasetSchemaError
from signals import Step


def test_round_trip_is_bit_exact(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path), binary=True)
    for prefer_binary in (False, True):
        loaded = read_dataset(str(tmp_path), prefer_binary=prefer_binary)
        assert np.array_equal(loaded.times, toy_data.times)
        assert np.array_equal(loaded.states, toy_data.states)
        assert np.array_equal(loaded.inputs, toy_data.inputs)
        assert np.array_equal(loaded.outputs, toy_data.outputs)
        assert np.array_equal(loaded.weights, toy_data.weights)
        assert loaded.weight_convention == "steady_state"
        assert [s.describe() for s in loaded.signals] == [s.describe() for s in toy_data.signals]


def test_layout_on_disk(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path))
    names = sorted(os.listdir(tmp_path))
    assert names == ["meta.txt"] + [f"traj_{k}.csv" for k in range(4)]
    header = pd.read_csv(tmp_path / "traj_0.csv").columns.tolist()
    assert header == ["t", "x_1", "x_2", "x_3", "u_1", "y_1"]


def test_mismatched_grid_names_both_trajectories(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path))
    path = tmp_path / "traj_1.csv"
    df = pd.read_csv(path, float_precision="round_trip")
    df.loc[3, "t"] += 1e-3
    df.to_csv(path, index=False, float_format="%.17g")
    with pytest.raises(DataError, match="trajectory 1 .*trajectory 0"):
        read_dataset(str(tmp_path))


def test_missing_column_is_a_schema_error(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path))
    path = tmp_path / "traj_2.csv"
    pd.read_csv(path).drop(columns=["u_1"]).to_csv(path, index=False)
    with pytest.raises(DatasetSchemaError) as info:
        read_dataset(str(tmp_path))
    assert info.value.field == "u_1"
    assert info.value.path.endswith("traj_2.csv")


def test_non_numeric_value_reports_line(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path))
    path = tmp_path / "traj_0.csv"
    lines = path.read_text().splitlines()
    cells = lines[4].split(",")
    cells[2] = "oops"
    lines[4] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetSchemaError) as info:
        read_dataset(str(tmp_path))
    assert info.value.field == "x_2"
    assert info.value.line == 5


def test_bad_meta_entries(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path))
    meta = tmp_path / "meta.txt"
    text = meta.read_text()
    meta.write_text(text.replace("samples = 11", "samples = eleven"))
    with pytest.raises(DatasetSchemaError) as info:
        read_dataset(str(tmp_path))
    assert info.value.field == "samples"
    assert info.value.line is not None

    meta.write_text(text.replace("trajectories = 4", "trajectories = 0"))
    with pytest.raises(DatasetSchemaError, match="no trajectories"):
        read_dataset(str(tmp_path))


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(str(tmp_path / "nowhere"))


def test_dataset_validation():
    times = np.linspace(0.0, 1.0, 3)
    with pytest.raises(DataError, match="no trajectories"):
        SnapshotDataset(times=times, states=np.zeros((0, 3, 2)), inputs=np.zeros((0, 3, 1)),
                        outputs=np.zeros((0, 3, 2)), weights=np.ones(0))
    with pytest.raises(DataError):
        SnapshotDataset(times=times[::-1], states=np.zeros((1, 3, 2)), inputs=np.zeros((1, 3, 1)),
                        outputs=np.zeros((1, 3, 2)), weights=np.ones(1))
    with pytest.raises(DataError):
        SnapshotDataset(times=times, states=np.zeros((1, 3, 2)), inputs=np.zeros((1, 3, 1)),
                        outputs=np.zeros((1, 3, 2)), weights=np.zeros(1))


def test_weights():
    Y = np.ones((2, 4, 1))
    Y[1] = 0.0
    assert_allclose(trajectory_weights(Y, "energy"), [8.0, 1.0])
    assert_allclose(trajectory_weights(Y, "unit"), [1.0, 1.0])
    assert_allclose(trajectory_weights(Y, "steady_state", np.array([[2.0], [0.5]])), [32.0, 2.0])
    with pytest.raises(ValueError):
        trajectory_weights(Y, "steady_state")


def test_error_normalizers(toy_data):
    norms = error_normalizers(toy_data)
    assert_allclose(norms, toy_data.weights / (4 * 11))


def test_truncated_and_subset(toy_data):
    short = toy_data.truncated(1.0)
    assert short.n_samples == 6 and short.times[-1] == pytest.approx(1.0)
    assert toy_data.truncated(10.0) is toy_data
    with pytest.raises(DataError):
        toy_data.truncated(-1.0)

    sub = toy_data.subset([2, 0])
    assert sub.n_traj == 2
    assert np.array_equal(sub.states[0], toy_data.states[2])
    assert sub.signals[1].describe() == toy_data.signals[0].describe()


def test_input_function_interpolates_without_signals(toy_data):
    sampled = replace(toy_data, signals=None).input_function([1, 3])
    analytic = toy_data.input_function([1, 3])
    for t in (0.0, 0.5, 2.0):
        assert_allclose(sampled(t), analytic(t))


def test_preproject(toy_data):
    same, basis = preproject(toy_data, n_modes=5)
    assert same is toy_data and basis is None

    projected, basis = preproject(toy_data, n_modes=2)
    assert basis.shape == (3, 2)
    assert projected.n == 2
    assert np.array_equal(projected.outputs, toy_data.outputs)


def test_infer_output_matrix(toy, toy_data):
    assert_allclose(infer_output_matrix(toy_data), toy.C, atol=1e-10)
    full = SnapshotDataset(times=toy_data.times, states=toy_data.states, inputs=toy_data.inputs,
                           outputs=toy_data.states.copy(), weights=toy_data.weights)
    assert infer_output_matrix(full) is None


def test_energy_table(toy_data):
    table = energy_table(toy_data)
    assert list(table.columns) == ["t"] + [f"energy_{j}" for j in range(4)]
    assert table["energy_0"].iloc[0] == 0.0
    assert isinstance(toy_data.signals[0], Step)


@pytest.mark.parametrize("field", ["states", "inputs", "outputs"])
def test_non_finite_entries_are_rejected(toy_data, field):
    values = getattr(toy_data, field).copy()
    values[1, 4, 0] = np.inf
    with pytest.raises(DataError, match=f"{field} contain non-finite"):
        replace(toy_data, **{field: values})


def test_non_uniform_grid_is_rejected():
    times = np.array([0.0, 0.1, 0.5, 2.0])
    with pytest.raises(DataError, match="uniform"):
        SnapshotDataset(times=times, states=np.zeros((1, 4, 2)), inputs=np.zeros((1, 4, 1)),
                        outputs=np.zeros((1, 4, 2)), weights=np.ones(1))


def test_ingest_rejects_non_uniform_grid(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path))
    meta = tmp_path / "meta.txt"
    lines = meta.read_text().splitlines()
    row = next(i for i, line in enumerate(lines) if line.startswith("times ="))
    stretched = toy_data.times ** 2
    lines[row] = "times = " + " ".join(repr(float(t)) for t in stretched)
    meta.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetSchemaError) as info:
        read_dataset(str(tmp_path))
    assert info.value.field == "times"
    assert info.value.line == row + 1


def test_ingest_rejects_non_finite_csv_value(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path))
    path = tmp_path / "traj_3.csv"
    df = pd.read_csv(path, float_precision="round_trip")
    df.loc[6, "x_1"] = np.inf
    df.to_csv(path, index=False, float_format="%.17g")
    with pytest.raises(DatasetSchemaError) as info:
        read_dataset(str(tmp_path))
    assert info.value.field == "x_1"
    assert info.value.line == 8


def test_ingest_rejects_non_finite_binary_value(tmp_path, toy_data):
    write_dataset(toy_data, str(tmp_path), binary=True)
    path = tmp_path / "traj_0.bin"
    block = np.fromfile(path, dtype="<f8").reshape(toy_data.n_samples, -1)
    block[2, -1] = np.nan
    block.tofile(path)
    with pytest.raises(DatasetSchemaError) as info:
        read_dataset(str(tmp_path), prefer_binary=True)
    assert info.value.field == "y_1"
