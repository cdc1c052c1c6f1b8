import os
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.utils.extmath import randomized_svd, svd_flip

from errors import DataError, DatasetSchemaError
from numerics import thin_svd
from signals import InputSignal, Sampled, parse_signal

logger = logging.getLogger(__name__)

WEIGHT_CONVENTIONS = ("steady_state", "energy", "unit")
DEGENERATE_NORM = 1e-14
GRID_RTOL = 1e-9
META_FILE = "meta.txt"


def is_uniform_grid(times: np.ndarray) -> bool:
    dts = np.diff(times)
    return dts.size == 0 or bool(np.allclose(dts, dts[0], rtol=GRID_RTOL, atol=0.0))


@dataclass
class SnapshotDataset:
    """
    Sampled trajectories of a forced system on a shared time grid.

    Attributes:
        times: (N,) strictly increasing sample times
        states: (T, N, n) full states
        inputs: (T, N, m) sampled inputs
        outputs: (T, N, p) measured outputs
        weights: (T,) trajectory weights alpha_j (the loss divides by them)
        signals: Optional analytic input signals, one per trajectory
        derivatives: Optional (T, N, n) exact time derivatives of the states
        weight_convention: How the weights were computed
    """
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    weights: np.ndarray
    signals: Optional[List[InputSignal]] = None
    derivatives: Optional[np.ndarray] = None
    weight_convention: str = "unit"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.times.ndim != 1 or self.times.size < 1:
            raise DataError("times must be a non-empty 1-D array")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("times must be strictly increasing")
        if not is_uniform_grid(self.times):
            raise DataError("times must lie on a uniform grid")
        if self.states.ndim != 3 or self.states.shape[0] == 0:
            raise DataError("dataset holds no trajectories")
        T, N = self.states.shape[:2]
        if N != self.times.size:
            raise DataError(f"states hold {N} samples but the grid has {self.times.size}")
        for name in ("inputs", "outputs"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (T, N):
                raise DataError(f"{name} must have shape ({T}, {N}, k), got {arr.shape}")
        if self.derivatives is not None and self.derivatives.shape != self.states.shape:
            raise DataError("derivatives must have the same shape as states")
        for name in ("states", "inputs", "outputs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} contain non-finite values")
        if self.weights.shape != (T,):
            raise DataError(f"weights must have shape ({T},), got {self.weights.shape}")
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise DataError("weights must be positive and finite")
        if self.signals is not None and len(self.signals) != T:
            raise DataError(f"{len(self.signals)} signals given for {T} trajectories")
        if self.weight_convention not in WEIGHT_CONVENTIONS:
            raise DataError(f"unknown weight convention '{self.weight_convention}'")

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def n_samples(self) -> int:
        return self.states.shape[1]

    @property
    def n(self) -> int:
        return self.states.shape[2]

    @property
    def m(self) -> int:
        return self.inputs.shape[2]

    @property
    def p(self) -> int:
        return self.outputs.shape[2]

    @property
    def initial_states(self) -> np.ndarray:
        return self.states[:, 0, :]

    def input_function(self, indices: Optional[Sequence[int]] = None) -> Callable[[float], np.ndarray]:
        """
        Batched input t -> (len(indices), m).

        Uses the analytic signals when present and linear interpolation of the
        sampled inputs otherwise.
        """
        idx = list(range(self.n_traj)) if indices is None else list(indices)
        if self.signals is not None:
            sigs = [self.signals[j] for j in idx]
            return lambda t: np.stack([s(t) for s in sigs])
        values = self.inputs[idx]
        times = self.times

        def interp(t: float) -> np.ndarray:
            k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, times.size - 1))
            if k == times.size - 1:
                return values[:, -1, :]
            w = (t - times[k]) / (times[k + 1] - times[k])
            return (1.0 - w) * values[:, k, :] + w * values[:, k + 1, :]

        return interp

    def truncated(self, horizon: float) -> "SnapshotDataset":
        """Samples with t <= horizon."""
        keep = self.times <= horizon + 1e-12 * max(1.0, abs(horizon))
        if not np.any(keep):
            raise DataError(f"horizon {horizon} precedes the first sample time")
        if np.all(keep):
            return self
        return replace(
            self,
            times=self.times[keep],
            states=self.states[:, keep],
            inputs=self.inputs[:, keep],
            outputs=self.outputs[:, keep],
            derivatives=None if self.derivatives is None else self.derivatives[:, keep],
        )

    def subset(self, indices: Sequence[int]) -> "SnapshotDataset":
        idx = list(indices)
        return replace(
            self,
            states=self.states[idx],
            inputs=self.inputs[idx],
            outputs=self.outputs[idx],
            weights=self.weights[idx],
            signals=None if self.signals is None else [self.signals[j] for j in idx],
            derivatives=None if self.derivatives is None else self.derivatives[idx],
        )


def trajectory_weights(
    outputs: np.ndarray,
    convention: str,
    steady_outputs: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Trajectory weights alpha_j.

    Args:
        outputs: (T, N, p) outputs
        convention: "steady_state" (T * N * ||y_ss||^2), "energy"
            (T * N * time-averaged ||y||^2) or "unit"
        steady_outputs: (T, p) steady-state outputs, required for "steady_state"

    Returns:
        (T,) weights; degenerate norms (below 1e-14) fall back to 1
    """
    T, N = outputs.shape[:2]
    if convention == "unit":
        return np.ones(T)
    if convention == "steady_state":
        if steady_outputs is None:
            raise ValueError("steady_state weights need steady-state outputs")
        scale = np.sum(np.asarray(steady_outputs) ** 2, axis=1)
    elif convention == "energy":
        scale = np.mean(np.sum(outputs ** 2, axis=2), axis=1)
    else:
        raise ValueError(f"Unknown weight convention: {convention}")

    degenerate = scale < DEGENERATE_NORM
    if np.any(degenerate):
        logger.warning(f"{int(degenerate.sum())} trajectory norm(s) degenerate; using weight 1")
    return np.where(degenerate, 1.0, T * N * scale)


def error_normalizers(dataset: SnapshotDataset) -> np.ndarray:
    """Per-trajectory normalizer used by error curves (alpha_j / (T * N))."""
    if dataset.weight_convention == "unit":
        return dataset.weights.copy()
    return dataset.weights / (dataset.n_traj * dataset.n_samples)


def energy_table(dataset: SnapshotDataset) -> pd.DataFrame:
    """Squared state norm of every trajectory against time."""
    table = {"t": dataset.times}
    for j in range(dataset.n_traj):
        table[f"energy_{j}"] = np.sum(dataset.states[j] ** 2, axis=1)
    return pd.DataFrame(table)


def _columns(n: int, m: int, p: int) -> List[str]:
    return (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
            + [f"y_{i + 1}" for i in range(p)])


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_dataset(dataset: SnapshotDataset, directory: str, binary: bool = False) -> None:
    """
    Write ``meta.txt`` and one ``traj_<k>.csv`` per trajectory.

    Floats are written with 17 significant digits so that reading the files
    back reproduces every value bit for bit. With ``binary=True`` a
    ``traj_<k>.bin`` twin (little-endian float64, row-major, same column
    layout, no header) is written as well.
    """
    os.makedirs(directory, exist_ok=True)
    meta = {
        "n": str(dataset.n),
        "m": str(dataset.m),
        "p": str(dataset.p),
        "trajectories": str(dataset.n_traj),
        "samples": str(dataset.n_samples),
        "times": " ".join(_fmt(t) for t in dataset.times),
        "weight_convention": dataset.weight_convention,
        "weights": " ".join(_fmt(w) for w in dataset.weights),
    }
    if dataset.signals is not None:
        for k, sig in enumerate(dataset.signals):
            meta[f"signal_{k}"] = sig.describe()

    with open(os.path.join(directory, META_FILE), "w") as f:
        for key, value in meta.items():
            f.write(f"{key} = {value}\n")

    columns = _columns(dataset.n, dataset.m, dataset.p)
    for k in range(dataset.n_traj):
        block = np.column_stack([
            dataset.times, dataset.states[k], dataset.inputs[k], dataset.outputs[k]
        ])
        pd.DataFrame(block, columns=columns).to_csv(
            os.path.join(directory, f"traj_{k}.csv"), index=False, float_format="%.17g"
        )
        if binary:
            block.astype("<f8").tofile(os.path.join(directory, f"traj_{k}.bin"))

    logger.info(f"Dataset written to {directory}: {dataset.n_traj} trajectories, "
                f"{dataset.n_samples} samples, n={dataset.n}")


def _read_meta(path: str) -> Dict[str, Tuple[str, int]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset metadata not found at: {path}")
    meta = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DatasetSchemaError(path, line.split()[0], lineno, "expected 'key = value'")
            meta[key.strip()] = (value.strip(), lineno)
    return meta


def _meta_int(meta: Dict[str, Tuple[str, int]], key: str, path: str) -> int:
    if key not in meta:
        raise DatasetSchemaError(path, key, None, "missing")
    value, lineno = meta[key]
    try:
        return int(value)
    except ValueError:
        raise DatasetSchemaError(path, key, lineno, f"not an integer: {value!r}") from None


def _meta_floats(meta: Dict[str, Tuple[str, int]], key: str, path: str, count: int) -> np.ndarray:
    if key not in meta:
        raise DatasetSchemaError(path, key, None, "missing")
    value, lineno = meta[key]
    try:
        arr = np.array([float(v) for v in value.split()])
    except ValueError:
        raise DatasetSchemaError(path, key, lineno, "non-numeric entry") from None
    if arr.size != count:
        raise DatasetSchemaError(path, key, lineno, f"expected {count} values, found {arr.size}")
    return arr


def read_dataset(directory: str, prefer_binary: bool = False) -> SnapshotDataset:
    """
    Load a dataset directory written by ``write_dataset``.

    Raises:
        FileNotFoundError: If the directory or a trajectory file is missing
        DatasetSchemaError: Naming file, field and line of a schema violation
        DataError: If trajectory grids disagree or the grid is not uniform
    """
    meta_path = os.path.join(directory, META_FILE)
    meta = _read_meta(meta_path)
    n = _meta_int(meta, "n", meta_path)
    m = _meta_int(meta, "m", meta_path)
    p = _meta_int(meta, "p", meta_path)
    T = _meta_int(meta, "trajectories", meta_path)
    if T < 1:
        raise DatasetSchemaError(meta_path, "trajectories", meta["trajectories"][1], "no trajectories")
    N = _meta_int(meta, "samples", meta_path)
    times = _meta_floats(meta, "times", meta_path, N)
    if not is_uniform_grid(times) or np.any(np.diff(times) <= 0):
        raise DatasetSchemaError(meta_path, "times", meta["times"][1], "grid is not uniform and increasing")
    weights = _meta_floats(meta, "weights", meta_path, T)
    convention = meta.get("weight_convention", ("unit", None))[0]
    if convention not in WEIGHT_CONVENTIONS:
        raise DatasetSchemaError(meta_path, "weight_convention", meta["weight_convention"][1],
                                 f"unknown convention {convention!r}")

    columns = _columns(n, m, p)
    blocks = []
    grid_owner = None
    for k in range(T):
        bin_path = os.path.join(directory, f"traj_{k}.bin")
        csv_path = os.path.join(directory, f"traj_{k}.csv")
        if prefer_binary and os.path.exists(bin_path):
            block = np.fromfile(bin_path, dtype="<f8")
            if block.size != N * len(columns):
                raise DatasetSchemaError(bin_path, "size", None,
                                         f"expected {N * len(columns)} values, found {block.size}")
            block = block.reshape(N, len(columns)).astype(float)
            if not np.all(np.isfinite(block)):
                col = int(np.argwhere(~np.isfinite(block))[0, 1])
                raise DatasetSchemaError(bin_path, columns[col], None, "non-finite value")
        else:
            block = _read_trajectory_csv(csv_path, columns, N)

        if grid_owner is None:
            if not np.array_equal(block[:, 0], times):
                raise DataError(f"trajectory {k} time grid differs from the grid in {META_FILE}")
            grid_owner = k
        elif not np.array_equal(block[:, 0], blocks[0][:, 0]):
            raise DataError(f"trajectory {k} time grid differs from trajectory {grid_owner}")
        blocks.append(block)

    data = np.stack(blocks)
    signals = None
    if all(f"signal_{k}" in meta for k in range(T)):
        signals = [parse_signal(meta[f"signal_{k}"][0], m=m, times=times, values=data[k, :, 1 + n:1 + n + m])
                   for k in range(T)]

    dataset = SnapshotDataset(
        times=times,
        states=data[:, :, 1:1 + n],
        inputs=data[:, :, 1 + n:1 + n + m],
        outputs=data[:, :, 1 + n + m:],
        weights=weights,
        signals=signals,
        weight_convention=convention,
    )
    logger.info(f"Dataset loaded from {directory}: {T} trajectories, {N} samples, n={n}, m={m}, p={p}")
    return dataset


def _read_trajectory_csv(path: str, columns: List[str], N: int) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Trajectory file not found at: {path}")
    df = pd.read_csv(path, float_precision="round_trip")

    missing_cols = [col for col in columns if col not in df.columns]
    if missing_cols:
        raise DatasetSchemaError(path, missing_cols[0], 1, "missing column")
    extra_cols = [col for col in df.columns if col not in columns]
    if extra_cols:
        raise DatasetSchemaError(path, extra_cols[0], 1, "unexpected column")
    if len(df) != N:
        raise DatasetSchemaError(path, "rows", None, f"expected {N} rows, found {len(df)}")

    df = df[columns]
    numeric = df.apply(pd.to_numeric, errors="coerce")
    mask = numeric.isna()
    if mask.any().any():
        row = int(np.flatnonzero(mask.any(axis=1).to_numpy())[0])
        col = mask.columns[mask.iloc[row].to_numpy()][0]
        raise DatasetSchemaError(path, col, row + 2, "non-numeric or missing value")
    values = numeric.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        row, col = np.argwhere(~np.isfinite(values))[0]
        raise DatasetSchemaError(path, columns[col], int(row) + 2, "non-finite value")
    return values


def preproject(dataset: SnapshotDataset, n_modes: int = 200,
               random_state: int = 0) -> Tuple[SnapshotDataset, Optional[np.ndarray]]:
    """
    Project states onto the leading POD modes of all snapshots.

    Outputs are projected too when they equal the full state. Datasets with
    n <= n_modes are returned unchanged together with ``None``.

    Returns:
        (projected dataset, orthonormal basis V of shape (n, n_modes) or None)
    """
    if dataset.n <= n_modes:
        return dataset, None

    X = dataset.states.reshape(-1, dataset.n).T
    if X.shape[0] * X.shape[1] > 10_000_000:
        U, s, Vt = randomized_svd(X, n_components=n_modes, random_state=random_state)
    else:
        U, s, V = thin_svd(X)
        U, Vt = U[:, :n_modes], V[:, :n_modes].T
    U, _ = svd_flip(U, Vt)
    basis = np.ascontiguousarray(U[:, :n_modes])

    def proj(arr):
        return arr @ basis

    full_state_output = dataset.p == dataset.n and np.allclose(dataset.outputs, dataset.states)
    projected = replace(
        dataset,
        states=proj(dataset.states),
        outputs=proj(dataset.outputs) if full_state_output else dataset.outputs,
        derivatives=None if dataset.derivatives is None else proj(dataset.derivatives),
    )
    logger.info(f"Pre-projected states from n={dataset.n} onto {n_modes} POD modes")
    return projected, basis


def sampled_signals(dataset: SnapshotDataset) -> List[InputSignal]:
    """Signals for every trajectory, falling back to interpolation of the samples."""
    if dataset.signals is not None:
        return list(dataset.signals)
    return [Sampled(dataset.times, dataset.inputs[j]) for j in range(dataset.n_traj)]


def infer_output_matrix(dataset: SnapshotDataset) -> Optional[np.ndarray]:
    """
    Output matrix C with y = C x fitted to the samples.

    Returns None when the outputs are the full state.
    """
    X = dataset.states.reshape(-1, dataset.n)
    Y = dataset.outputs.reshape(-1, dataset.p)
    if dataset.p == dataset.n and np.allclose(X, Y):
        return None
    C, *_ = np.linalg.lstsq(X, Y, rcond=None)
    residual = np.linalg.norm(X @ C - Y) / max(np.linalg.norm(Y), DEGENERATE_NORM)
    if residual > 1e-8:
        logger.warning(f"Outputs are not linear in the states (relative residual {residual:.2e})")
    return np.ascontiguousarray(C.T)
