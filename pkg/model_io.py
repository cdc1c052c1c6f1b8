import os
import logging
from typing import Dict

import h5py
import numpy as np
import pandas as pd

from errors import DataError
from numerics import matricize
from rom import RawLatentTensors, RomModel
from stability import StableLatentParams

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def save_model(model: RomModel, model_path: str, csv_twins: bool = True) -> None:
    """
    Serialize a ROM to a self-describing HDF5 file.

    Layout: ``meta`` attributes (format version, method, dynamics kind,
    dimensions, info strings), ``phi``, ``psi``, optional ``C`` and one
    dataset per dynamics parameter under ``dynamics/``. With ``csv_twins`` a
    ``<name>_csv/`` directory next to the file holds every array as CSV
    (third-order tensors matricized) for inspection.

    Args:
        model: Trained model
        model_path: Target file, '.h5' is appended if missing
        csv_twins: Also write CSV copies of every array
    """
    if not model_path.endswith(".h5"):
        model_path += ".h5"
    os.makedirs(os.path.dirname(os.path.abspath(model_path)), exist_ok=True)

    arrays = _arrays(model)
    with h5py.File(model_path, "w") as f:
        meta = f.create_dataset("meta", shape=(0,), track_times=False)
        meta.attrs["format_version"] = FORMAT_VERSION
        meta.attrs["method"] = model.method
        meta.attrs["dynamics"] = "stable" if model.is_stable else "raw"
        meta.attrs["n"] = model.n
        meta.attrs["r"] = model.r
        meta.attrs["m"] = model.m
        meta.attrs["p"] = model.p
        for key, value in sorted(model.info.items()):
            meta.attrs[f"info.{key}"] = str(value)
        for name, arr in arrays.items():
            f.create_dataset(name, data=arr, track_times=False)

    if csv_twins:
        twin_dir = model_path[:-3] + "_csv"
        os.makedirs(twin_dir, exist_ok=True)
        for name, arr in arrays.items():
            flat = matricize(arr) if arr.ndim == 3 else np.atleast_2d(arr)
            pd.DataFrame(flat).to_csv(os.path.join(twin_dir, name.replace("/", "_") + ".csv"),
                                      index=False, header=False, float_format="%.17g")

    logger.info(f"Model saved to: {model_path}")


def _arrays(model: RomModel) -> Dict[str, np.ndarray]:
    arrays = {"phi": model.phi, "psi": model.psi}
    if model.C is not None:
        arrays["C"] = model.C
    for key, value in model.dynamics.as_dict().items():
        arrays[f"dynamics/{key}"] = value
    return arrays


def load_model(model_path: str) -> RomModel:
    """
    Load a model written by ``save_model``.

    Raises:
        FileNotFoundError: If the file does not exist
        DataError: If the file is not a valid model container
    """
    if not os.path.exists(model_path):
        raise FileNotFoundError(f"Model file not found: {model_path}")

    logger.info(f"Loading model from: {model_path}")
    with h5py.File(model_path, "r") as f:
        if "meta" not in f or "phi" not in f or "psi" not in f or "dynamics" not in f:
            raise DataError(f"{model_path}: invalid model container (missing meta/phi/psi/dynamics)")
        attrs = f["meta"].attrs
        version = int(attrs.get("format_version", -1))
        if version != FORMAT_VERSION:
            raise DataError(f"{model_path}: unsupported format version {version}")
        kind = str(attrs["dynamics"])
        dyn = {key: f[f"dynamics/{key}"][()] for key in f["dynamics"].keys()}
        phi, psi = f["phi"][()], f["psi"][()]
        C = f["C"][()] if "C" in f else None
        info = {k[len("info."):]: str(v) for k, v in attrs.items() if k.startswith("info.")}
        method = str(attrs["method"])

    try:
        dynamics = StableLatentParams.from_dict(dyn) if kind == "stable" else RawLatentTensors.from_dict(dyn)
        model = RomModel(phi=phi, psi=psi, dynamics=dynamics, C=C, method=method, info=info)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{model_path}: inconsistent model container ({exc})") from exc
    logger.info(f"Model loaded successfully: method={model.method}, n={model.n}, r={model.r}")
    return model
