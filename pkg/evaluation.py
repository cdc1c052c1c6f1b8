"""
Test-time evaluation: error curves against ground truth, blow-up detection and
multi-model comparison tables.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from data_prep import SnapshotDataset, error_normalizers
from errors import ConfigError, DataError
from fom import QuadraticFOM, make_dataset, protocol_signals, random_amplitudes, uniform_times
from rom import RomModel, latent_tensors, output_decoder, simulate_batch
from signals import InputSignal, Sinusoid
from stability import StableLatentParams, lyapunov_weight

logger = logging.getLogger(__name__)

OUTPUT_BOUND = 1e3
TEST_PROTOCOLS = ("step", "impulse", "sinusoid", "sine")


def evaluation_signals(
    fom: QuadraticFOM,
    protocol: str,
    amplitudes: Sequence[float],
    frequency: float = 1.0,
) -> Tuple[List[InputSignal], str]:
    """
    Signals and weight convention of a test protocol.

    "step", "impulse" and "sinusoid" (a (sin t + cos 2t)) follow the training
    protocols; "sine" is a sin(frequency t).
    """
    if protocol == "sine":
        return [Sinusoid(terms=[(float(a), frequency, 0.0, "sin")], m=fom.m) for a in amplitudes], "energy"
    return protocol_signals(fom, protocol, amplitudes)


def make_test_set(
    fom: QuadraticFOM,
    protocol: str,
    amplitudes: Optional[Sequence[float]] = None,
    count: int = 100,
    low: Optional[float] = None,
    high: Optional[float] = None,
    t_end: float = 30.0,
    samples: int = 300,
    frequency: float = 1.0,
    seed: int = 0,
    step_factor: int = 10,
) -> SnapshotDataset:
    """
    Ground-truth trajectories for a test protocol.

    Explicit ``amplitudes`` win; otherwise ``count`` amplitudes are drawn
    uniformly from (low, high), defaulting to (0, 1/4) for steps and [-1, 1]
    for impulses.

    Raises:
        ConfigError: For unknown protocols or an empty amplitude list.
    """
    if protocol not in TEST_PROTOCOLS:
        raise ConfigError("test.protocol", f"unknown protocol '{protocol}' (expected one of {TEST_PROTOCOLS})")
    if amplitudes is None:
        default_range = {"step": (0.0, 0.25), "impulse": (-1.0, 1.0)}.get(protocol)
        if default_range is None and (low is None or high is None):
            raise ConfigError("test.amplitudes", f"protocol '{protocol}' needs amplitudes or a range")
        lo = default_range[0] if low is None else low
        hi = default_range[1] if high is None else high
        amplitudes = random_amplitudes(count, lo, hi, seed)
    if len(amplitudes) == 0:
        raise ConfigError("test.amplitudes", "amplitude list is empty")

    signals, convention = evaluation_signals(fom, protocol, amplitudes, frequency)
    logger.info(f"Generating '{protocol}' test set: {len(signals)} trajectories on [0, {t_end}]")
    return make_dataset(fom, signals, uniform_times(t_end, samples), convention, step_factor)


def evaluate_model(
    model: RomModel,
    truth: SnapshotDataset,
    step_factor: int = 10,
    label: Optional[str] = None,
) -> Tuple[pd.DataFrame, np.ndarray]:
    """
    Error curve of a model against ground-truth trajectories.

    e(t) = (1 / T) sum_j ||y_j(t) - y_hat_j(t)||^2 / nu_j, with nu_j the
    per-trajectory normalizer of the dataset's weight convention. Trajectories
    that blow up are masked with NaN from the blow-up time on; the run itself
    never fails on a blow-up.

    Args:
        model: ROM to evaluate
        truth: Ground-truth dataset (initial states, inputs, outputs)
        step_factor: RK4 steps per sample interval
        label: Optional name logged with the summary

    Returns:
        (curve, blowup_times): curve has columns t, e, e_0..e_{T-1},
        y_hat_norm (largest ||y_hat|| over trajectories) and blowup (number
        of trajectories blown up by that time); blowup_times is (T,) with inf
        for trajectories that stayed finite.
    """
    if model.p != truth.p:
        raise DataError(f"model predicts {model.p} outputs, ground truth has {truth.p}")
    CD = output_decoder(model)
    states, _, idx, blowup = simulate_batch(
        model, truth.initial_states, truth.input_function(), truth.times, step_factor,
        on_blowup="mask", tensors=latent_tensors(model),
    )
    Y_hat = states[idx] @ CD.T                       # (N, T, p)
    E = truth.outputs.transpose(1, 0, 2) - Y_hat
    nu = error_normalizers(truth)
    per_traj = np.sum(E * E, axis=2) / nu[None, :]   # (N, T)

    norms = np.linalg.norm(Y_hat, axis=2)
    curve = pd.DataFrame({"t": truth.times, "e": per_traj.mean(axis=1)})
    for j in range(truth.n_traj):
        curve[f"e_{j}"] = per_traj[:, j]
    curve["y_hat_norm"] = np.nan_to_num(norms, nan=np.inf).max(axis=1)
    curve["blowup"] = (blowup[None, :] <= truth.times[:, None]).sum(axis=1)

    name = label or model.method
    blown = int(np.sum(np.isfinite(blowup)))
    if blown:
        logger.warning(f"{name}: {blown}/{truth.n_traj} trajectories blew up "
                       f"(first at t={float(np.min(blowup)):.4g})")
    logger.info(f"{name}: time-averaged error {time_average(curve):.6e}")
    return curve, blowup


def time_average(curve: pd.DataFrame, t_max: Optional[float] = None) -> float:
    """Trapezoidal mean of e(t) over [t0, t_max]; inf when the curve is not finite there."""
    data = curve if t_max is None else curve[curve["t"] <= t_max + 1e-12]
    t, e = data["t"].to_numpy(), data["e"].to_numpy()
    if not np.all(np.isfinite(e)):
        return float("inf")
    if t.size < 2:
        return float(e[0])
    return float(trapezoid(e, t) / (t[-1] - t[0]))


def compare(
    curves: Dict[str, pd.DataFrame],
    bound: float = OUTPUT_BOUND,
    t_max: Optional[float] = None,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Align error curves of several models on a shared grid.

    Args:
        curves: label -> curve from ``evaluate_model`` (or read back from CSV)
        bound: Output norm treated as unbounded growth
        t_max: Restrict the time average to t <= t_max

    Returns:
        (combined: t plus one e(t) column per label,
         summary: one row per label with mean_error, blowup, blowup_time,
         max_output_norm and bounded)

    Raises:
        DataError: If the curves do not share one time grid.
    """
    if not curves:
        raise DataError("nothing to compare")
    labels = list(curves)
    ref_label = labels[0]
    t_ref = curves[ref_label]["t"].to_numpy()
    combined = pd.DataFrame({"t": t_ref})
    rows = []
    for label in labels:
        curve = curves[label]
        t = curve["t"].to_numpy()
        if t.shape != t_ref.shape or not np.allclose(t, t_ref, rtol=1e-12, atol=1e-12):
            raise DataError(f"test grid of '{label}' differs from the grid of '{ref_label}'")
        combined[label] = curve["e"].to_numpy()

        blown = curve["blowup"].to_numpy() > 0
        peak = float(curve["y_hat_norm"].max())
        rows.append({
            "method": label,
            "mean_error": time_average(curve, t_max),
            "blowup": bool(blown.any()),
            "blowup_time": float(t[np.argmax(blown)]) if blown.any() else float("nan"),
            "max_output_norm": peak,
            "bounded": bool(np.isfinite(peak) and peak < bound),
        })
    return combined, pd.DataFrame(rows)


def lyapunov_trace(model: RomModel, x0: np.ndarray, times: np.ndarray,
                   step_factor: int = 10) -> np.ndarray:
    """
    V(z) = z^T Q~ z at every integrator step of unforced trajectories.

    Args:
        model: ROM with stable dynamics
        x0: (T, n) initial states
        times: Sample times

    Returns:
        (G+1, T) values of V
    """
    if not isinstance(model.dynamics, StableLatentParams):
        raise ValueError("Lyapunov trace needs a model with stable dynamics")
    Qt = lyapunov_weight(model.dynamics)
    states, _, _, _ = simulate_batch(model, np.atleast_2d(x0), lambda t: None, times, step_factor)
    return np.einsum("gti,ij,gtj->gt", states, Qt, states)

