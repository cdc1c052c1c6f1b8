"""
Quadratic full-order models, their simulation, and the training/test protocols.

    dx/dt = A x + H : x x^T + B u,   y = C x

H is stored dense as an (n, n, n) array with symmetric slices
H[i, p, q] == H[i, q, p].
"""
import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
from scipy.optimize import root

from data_prep import SnapshotDataset, trajectory_weights
from errors import ConfigError, NumericalError
from numerics import LinearFactor, make_grid, matricize, rk4_integrate, row_kron
from signals import Impulse, InputSignal, Step, forcing_sinusoid

logger = logging.getLogger(__name__)

TOY_NU = 20.0
TOY_TRAIN_STEPS = (0.01, 0.1, 0.2, 0.248)
IMPULSE_AMPLITUDES = (-1.0, -0.25, -0.05, 0.01, 0.05, 0.25, 1.0)


@dataclass
class QuadraticFOM:
    A: np.ndarray
    H: np.ndarray
    B: np.ndarray
    C: Optional[np.ndarray] = None
    description: str = "custom"

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.H.shape != (n, n, n) or self.B.shape[0] != n:
            raise ValueError(f"inconsistent FOM shapes A{self.A.shape} H{self.H.shape} B{self.B.shape}")
        if self.C is not None and self.C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got {self.C.shape}")
        self.H = 0.5 * (self.H + self.H.transpose(0, 2, 1))
        self._Hmat_t = np.ascontiguousarray(matricize(self.H).T)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.n if self.C is None else self.C.shape[0]

    def describe(self) -> str:
        return self.description

    def rhs(self, X: np.ndarray, U: Optional[np.ndarray]) -> np.ndarray:
        """Batched f(X, U) for X (T, n), U (T, m)."""
        out = X @ self.A.T + row_kron(X) @ self._Hmat_t
        if U is not None:
            out = out + U @ self.B.T
        return out

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.A + 2.0 * (self.H @ x)

    def output(self, X: np.ndarray) -> np.ndarray:
        return X if self.C is None else X @ self.C.T

    def project(self, phi: np.ndarray, psi: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Petrov-Galerkin projection: x = D z with D = Phi (Psi^T Phi)^{-1}, dz/dt = Psi^T f(D z, u).

        Returns:
            (A_r, H_r, B_r)
        """
        D = LinearFactor(psi.T @ phi, name="Psi^T Phi").solve_transposed(phi.T).T
        A_r = psi.T @ self.A @ D
        T1 = np.tensordot(psi.T, self.H, axes=(1, 0)) @ D
        H_r = np.einsum("ibk,bj->ijk", T1, D)
        return A_r, np.ascontiguousarray(H_r), psi.T @ self.B


def toy_fom(nu: float = TOY_NU) -> QuadraticFOM:
    """
    Three-state model with a slow nonlinear direction:

        dx1/dt = -x1 + nu x1 x3 + u
        dx2/dt = -2 x2 + nu x2 x3 + u
        dx3/dt = -5 x3 + u
        y = x1 + x2 + x3
    """
    A = np.diag([-1.0, -2.0, -5.0])
    H = np.zeros((3, 3, 3))
    H[0, 0, 2] = H[0, 2, 0] = 0.5 * nu
    H[1, 1, 2] = H[1, 2, 1] = 0.5 * nu
    return QuadraticFOM(A=A, H=H, B=np.ones((3, 1)), C=np.ones((1, 3)),
                        description=f"toy:nu={nu!r}")


def toy_steady_state(gamma: float, nu: float = TOY_NU) -> np.ndarray:
    """Closed-form equilibrium of the toy model under a constant input gamma."""
    x3 = gamma / 5.0
    return np.array([gamma / (1.0 - nu * x3), gamma / (2.0 - nu * x3), x3])


def transient_growth_peak(A: np.ndarray, times: np.ndarray) -> float:
    """max_t ||exp(A t)||_2 over a uniform grid starting at 0."""
    dt = times[1] - times[0]
    step = sla.expm(A * dt)
    E = np.eye(A.shape[0])
    peak = 1.0
    for _ in range(times.size - 1):
        E = step @ E
        peak = max(peak, np.linalg.norm(E, 2))
    return float(peak)


def synthetic_nonnormal_fom(
    n: int = 200,
    seed: int = 0,
    min_peak: float = 10.0,
    coupling: float = 0.5,
) -> QuadraticFOM:
    """
    Globally stable quadratic FOM with strong transient growth.

    A is a rotated upper-triangular Hurwitz matrix whose off-diagonal part is
    scaled until max_t ||exp(A t)|| >= min_peak. H is energy preserving with
    respect to the Lyapunov matrix P of A (A^T P + P A = -I), so the unforced
    system is globally stable. The output is the full state.
    """
    rng = np.random.default_rng(seed)
    decay = np.linspace(0.1, 1.0, n)
    upper = np.triu(rng.standard_normal((n, n)), k=1) / np.sqrt(n)
    rotation, _ = np.linalg.qr(rng.standard_normal((n, n)))
    times = np.linspace(0.0, 30.0, 301)

    scale, A, peak = 0.25, None, 0.0
    for _ in range(40):
        A = rotation @ (np.diag(-decay) + scale * upper) @ rotation.T
        peak = transient_growth_peak(A, times)
        if peak >= min_peak:
            break
        scale *= 1.5
    else:
        raise NumericalError(f"could not reach transient peak {min_peak} (got {peak:.3g})")

    P = sla.solve_continuous_lyapunov(A.T, -np.eye(n))
    P = 0.5 * (P + P.T)
    S = rng.standard_normal((n, n, n))
    Sj = S.transpose(1, 0, 2)
    H = ((Sj - Sj.transpose(0, 2, 1)) @ P).transpose(1, 0, 2)
    H *= coupling * np.linalg.norm(A) / np.linalg.norm(H)

    B = rng.standard_normal((n, 1))
    B /= np.linalg.norm(B)
    logger.info(f"Synthetic FOM: n={n}, off-diagonal scale {scale:.3g}, transient peak {peak:.3g}")
    return QuadraticFOM(A=A, H=H, B=B, C=None,
                        description=f"synthetic:n={n},seed={seed},peak={min_peak!r},coupling={coupling!r}")


_DESCRIPTION = re.compile(r"^(toy|synthetic)(?::(.*))?$")


def fom_from_description(text: str) -> QuadraticFOM:
    """
    Rebuild a FOM from ``describe()`` text, e.g. ``toy:nu=20.0`` or ``synthetic:n=200,seed=0``.

    Raises:
        ConfigError: For unknown or malformed descriptions.
    """
    match = _DESCRIPTION.match(text.strip())
    if match is None:
        raise ConfigError("fom", f"unknown full-order model '{text}'")
    kind, args = match.groups()
    kwargs = {}
    for item in filter(None, (args or "").split(",")):
        key, _, value = item.partition("=")
        try:
            kwargs[key.strip()] = float(value)
        except ValueError:
            raise ConfigError("fom", f"bad parameter '{item}' in '{text}'") from None
    try:
        if kind == "toy":
            return toy_fom(nu=kwargs.get("nu", TOY_NU))
        return synthetic_nonnormal_fom(
            n=int(kwargs.get("n", 200)),
            seed=int(kwargs.get("seed", 0)),
            min_peak=kwargs.get("peak", 10.0),
            coupling=kwargs.get("coupling", 0.5),
        )
    except TypeError as exc:
        raise ConfigError("fom", str(exc)) from exc


def simulate_fom(
    fom: QuadraticFOM,
    x0: np.ndarray,
    signals: Sequence[InputSignal],
    times: np.ndarray,
    step_factor: int = 10,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Simulate a batch of trajectories of the FOM.

    Args:
        fom: Full-order model
        x0: (T, n) initial states
        signals: One input signal per trajectory
        times: (N,) sample times
        step_factor: RK4 steps per sample interval

    Returns:
        (states (T, N, n), inputs (T, N, m), outputs (T, N, p), derivatives (T, N, n))

    Raises:
        BlowUpError: If a trajectory becomes non-finite.
    """
    x0 = np.atleast_2d(x0)
    grid, idx = make_grid(times, step_factor)

    def input_fn(t):
        return np.stack([s(t) for s in signals])

    states, _ = rk4_integrate(fom.rhs, x0, grid, input_fn)
    X = np.ascontiguousarray(states[idx].transpose(1, 0, 2))
    U = np.stack([s.sample(times) for s in signals])
    T, N = X.shape[:2]
    Xdot = fom.rhs(X.reshape(T * N, -1), U.reshape(T * N, -1)).reshape(X.shape)
    Y = fom.output(X.reshape(T * N, -1)).reshape(T, N, -1)
    return X, U, Y, Xdot


def steady_state(fom: QuadraticFOM, u: np.ndarray, guess: np.ndarray) -> np.ndarray:
    """
    Equilibrium of the FOM under a constant input, found by Newton iteration from ``guess``.

    Falls back to ``guess`` when the root finder does not converge.
    """
    u = np.atleast_1d(u)[None, :]
    sol = root(lambda x: fom.rhs(x[None, :], u)[0], guess, jac=fom.jacobian, method="hybr")
    if not sol.success:
        logger.warning(f"Steady-state solve did not converge ({sol.message}); using final state")
        return np.array(guess, copy=True)
    return sol.x


def initial_state(fom: QuadraticFOM, signal: InputSignal) -> np.ndarray:
    if isinstance(signal, Impulse):
        return signal.amplitude * fom.B[:, signal.channel]
    return np.zeros(fom.n)


def make_dataset(
    fom: QuadraticFOM,
    signals: List[InputSignal],
    times: np.ndarray,
    weight_convention: str,
    step_factor: int = 10,
) -> SnapshotDataset:
    """Simulate the FOM for every signal and package the result with its weights."""
    x0 = np.stack([initial_state(fom, s) for s in signals])
    X, U, Y, Xdot = simulate_fom(fom, x0, signals, times, step_factor)

    steady = None
    if weight_convention == "steady_state":
        if not all(isinstance(s, Step) for s in signals):
            raise ConfigError("weights", "steady_state weights require step inputs")
        x_ss = np.stack([steady_state(fom, s(times[-1]), X[j, -1]) for j, s in enumerate(signals)])
        steady = fom.output(x_ss)

    weights = trajectory_weights(Y, weight_convention, steady)
    return SnapshotDataset(times=np.asarray(times, dtype=float), states=X, inputs=U, outputs=Y,
                           weights=weights, signals=list(signals), derivatives=Xdot,
                           weight_convention=weight_convention)


def uniform_times(t_end: float, samples: int, t_start: float = 0.0) -> np.ndarray:
    return np.linspace(t_start, t_end, samples)


def make_training_set(
    fom: QuadraticFOM,
    protocol: str,
    amplitudes: Optional[Sequence[float]] = None,
    t_end: float = 10.0,
    samples: int = 100,
    step_factor: int = 10,
) -> SnapshotDataset:
    """
    Training data for a named protocol.

    Args:
        fom: Full-order model
        protocol: "step" (steady-state weights), "impulse" or "sinusoid"
            (time-averaged energy weights)
        amplitudes: Step heights, impulse strengths or sinusoid amplitudes;
            protocol defaults when None
        t_end: Final sample time
        samples: Number of equally spaced samples on [0, t_end]

    Returns:
        SnapshotDataset
    """
    signals, convention = protocol_signals(fom, protocol, amplitudes)
    logger.info(f"Generating '{protocol}' data: {len(signals)} trajectories, {samples} samples on [0, {t_end}]")
    return make_dataset(fom, signals, uniform_times(t_end, samples), convention, step_factor)


def protocol_signals(
    fom: QuadraticFOM,
    protocol: str,
    amplitudes: Optional[Sequence[float]] = None,
) -> Tuple[List[InputSignal], str]:
    if protocol == "step":
        amps = TOY_TRAIN_STEPS if amplitudes is None else amplitudes
        return [Step(float(a), m=fom.m) for a in amps], "steady_state"
    if protocol == "impulse":
        amps = IMPULSE_AMPLITUDES if amplitudes is None else amplitudes
        return [Impulse(float(a), m=fom.m) for a in amps], "energy"
    if protocol == "sinusoid":
        amps = (0.45, 0.65) if amplitudes is None else amplitudes
        return [forcing_sinusoid(float(a), m=fom.m) for a in amps], "energy"
    raise ConfigError("protocol", f"unknown protocol '{protocol}'")


def random_amplitudes(count: int, low: float, high: float, seed: int = 0) -> List[float]:
    """``count`` amplitudes drawn uniformly from the open interval (low, high)."""
    rng = np.random.default_rng(seed)
    draws = rng.uniform(low, high, size=count)
    return [float(np.clip(a, np.nextafter(low, high), np.nextafter(high, low))) for a in draws]
