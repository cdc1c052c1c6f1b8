"""
Reduced-order model: a projection pair (Phi, Psi) plus quadratic latent dynamics

    dz/dt = A z + H : z z^T + B u,   z(t0) = Psi^T x0,
    y_hat = C Phi (Psi^T Phi)^{-1} z.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from numerics import LinearFactor, contract_quadratic, make_grid, rk4_integrate
from signals import InputSignal
from stability import StableLatentParams, assemble

logger = logging.getLogger(__name__)

METHODS = ("pod-galerkin", "opinf", "gasopinf", "nitrom", "gasnitrom")


@dataclass
class RawLatentTensors:
    """Unconstrained latent operators (A, H, B)."""
    A: np.ndarray
    H: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        r = self.A.shape[0]
        if self.A.shape != (r, r) or self.H.shape != (r, r, r) or self.B.shape[0] != r:
            raise ValueError(
                f"inconsistent latent tensor shapes A{self.A.shape} H{self.H.shape} B{self.B.shape}"
            )

    @property
    def r(self) -> int:
        return self.A.shape[0]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {"A": self.A, "H": self.H, "B": self.B}

    @classmethod
    def from_dict(cls, d: Dict[str, np.ndarray]) -> "RawLatentTensors":
        return cls(A=d["A"], H=d["H"], B=d["B"])


LatentDynamics = Union[StableLatentParams, RawLatentTensors]


@dataclass
class RomModel:
    """
    A trained (or initial) reduced-order model.

    Attributes:
        phi: (n, r) decoder frame, any representative of the trial subspace
        psi: (n, r) orthonormal encoder
        dynamics: StableLatentParams or RawLatentTensors
        C: (p, n) output matrix; None means the output is the full state
        method: Training method that produced the model
        info: Free-form string metadata (FOM description, dataset, ...)
    """
    phi: np.ndarray
    psi: np.ndarray
    dynamics: LatentDynamics
    C: Optional[np.ndarray] = None
    method: str = "pod-galerkin"
    info: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.phi.shape != self.psi.shape:
            raise ValueError(f"phi {self.phi.shape} and psi {self.psi.shape} must have equal shapes")
        if self.dynamics.r != self.phi.shape[1]:
            raise ValueError(f"latent dimension {self.dynamics.r} does not match r={self.phi.shape[1]}")
        if self.C is not None and self.C.shape[1] != self.phi.shape[0]:
            raise ValueError(f"C has {self.C.shape[1]} columns, expected n={self.phi.shape[0]}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'")

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    @property
    def r(self) -> int:
        return self.phi.shape[1]

    @property
    def m(self) -> int:
        return self.dynamics.B.shape[1]

    @property
    def p(self) -> int:
        return self.n if self.C is None else self.C.shape[0]

    @property
    def is_stable(self) -> bool:
        return isinstance(self.dynamics, StableLatentParams)


def latent_tensors(model: RomModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(model.dynamics, StableLatentParams):
        return assemble(model.dynamics)
    d = model.dynamics
    return d.A, d.H, d.B


def oblique_factor(model: RomModel) -> LinearFactor:
    """LU factor of Psi^T Phi; raises SingularMatrixError when not invertible."""
    return LinearFactor(model.psi.T @ model.phi, name="Psi^T Phi")


def decoder(model: RomModel, factor: Optional[LinearFactor] = None) -> np.ndarray:
    """D = Phi (Psi^T Phi)^{-1}."""
    factor = factor or oblique_factor(model)
    return factor.solve_transposed(model.phi.T).T


def encode(model: RomModel, x: np.ndarray) -> np.ndarray:
    """Psi^T x for a state (n,) or a batch (..., n)."""
    return np.asarray(x) @ model.psi


def decode(model: RomModel, z: np.ndarray, factor: Optional[LinearFactor] = None) -> np.ndarray:
    """
    Phi (Psi^T Phi)^{-1} z for a latent state (r,) or a batch (..., r).

    Raises:
        SingularMatrixError: If Psi^T Phi is not invertible.
    """
    factor = factor or oblique_factor(model)
    z = np.asarray(z)
    w = factor.solve(z.reshape(-1, model.r).T).T
    return (w @ model.phi.T).reshape(z.shape[:-1] + (model.n,))


def output_decoder(model: RomModel, factor: Optional[LinearFactor] = None) -> np.ndarray:
    """C D, the map from latent state to predicted output."""
    D = decoder(model, factor)
    return D if model.C is None else model.C @ D


def latent_rhs(A: np.ndarray, H: np.ndarray, B: np.ndarray) -> Callable:
    """Batched right-hand side f(Z, U) with Z (T, r), U (T, m)."""
    At, Bt = A.T, B.T

    def rhs(Z: np.ndarray, U: Optional[np.ndarray]) -> np.ndarray:
        out = Z @ At + contract_quadratic(H, Z)
        if U is not None:
            out = out + U @ Bt
        return out

    return rhs


def simulate_batch(
    model: RomModel,
    x0: np.ndarray,
    input_fn: Callable[[float], Optional[np.ndarray]],
    times: np.ndarray,
    step_factor: int = 10,
    on_blowup: str = "raise",
    bound: Optional[float] = None,
    tensors: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Integrate the latent system for a batch of initial conditions.

    Args:
        model: ROM
        x0: (T, n) full initial states
        input_fn: t -> (T, m)
        times: (N,) sample times; t0 = times[0]
        step_factor: RK4 steps per sample interval
        on_blowup: "raise" or "mask" (see numerics.rk4_integrate)
        bound: Optional latent norm bound
        tensors: Pre-assembled (A, H, B)

    Returns:
        (latent grid states (G+1, T, r), grid, sample_index, blowup_times)
    """
    A, H, B = tensors if tensors is not None else latent_tensors(model)
    z0 = np.atleast_2d(x0) @ model.psi
    grid, sample_index = make_grid(times, step_factor)
    states, blowup = rk4_integrate(latent_rhs(A, H, B), z0, grid, input_fn,
                                   on_blowup=on_blowup, bound=bound)
    return states, grid, sample_index, blowup


def simulate(
    model: RomModel,
    x0: np.ndarray,
    signal: InputSignal,
    times: np.ndarray,
    step_factor: int = 10,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Simulate one trajectory and return outputs and latent states at ``times``.

    Returns:
        (y_hat (N, p), z (N, r))

    Raises:
        BlowUpError: If the latent state becomes non-finite.
        SingularMatrixError: If Psi^T Phi is not invertible.
    """
    CD = output_decoder(model)
    states, _, idx, _ = simulate_batch(model, np.asarray(x0)[None, :],
                                       lambda t: signal(t)[None, :], times, step_factor)
    z = states[idx, 0, :]
    return z @ CD.T, z


def pod_galerkin(fom, phi: np.ndarray) -> RomModel:
    """
    Galerkin projection of a quadratic FOM onto an orthonormal basis (Psi = Phi).

    Args:
        fom: Object with ``project(phi, psi) -> (A, H, B)`` and attribute ``C``
        phi: (n, r) orthonormal basis

    Returns:
        RomModel with raw dynamics
    """
    A, H, B = fom.project(phi, phi)
    logger.info(f"POD-Galerkin model built: n={phi.shape[0]}, r={phi.shape[1]}")
    return RomModel(phi=phi.copy(), psi=phi.copy(), dynamics=RawLatentTensors(A, H, B),
                    C=None if fom.C is None else fom.C.copy(), method="pod-galerkin",
                    info={"fom": fom.describe()})


def lift(model: RomModel, basis: np.ndarray, C: Optional[np.ndarray] = None) -> RomModel:
    """
    Express a model trained on pre-projected coordinates x_hat = V^T x in full coordinates.

    Predictions are unchanged for states in span(V).
    """
    return replace(model, phi=basis @ model.phi, psi=basis @ model.psi,
                   C=C if C is not None else (None if model.C is None else model.C @ basis.T))
