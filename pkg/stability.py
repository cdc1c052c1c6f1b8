"""
Stability-guaranteeing parameterization of the latent dynamics.

Free parameters (K, R, Q, S) are mapped to
    A = (K - K^T - R R^T) Qt,            Qt = Q^{-1} Q^{-T}
    H[:, j, :] = (S_j - S_j^T) Qt,        S_j = S[:, j, :]
so that V(z) = z^T Qt z is a Lyapunov function of the unforced latent
system: dV/dt = -2 z^T Qt R R^T Qt z <= 0, and the quadratic term never
changes V. With Q = I the quadratic tensor reduces to H_ijk = S_ijk - S_kji.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from errors import SingularMatrixError
from numerics import LinearFactor, contract_quadratic, eigenvalues, skew, sym

logger = logging.getLogger(__name__)


@dataclass
class StableLatentParams:
    """Unconstrained parameters of a stable quadratic latent model."""
    K: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        r = self.K.shape[0]
        expected = {"K": (r, r), "R": (r, r), "Q": (r, r), "S": (r, r, r)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if self.B.ndim != 2 or self.B.shape[0] != r:
            raise ValueError(f"B must have shape ({r}, m), got {self.B.shape}")

    @property
    def r(self) -> int:
        return self.K.shape[0]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {"K": self.K, "R": self.R, "Q": self.Q, "S": self.S, "B": self.B}

    @classmethod
    def from_dict(cls, d: Dict[str, np.ndarray]) -> "StableLatentParams":
        return cls(K=d["K"], R=d["R"], Q=d["Q"], S=d["S"], B=d["B"])


def _q_tilde(Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (Q^{-1}, Q^{-1} Q^{-T}); raises SingularMatrixError for singular Q."""
    Qinv = LinearFactor(Q, name="Q").solve(np.eye(Q.shape[0]))
    return Qinv, Qinv @ Qinv.T


def _skew_slices(S: np.ndarray) -> np.ndarray:
    """Stack of S_j - S_j^T indexed as [j, i, l]."""
    Sj = S.transpose(1, 0, 2)
    return Sj - Sj.transpose(0, 2, 1)


def assemble(params: StableLatentParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Build (A, H, B) from the stable parameters.

    Raises:
        SingularMatrixError: If Q is singular.
    """
    _, Qt = _q_tilde(params.Q)
    A = (params.K - params.K.T - params.R @ params.R.T) @ Qt
    H = (_skew_slices(params.S) @ Qt).transpose(1, 0, 2)
    return A, np.ascontiguousarray(H), params.B.copy()


def pullback(
    params: StableLatentParams,
    grad_A: np.ndarray,
    grad_H: np.ndarray,
    grad_B: np.ndarray,
) -> Dict[str, np.ndarray]:
    """
    Chain rule from gradients w.r.t. (A, H, B) to gradients w.r.t. (K, R, Q, S, B).

    Args:
        params: Point at which the gradient is evaluated
        grad_A, grad_H, grad_B: Gradients of a scalar w.r.t. the assembled tensors

    Returns:
        Dict with keys K, R, Q, S, B
    """
    Qinv, Qt = _q_tilde(params.Q)
    K, R = params.K, params.R
    A_core = K - K.T - R @ R.T

    grad_K = grad_A @ Qt - Qt @ grad_A.T
    grad_R = -(grad_A @ Qt + Qt @ grad_A.T) @ R

    GHj = grad_H.transpose(1, 0, 2)
    Sk = _skew_slices(params.S)
    grad_S = (GHj @ Qt - Qt @ GHj.transpose(0, 2, 1)).transpose(1, 0, 2)

    grad_Qt = A_core.T @ grad_A + np.einsum("jli,jlk->ik", Sk, GHj)
    grad_Q = -Qinv.T @ (grad_Qt + grad_Qt.T) @ Qt

    return {
        "K": grad_K,
        "R": grad_R,
        "Q": grad_Q,
        "S": np.ascontiguousarray(grad_S),
        "B": np.array(grad_B, copy=True),
    }


def energy_rate(A: np.ndarray, H: np.ndarray, Qt: np.ndarray, z: np.ndarray) -> Tuple[float, float]:
    """
    Split dV/dt for V = z^T Qt z into its linear and quadratic contributions.

    Returns:
        (2 z^T Qt A z, 2 z^T Qt (H : z z^T))
    """
    w = Qt @ z
    return float(2.0 * w @ (A @ z)), float(2.0 * w @ contract_quadratic(H, z))


def lyapunov_weight(params: StableLatentParams) -> np.ndarray:
    """The Lyapunov matrix Qt = Q^{-1} Q^{-T}."""
    return _q_tilde(params.Q)[1]


def stabilize_spectrum(A: np.ndarray, margin: float = 1e-6) -> np.ndarray:
    """
    Reflect eigenvalues with non-negative real part into the open left half-plane.

    Each offending eigenvalue a + ib is replaced by -max(|a|, margin) + ib; the
    eigenvectors are kept. A matrix that is already Hurwitz is returned unchanged.
    """
    lam, V = sla.eig(A)
    if np.all(lam.real < 0):
        return np.array(A, copy=True)
    bad = lam.real >= 0
    logger.info(f"Reflecting {int(bad.sum())} eigenvalue(s) into the left half-plane")
    lam = lam.copy()
    lam[bad] = -np.maximum(np.abs(lam[bad].real), margin) + 1j * lam[bad].imag
    A_s = np.linalg.solve(V.T, (V * lam).T).T
    return np.ascontiguousarray(A_s.real)


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(sym(M))
    return V * np.sqrt(np.clip(w, 0.0, None))


def stable_params_from_matrix(
    A0: np.ndarray,
    B0: np.ndarray,
    H0: Optional[np.ndarray] = None,
    route: str = "lyapunov",
    margin: float = 1e-6,
) -> StableLatentParams:
    """
    Initial stable parameters that reproduce a given Hurwitz-projected A0.

    Args:
        A0: Target linear operator; unstable eigenvalues are reflected first
        B0: Input operator, copied as-is
        H0: Optional quadratic tensor projected onto the energy-preserving family
        route: "lyapunov" solves A^T P + P A = -I and uses Qt = P, which
            reproduces any Hurwitz A exactly; "identity" fixes Q = I, exact only
            when sym(A0) is negative semidefinite
        margin: Smallest allowed distance of reflected eigenvalues from the axis

    Returns:
        StableLatentParams
    """
    A_s = stabilize_spectrum(A0, margin=margin)
    r = A_s.shape[0]
    I = np.eye(r)

    if route == "lyapunov":
        P = sym(sla.solve_continuous_lyapunov(A_s.T, -I))
        try:
            L = sla.cholesky(P, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("Lyapunov solution is not positive definite") from exc
        Q = sla.solve_triangular(L, I, lower=True)

        def right_solve(M):
            # M P^{-1} row by row, P = Q^{-1} Q^{-T} = L L^T
            return sla.cho_solve((L, True), M.reshape(-1, r).T).T.reshape(M.shape)
    elif route == "identity":
        Q = I.copy()

        def right_solve(M):
            return M

        if np.max(np.linalg.eigvalsh(sym(A_s))) > 0:
            logger.warning("sym(A0) is indefinite; identity route only approximates A0")
    else:
        raise ValueError(f"Unknown initialisation route: {route}")

    core = right_solve(A_s)
    K = 0.5 * skew(core)
    R = _psd_sqrt(-core)

    if H0 is None:
        S = np.zeros((r, r, r))
    else:
        Hj = right_solve(H0.transpose(1, 0, 2))
        S = (0.5 * skew_batch(Hj)).transpose(1, 0, 2)

    params = StableLatentParams(K=K, R=R, Q=Q, S=np.ascontiguousarray(S), B=np.array(B0, dtype=float))
    A_check, _, _ = assemble(params)
    logger.info(
        f"Stable initialisation ({route}): ||A - A0_stable|| = {np.linalg.norm(A_check - A_s):.3e}, "
        f"leading eigenvalue {eigenvalues(A_check)[0]:.4g}"
    )
    return params


def skew_batch(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M - M.transpose(0, 2, 1))


def identity_params(r: int, m: int) -> StableLatentParams:
    """K = 0, R = I, Q = I, S = 0, B = 0, which assembles to A = -I, H = 0."""
    return StableLatentParams(
        K=np.zeros((r, r)), R=np.eye(r), Q=np.eye(r), S=np.zeros((r, r, r)), B=np.zeros((r, m))
    )
