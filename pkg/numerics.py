"""
Dense linear-algebra primitives and the fixed-step RK4 integrator.

Storage conventions used throughout the package:
  * arrays are float64, C order;
  * a third-order tensor H has shape (r, r, r) and is contracted as
    (H : z z^T)_i = sum_{p,q} H[i, p, q] z_p z_q;
  * matricize(H)[i, p*r + q] = H[i, p, q].
"""
import logging
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from errors import BlowUpError, SingularMatrixError, SvdConvergenceError

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def skew(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M - M.T)


def condition_number(M: np.ndarray) -> float:
    """2-norm condition number; inf for singular or non-finite input."""
    if not np.all(np.isfinite(M)):
        return float("inf")
    s = sla.svdvals(M)
    if s[-1] == 0.0:
        return float("inf")
    return float(s[0] / s[-1])


class LinearFactor:
    """
    LU factorization of a square matrix, reused for repeated solves.

    Raises:
        SingularMatrixError: If the matrix is singular or its condition number
            exceeds ``cond_limit``.
    """

    def __init__(self, M: np.ndarray, cond_limit: float = COND_LIMIT, name: str = "matrix"):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError(f"{name} must be square, got shape {M.shape}")
        self.cond = condition_number(M)
        if not np.isfinite(self.cond) or self.cond > cond_limit:
            raise SingularMatrixError(f"{name} is singular or ill-conditioned", self.cond)
        self._lu = sla.lu_factor(M, check_finite=False)

    def solve(self, B: np.ndarray) -> np.ndarray:
        """Return M^{-1} B."""
        return sla.lu_solve(self._lu, B, check_finite=False)

    def solve_transposed(self, B: np.ndarray) -> np.ndarray:
        """Return M^{-T} B."""
        return sla.lu_solve(self._lu, B, trans=1, check_finite=False)


def solve_linear(M: np.ndarray, B: np.ndarray, cond_limit: float = COND_LIMIT) -> np.ndarray:
    """
    Solve M X = B for square M.

    Args:
        M: (k, k) matrix
        B: (k,) or (k, l) right-hand side
        cond_limit: Largest acceptable condition number of M

    Returns:
        X with the shape of B

    Raises:
        SingularMatrixError: Carrying the estimated condition number.
    """
    return LinearFactor(M, cond_limit=cond_limit).solve(B)


def thin_svd(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Thin SVD X = U diag(s) V^T with s descending.

    Returns:
        (U, s, V) where U is (n, k), s is (k,), V is (m, k), k = min(n, m)

    Raises:
        SvdConvergenceError: If neither LAPACK driver converges.
    """
    try:
        U, s, Vt = sla.svd(X, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        logger.warning("gesdd did not converge, retrying with gesvd")
        try:
            U, s, Vt = sla.svd(X, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise SvdConvergenceError(f"SVD failed to converge: {exc}") from exc
    return U, s, Vt.T


def matricize(H: np.ndarray) -> np.ndarray:
    r = H.shape[0]
    return H.reshape(r, H.shape[1] * H.shape[2])


def unmatricize(Hmat: np.ndarray) -> np.ndarray:
    r = Hmat.shape[0]
    k = int(round(np.sqrt(Hmat.shape[1])))
    if k * k != Hmat.shape[1]:
        raise ValueError(f"matricized tensor has {Hmat.shape[1]} columns, not a square")
    return Hmat.reshape(r, k, k)


def row_kron(Z: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: (T, r) -> (T, r*r)."""
    T, r = Z.shape
    return (Z[:, :, None] * Z[:, None, :]).reshape(T, r * r)


def contract_quadratic(H: np.ndarray, z: np.ndarray) -> np.ndarray:
    """
    Evaluate H : z z^T.

    Args:
        H: (r, r, r) tensor
        z: (r,) vector or (T, r) batch of row vectors

    Returns:
        (r,) or (T, r)
    """
    Hm = matricize(H)
    if z.ndim == 1:
        return Hm @ np.kron(z, z)
    return row_kron(z) @ Hm.T


def contract_jacobian(H: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Jacobian of z -> H : z z^T, i.e. J[i, j] = sum_q (H[i, j, q] + H[i, q, j]) z_q."""
    return (H + H.transpose(0, 2, 1)) @ z


def spectral_abscissa(A: np.ndarray) -> float:
    """Largest real part of the eigenvalues of A."""
    return float(np.max(sla.eigvals(A).real))


def eigenvalues(A: np.ndarray) -> np.ndarray:
    """Eigenvalues of A sorted by decreasing real part."""
    lam = sla.eigvals(A)
    return lam[np.argsort(-lam.real, kind="stable")]


def make_grid(times: np.ndarray, step_factor: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """
    Subdivide every sample interval into ``step_factor`` equal RK4 steps.

    Args:
        times: Strictly increasing sample times (N,)
        step_factor: Number of RK4 steps per sample interval

    Returns:
        (grid, sample_index) with grid[sample_index] == times
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("sample times must be a non-empty 1-D array")
    if np.any(np.diff(times) <= 0):
        raise ValueError("sample times must be strictly increasing")
    if step_factor < 1:
        raise ValueError(f"step_factor must be >= 1, got {step_factor}")

    pieces = [times[:1]]
    for t0, t1 in zip(times[:-1], times[1:]):
        pieces.append(np.linspace(t0, t1, step_factor + 1)[1:])
    grid = np.concatenate(pieces)
    grid[step_factor::step_factor] = times[1:]
    sample_index = np.arange(times.size) * step_factor
    return grid, sample_index


InputFn = Callable[[float], Optional[np.ndarray]]
RhsFn = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]


def rk4_step(rhs: RhsFn, y: np.ndarray, t: float, h: float, input_fn: InputFn) -> np.ndarray:
    u1 = input_fn(t)
    u2 = input_fn(t + 0.5 * h)
    u4 = input_fn(t + h)
    k1 = rhs(y, u1)
    k2 = rhs(y + 0.5 * h * k1, u2)
    k3 = rhs(y + 0.5 * h * k2, u2)
    k4 = rhs(y + h * k3, u4)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(
    rhs: RhsFn,
    y0: np.ndarray,
    grid: np.ndarray,
    input_fn: InputFn,
    on_blowup: str = "raise",
    bound: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Integrate a batch of trajectories with classical RK4 on a fixed grid.

    Args:
        rhs: f(Y, U) acting on row batches, Y (T, d), U (T, m) or None
        y0: (T, d) initial states
        grid: (G+1,) time grid
        input_fn: t -> (T, m) inputs or None
        on_blowup: "raise" to stop at the first non-finite state, "mask" to
            record the blow-up time and fill that trajectory with NaN
        bound: Optional norm bound treated like a non-finite state

    Returns:
        (states, blowup_times): states is (G+1, T, d); blowup_times is (T,)
        with inf for trajectories that stayed finite.

    Raises:
        BlowUpError: With on_blowup="raise".
    """
    y = np.array(y0, dtype=float)
    T = y.shape[0]
    states = np.empty((grid.size,) + y.shape)
    states[0] = y
    blowup = np.full(T, np.inf)
    alive = np.ones(T, dtype=bool)

    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(grid.size - 1):
            y = rk4_step(rhs, y, grid[n], grid[n + 1] - grid[n], input_fn)
            bad = ~np.all(np.isfinite(y), axis=1)
            if bound is not None:
                bad |= np.linalg.norm(np.nan_to_num(y, nan=np.inf), axis=1) > bound
            bad &= alive
            if np.any(bad):
                if on_blowup == "raise":
                    idx = int(np.flatnonzero(bad)[0])
                    raise BlowUpError(float(grid[n + 1]), idx)
                blowup[bad] = grid[n + 1]
                alive &= ~bad
                y[bad] = 0.0
            states[n + 1] = y
            if not np.all(alive):
                states[n + 1, ~alive] = np.nan

    return states, blowup
