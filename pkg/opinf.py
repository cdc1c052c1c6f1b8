"""
Operator inference: regression of latent time derivatives onto
[z, z (x) z, u], either unconstrained (least squares) or through the stable
parameterization (gradient-based).
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from data_prep import SnapshotDataset, infer_output_matrix, is_uniform_grid
from errors import DataError, RankDeficientError, SingularMatrixError
from manifolds import ProductPoint, TangentVector
from numerics import LinearFactor, contract_quadratic, row_kron
from optimizers import LbfgsConfig, riemannian_lbfgs
from rom import RawLatentTensors, RomModel, pod_galerkin
from stability import StableLatentParams, assemble, pullback, stable_params_from_matrix
from training import pod

logger = logging.getLogger(__name__)


@dataclass
class OpInfData:
    """
    Regression data in latent coordinates.

    Attributes:
        Z: (K, r) latent states
        Zdot: (K, r) latent time derivatives
        U: (K, m) inputs
        weights: (K,) per-snapshot weights (1 / alpha_j of the owning trajectory)
    """
    Z: np.ndarray
    Zdot: np.ndarray
    U: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        K = self.Z.shape[0]
        if self.Zdot.shape != self.Z.shape or self.U.shape[0] != K or self.weights.shape != (K,):
            raise DataError("OpInf data arrays have inconsistent shapes")

    @property
    def r(self) -> int:
        return self.Z.shape[1]


def compact_kron(Z: np.ndarray) -> np.ndarray:
    """Unique quadratic products z_p z_q, p <= q, row-wise: (K, r) -> (K, r(r+1)/2)."""
    p, q = np.triu_indices(Z.shape[1])
    return Z[:, p] * Z[:, q]


def expand_compact(Hc: np.ndarray) -> np.ndarray:
    """Coefficients of compact products -> symmetric-slice tensor H (r, r, r)."""
    r = Hc.shape[0]
    p, q = np.triu_indices(r)
    H = np.zeros((r, r, r))
    off = p != q
    H[:, p, q] = np.where(off, 0.5, 1.0) * Hc
    H[:, q, p] = H[:, p, q]
    return H


def finite_difference(X: np.ndarray, dt: float) -> np.ndarray:
    """
    Fourth-order finite-difference time derivative along axis 0 of a uniform series.

    Interior points use the central stencil; the first and last two points use
    one-sided fourth-order stencils.
    """
    N = X.shape[0]
    if N < 5:
        raise DataError(f"finite differences need at least 5 samples, got {N}")
    D = np.empty_like(X)
    D[2:-2] = (X[:-4] - 8 * X[1:-3] + 8 * X[3:-1] - X[4:]) / (12 * dt)
    D[0] = (-25 * X[0] + 48 * X[1] - 36 * X[2] + 16 * X[3] - 3 * X[4]) / (12 * dt)
    D[1] = (-3 * X[0] - 10 * X[1] + 18 * X[2] - 6 * X[3] + X[4]) / (12 * dt)
    D[-1] = (25 * X[-1] - 48 * X[-2] + 36 * X[-3] - 16 * X[-4] + 3 * X[-5]) / (12 * dt)
    D[-2] = (3 * X[-1] + 10 * X[-2] - 18 * X[-3] + 6 * X[-4] - X[-5]) / (12 * dt)
    return D


def latent_derivatives(dataset: SnapshotDataset, phi: np.ndarray, fom=None) -> OpInfData:
    """
    Latent states Phi^T x and their time derivatives.

    Derivatives come from the dataset's stored exact derivatives, else from
    the FOM right-hand side, else from fourth-order finite differences of the
    projected states (uniform grid required).
    """
    Z = dataset.states @ phi
    if dataset.derivatives is not None:
        Zdot = dataset.derivatives @ phi
        source = "stored derivatives"
    elif fom is not None:
        T, N = dataset.n_traj, dataset.n_samples
        X = dataset.states.reshape(T * N, -1)
        Zdot = (fom.rhs(X, dataset.inputs.reshape(T * N, -1)) @ phi).reshape(T, N, -1)
        source = "FOM right-hand side"
    else:
        dts = np.diff(dataset.times)
        if not is_uniform_grid(dataset.times):
            raise DataError("finite-difference derivatives need a uniform time grid")
        Zdot = np.stack([finite_difference(Z[j], dts[0]) for j in range(dataset.n_traj)])
        source = "finite differences"
    logger.info(f"Latent derivatives from {source}")

    w = np.repeat(1.0 / dataset.weights, dataset.n_samples)
    return OpInfData(
        Z=Z.reshape(-1, phi.shape[1]),
        Zdot=Zdot.reshape(-1, phi.shape[1]),
        U=dataset.inputs.reshape(-1, dataset.m),
        weights=w,
    )


def opinf_lstsq(data: OpInfData, reg: float = 0.0) -> RawLatentTensors:
    """
    Weighted least-squares operator inference with Tikhonov regularization on H.

    Minimizes sum_k w_k ||zdot_k - A z_k - H : z_k z_k^T - B u_k||^2 + reg ||mat(H)||_F^2
    through the normal equations. Quadratic features are the unique products
    z_p z_q (p <= q); their coefficients are spread symmetrically over H.

    Raises:
        RankDeficientError: If the (regularized) regression matrix is singular.
    """
    r = data.r
    Z2 = compact_kron(data.Z)
    D = np.hstack([data.Z, Z2, data.U])
    Dw = D * data.weights[:, None]
    gram = D.T @ Dw
    p, q = np.triu_indices(r)
    penalty = np.zeros(D.shape[1])
    penalty[r:r + p.size] = np.where(p == q, reg, 0.5 * reg)
    gram[np.diag_indices_from(gram)] += penalty

    try:
        factor = LinearFactor(gram, name="OpInf normal equations")
    except SingularMatrixError:
        rank = int(np.linalg.matrix_rank(D))
        raise RankDeficientError("OpInf regression matrix is rank deficient", rank) from None
    O = factor.solve(Dw.T @ data.Zdot)

    A = O[:r].T
    H = expand_compact(O[r:r + p.size].T)
    B = O[r + p.size:].T
    logger.info(f"OpInf (reg={reg:g}): normal-equation condition number {factor.cond:.3e}")
    return RawLatentTensors(A=np.ascontiguousarray(A), H=H, B=np.ascontiguousarray(B))


def _residual(A, H, B, data: OpInfData) -> np.ndarray:
    return data.Zdot - (data.Z @ A.T + contract_quadratic(H, data.Z) + data.U @ B.T)


def opinf_objective(A, H, B, data: OpInfData, reg: float) -> float:
    E = _residual(A, H, B, data)
    return float(np.sum(data.weights[:, None] * E * E) + reg * np.sum(H * H))


def gasopinf_loss_and_grad(
    params: StableLatentParams,
    data: OpInfData,
    reg: float,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Regularized regression objective through the stable parameterization.

    Returns:
        (objective, gradients w.r.t. K, R, Q, S, B)
    """
    A, H, B = assemble(params)
    E = _residual(A, H, B, data)
    Ew = E * data.weights[:, None]
    value = float(np.sum(Ew * E) + reg * np.sum(H * H))
    grad_A = -2.0 * Ew.T @ data.Z
    grad_H = -2.0 * (Ew.T @ row_kron(data.Z)).reshape(H.shape) + 2.0 * reg * H
    grad_B = -2.0 * Ew.T @ data.U
    return value, pullback(params, grad_A, grad_H, grad_B)


def gasopinf_train(
    data: OpInfData,
    init: StableLatentParams,
    reg: float,
    max_iter: int = 500,
    config: Optional[LbfgsConfig] = None,
    gtol: float = 1e-10,
) -> Tuple[StableLatentParams, pd.DataFrame]:
    """
    Minimize the GasOpInf objective over (K, R, Q, S, B) with L-BFGS.

    Returns:
        (optimized parameters, iteration history)
    """
    def objective(point: ProductPoint):
        value, grads = gasopinf_loss_and_grad(StableLatentParams.from_dict(point.euclid), data, reg)
        return value, TangentVector(euclid=grads)

    start = ProductPoint(euclid={k: np.array(v, copy=True) for k, v in init.as_dict().items()})
    result = riemannian_lbfgs(objective, start, list(start.euclid), max_iter, config, gtol)
    logger.info(f"GasOpInf: objective {result.history[0]['loss']:.6e} -> {result.value:.6e} "
                f"in {len(result.history) - 1} iterations ({result.reason})")
    history = pd.DataFrame(result.history)
    history.insert(0, "stage", "gasopinf")
    return StableLatentParams.from_dict(result.point.euclid), history


def fit_opinf(dataset: SnapshotDataset, r: int, reg: float, fom=None,
              phi: Optional[np.ndarray] = None) -> RomModel:
    """POD basis plus least-squares OpInf tensors (Psi = Phi)."""
    if phi is None:
        phi = pod(dataset, r).modes
    tensors = opinf_lstsq(latent_derivatives(dataset, phi, fom), reg)
    info = {} if fom is None else {"fom": fom.describe()}
    C = infer_output_matrix(dataset) if fom is None else fom.C
    return RomModel(phi=phi.copy(), psi=phi.copy(), dynamics=tensors,
                    C=None if C is None else C.copy(),
                    method="opinf", info=info)


def fit_gasopinf(
    dataset: SnapshotDataset,
    r: int,
    reg: float,
    fom=None,
    phi: Optional[np.ndarray] = None,
    max_iter: int = 500,
    init_route: str = "identity",
    config: Optional[LbfgsConfig] = None,
    C: Optional[np.ndarray] = None,
) -> Tuple[RomModel, pd.DataFrame]:
    """
    GasOpInf model on a POD basis.

    The starting point reproduces the POD-Galerkin tensors (when a FOM is
    available) or the least-squares OpInf tensors, with unstable eigenvalues
    of A reflected and H projected onto the energy-preserving family.
    """
    if phi is None:
        phi = pod(dataset, r).modes
    data = latent_derivatives(dataset, phi, fom)
    if fom is not None:
        start = pod_galerkin(fom, phi).dynamics
        C = fom.C if C is None else C
    else:
        start = opinf_lstsq(data, reg)
        C = infer_output_matrix(dataset) if C is None else C
    init = stable_params_from_matrix(start.A, start.B, start.H, route=init_route)
    params, history = gasopinf_train(data, init, reg, max_iter=max_iter, config=config)
    info = {} if fom is None else {"fom": fom.describe()}
    model = RomModel(phi=phi.copy(), psi=phi.copy(), dynamics=params,
                     C=None if C is None else np.array(C, copy=True), method="gasopinf", info=info)
    return model, history
