"""
Product manifold Grassmann(n, r) x Stiefel(n, r) x R^{d_1} x ... used to
optimise the projection pair together with the dynamics tensors.

Grassmann points are represented by any full-rank n x r frame Phi, with the
invariant metric g(xi, eta) = Tr((Phi^T Phi)^{-1} xi^T eta) on horizontal
lifts. Stiefel points are orthonormal frames with the Euclidean metric.
Retractions are QR based; vector transport is projection onto the new
tangent space.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np
import scipy.linalg as sla

from errors import RetractionError
from numerics import condition_number, sym

logger = logging.getLogger(__name__)

STIEFEL_TOL = 1e-10
RECONDITION_LIMIT = 1e6


def _qr_positive(X: np.ndarray) -> np.ndarray:
    """Orthonormal Q factor of X with a positive diagonal in R."""
    Q, R = sla.qr(X, mode="economic")
    d = np.diag(R)
    tol = max(X.shape) * np.finfo(float).eps * (np.abs(d).max() if d.size else 1.0)
    if d.size and np.min(np.abs(d)) <= tol:
        raise RetractionError("retraction produced a rank-deficient frame")
    return Q * np.sign(d)


@dataclass(frozen=True)
class GrassmannPoint:
    """A point on Gr(n, r) represented by a full-column-rank frame."""
    frame: np.ndarray

    def __post_init__(self):
        n, r = self.frame.shape
        if r > n:
            raise ValueError(f"Grassmann frame must satisfy r <= n, got {self.frame.shape}")
        if np.linalg.matrix_rank(self.frame) < r:
            raise ValueError("Grassmann frame is not full column rank")

    def reconditioned(self, limit: float = RECONDITION_LIMIT) -> "GrassmannPoint":
        """Same subspace with an orthonormal frame if cond(Phi) exceeds ``limit``."""
        if condition_number(self.frame) <= limit:
            return self
        logger.info("Re-orthonormalizing Grassmann representative")
        return GrassmannPoint(_qr_positive(self.frame))


@dataclass(frozen=True)
class StiefelPoint:
    """A point on St(n, r): an orthonormal n x r frame."""
    frame: np.ndarray

    def __post_init__(self):
        r = self.frame.shape[1]
        err = np.linalg.norm(self.frame.T @ self.frame - np.eye(r))
        if err > STIEFEL_TOL:
            raise ValueError(f"Stiefel frame is not orthonormal (||Psi^T Psi - I|| = {err:.2e})")


@dataclass(frozen=True)
class ProductPoint:
    """Grassmann and Stiefel factors (each optional) plus named Euclidean factors."""
    grassmann: Optional[GrassmannPoint] = None
    stiefel: Optional[StiefelPoint] = None
    euclid: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TangentVector:
    """
    Tangent vector (or ambient gradient) shaped like a ProductPoint.

    Components that are None stand for zero in an absent factor.
    """
    grassmann: Optional[np.ndarray] = None
    stiefel: Optional[np.ndarray] = None
    euclid: Dict[str, np.ndarray] = field(default_factory=dict)

    def _combine(self, other: "TangentVector", a: float, b: float) -> "TangentVector":
        def lin(x, y):
            if x is None:
                return None if y is None else b * y
            if y is None:
                return a * x
            return a * x + b * y

        keys = list(self.euclid) + [k for k in other.euclid if k not in self.euclid]
        return TangentVector(
            grassmann=lin(self.grassmann, other.grassmann),
            stiefel=lin(self.stiefel, other.stiefel),
            euclid={k: lin(self.euclid.get(k), other.euclid.get(k)) for k in keys},
        )

    def __add__(self, other: "TangentVector") -> "TangentVector":
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other: "TangentVector") -> "TangentVector":
        return self._combine(other, 1.0, -1.0)

    def __mul__(self, scalar: float) -> "TangentVector":
        return TangentVector(
            grassmann=None if self.grassmann is None else scalar * self.grassmann,
            stiefel=None if self.stiefel is None else scalar * self.stiefel,
            euclid={k: scalar * v for k, v in self.euclid.items()},
        )

    __rmul__ = __mul__

    def __neg__(self) -> "TangentVector":
        return self * -1.0

    def masked(self, active: Iterable[str]) -> "TangentVector":
        """
        Zero every factor not named in ``active``.

        Factor names are "grassmann", "stiefel" and the Euclidean keys.
        """
        active = set(active)
        return TangentVector(
            grassmann=self.grassmann if "grassmann" in active else _zeros_like(self.grassmann),
            stiefel=self.stiefel if "stiefel" in active else _zeros_like(self.stiefel),
            euclid={k: v if k in active else np.zeros_like(v) for k, v in self.euclid.items()},
        )

    def is_finite(self) -> bool:
        parts = [self.grassmann, self.stiefel, *self.euclid.values()]
        return all(p is None or np.all(np.isfinite(p)) for p in parts)


def _zeros_like(x: Optional[np.ndarray]) -> Optional[np.ndarray]:
    return None if x is None else np.zeros_like(x)


def zero_tangent(p: ProductPoint) -> TangentVector:
    return TangentVector(
        grassmann=None if p.grassmann is None else np.zeros_like(p.grassmann.frame),
        stiefel=None if p.stiefel is None else np.zeros_like(p.stiefel.frame),
        euclid={k: np.zeros_like(v) for k, v in p.euclid.items()},
    )


def grassmann_projection(Phi: np.ndarray, G: np.ndarray) -> np.ndarray:
    """(I - Phi (Phi^T Phi)^{-1} Phi^T) G."""
    return G - Phi @ np.linalg.solve(Phi.T @ Phi, Phi.T @ G)


def stiefel_projection(Psi: np.ndarray, G: np.ndarray) -> np.ndarray:
    """G - Psi sym(Psi^T G)."""
    return G - Psi @ sym(Psi.T @ G)


def metric(p: ProductPoint, xi: TangentVector, eta: TangentVector) -> float:
    """Riemannian inner product of two tangent vectors at p."""
    total = 0.0
    if p.grassmann is not None and xi.grassmann is not None and eta.grassmann is not None:
        Phi = p.grassmann.frame
        total += float(np.trace(np.linalg.solve(Phi.T @ Phi, xi.grassmann.T @ eta.grassmann)))
    if p.stiefel is not None and xi.stiefel is not None and eta.stiefel is not None:
        total += float(np.vdot(xi.stiefel, eta.stiefel))
    for k in p.euclid:
        a, b = xi.euclid.get(k), eta.euclid.get(k)
        if a is not None and b is not None:
            total += float(np.vdot(a, b))
    return total


def norm(p: ProductPoint, xi: TangentVector) -> float:
    return float(np.sqrt(max(metric(p, xi, xi), 0.0)))


def project_tangent(p: ProductPoint, G: TangentVector) -> TangentVector:
    """Project an ambient vector onto the tangent space at p (Euclidean factors unchanged)."""
    return TangentVector(
        grassmann=None if p.grassmann is None or G.grassmann is None
        else grassmann_projection(p.grassmann.frame, G.grassmann),
        stiefel=None if p.stiefel is None or G.stiefel is None
        else stiefel_projection(p.stiefel.frame, G.stiefel),
        euclid={k: np.array(v, copy=True) for k, v in G.euclid.items()},
    )


def retract(p: ProductPoint, xi: TangentVector, step: float) -> ProductPoint:
    """
    QR retraction on the manifold factors, addition on the Euclidean ones.

    Raises:
        RetractionError: If a retracted frame loses rank.
    """
    if step == 0.0:
        return p

    grassmann = p.grassmann
    if grassmann is not None and xi.grassmann is not None and np.any(xi.grassmann):
        grassmann = GrassmannPoint(_qr_positive(grassmann.frame + step * xi.grassmann))

    stiefel = p.stiefel
    if stiefel is not None and xi.stiefel is not None and np.any(xi.stiefel):
        stiefel = StiefelPoint(_qr_positive(stiefel.frame + step * xi.stiefel))

    euclid = {}
    for k, v in p.euclid.items():
        d = xi.euclid.get(k)
        euclid[k] = v if d is None else v + step * d
    return ProductPoint(grassmann=grassmann, stiefel=stiefel, euclid=euclid)


def transport(p_from: ProductPoint, p_to: ProductPoint, xi: TangentVector) -> TangentVector:
    """
    Vector transport by projection.

    The Grassmann component is first re-expressed in the representative of
    p_to (right-multiplied by W = (Phi^T Phi)^{-1} Phi^T Phi_to) and then
    projected onto the horizontal space there.
    """
    grassmann = xi.grassmann
    if p_to.grassmann is not None and grassmann is not None:
        Phi, Phi_to = p_from.grassmann.frame, p_to.grassmann.frame
        if Phi_to is not Phi:
            W = np.linalg.solve(Phi.T @ Phi, Phi.T @ Phi_to)
            grassmann = grassmann_projection(Phi_to, grassmann @ W)

    stiefel = xi.stiefel
    if p_to.stiefel is not None and stiefel is not None and p_to.stiefel is not p_from.stiefel:
        stiefel = stiefel_projection(p_to.stiefel.frame, stiefel)

    return TangentVector(
        grassmann=grassmann,
        stiefel=stiefel,
        euclid={k: v for k, v in xi.euclid.items()},
    )
