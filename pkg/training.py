"""
Trajectory-based training of reduced-order models.

The loss is the weighted output error over all training trajectories,

    L = sum_j (1 / alpha_j) sum_i || y_j(t_i) - y_hat_j(t_i) ||^2,

and its gradient w.r.t. the projection pair and the latent tensors comes
from one backward adjoint sweep per trajectory batch with jump injections at
the sample times. Optimization alternates blocks of variables under a
progressive time-horizon schedule.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg as sla
from sklearn.utils.extmath import svd_flip

from data_prep import SnapshotDataset
from errors import BlowUpError, ConfigError, PenaltyOverflowError, RankDeficientError
from manifolds import GrassmannPoint, ProductPoint, StiefelPoint, TangentVector
from numerics import contract_quadratic, spectral_abscissa, thin_svd
from optimizers import AdamConfig, LbfgsConfig, OptimizerResult, riemannian_adam, riemannian_lbfgs
from rom import RawLatentTensors, RomModel, latent_tensors, oblique_factor, simulate_batch
from stability import StableLatentParams, pullback

logger = logging.getLogger(__name__)

BLOCKS = ("projection", "tensors", "joint")


@dataclass
class PodBasis:
    """Leading POD modes with their singular values and captured energy fraction."""
    modes: np.ndarray
    singular_values: np.ndarray
    variance_captured: float

    @property
    def r(self) -> int:
        return self.modes.shape[1]


def pod(dataset: SnapshotDataset, r: int, weighted: bool = True) -> PodBasis:
    """
    Leading r POD modes of the state snapshots.

    Args:
        dataset: Training data
        r: Number of modes
        weighted: Scale each trajectory by 1/sqrt(alpha_j) before the SVD

    Returns:
        PodBasis with orthonormal (n, r) modes

    Raises:
        RankDeficientError: If the snapshots have numerical rank below r.
    """
    X = dataset.states
    if weighted:
        X = X / np.sqrt(dataset.weights)[:, None, None]
    X = X.reshape(-1, dataset.n).T
    U, s, V = thin_svd(X)
    tol = max(X.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank < r:
        raise RankDeficientError(f"snapshot matrix cannot supply {r} POD modes", rank)
    U, _ = svd_flip(U, V.T)
    energy = s ** 2
    captured = float(energy[:r].sum() / energy.sum())
    logger.info(f"POD: r={r} captures {captured:.6%} of snapshot energy")
    return PodBasis(modes=np.ascontiguousarray(U[:, :r]), singular_values=s[:r].copy(),
                    variance_captured=captured)


@dataclass
class PenaltyConfig:
    """Stability penalty weight * ||exp(A t_final)||_F^2 for unconstrained models."""
    mode: str = "auto"          # "auto", "always" or "off"
    weight: float = 1e-3
    t_final: float = 100.0
    growth: float = 10.0
    max_rounds: int = 5


@dataclass
class TrainConfig:
    """
    Schedule and solver settings.

    ``blocks`` is a list of (block name, iterations) run in order for every
    horizon; block names are "projection", "tensors" and "joint". Horizons at
    or beyond ``adam_after`` use Adam(W) instead of L-BFGS when ``optimizer`` is
    "lbfgs-adam".
    """
    horizons: List[float] = field(default_factory=lambda: [float("inf")])
    blocks: List[Tuple[str, int]] = field(
        default_factory=lambda: [("projection", 50), ("tensors", 50),
                                 ("projection", 50), ("tensors", 50), ("joint", 100)]
    )
    optimizer: str = "lbfgs"
    adam_after: float = float("inf")
    step_factor: int = 10
    adjoint_scheme: str = "discrete"
    threads: int = 1
    gtol: float = 1e-10
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)

    def validate(self) -> None:
        if not self.horizons or any(h <= 0 for h in self.horizons):
            raise ConfigError("train.horizons", "must be a non-empty list of positive times")
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ConfigError("train.horizons", "must be strictly increasing")
        if not self.blocks:
            raise ConfigError("train.blocks", "schedule has no blocks")
        for name, iters in self.blocks:
            if name not in BLOCKS:
                raise ConfigError("train.blocks", f"unknown block '{name}' (expected one of {BLOCKS})")
            if iters < 1:
                raise ConfigError("train.blocks", f"iteration count for '{name}' must be positive, got {iters}")
        if self.optimizer not in ("lbfgs", "adam", "lbfgs-adam"):
            raise ConfigError("train.optimizer", f"unknown optimizer '{self.optimizer}'")
        if self.adjoint_scheme not in ("discrete", "continuous"):
            raise ConfigError("train.adjoint_scheme", f"unknown scheme '{self.adjoint_scheme}'")
        if self.step_factor < 1:
            raise ConfigError("train.step_factor", "must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        if self.lbfgs.memory < 1 or self.lbfgs.max_backtracks < 1:
            raise ConfigError("train.lbfgs", "memory and max_backtracks must be positive")
        if self.penalty.max_rounds < 1:
            raise ConfigError("train.penalty.max_rounds", "must be positive")
        if self.penalty.mode not in ("auto", "always", "off"):
            raise ConfigError("train.penalty.mode", f"unknown mode '{self.penalty.mode}'")


@dataclass
class AmbientGradient:
    """
    Gradient of the loss before tangent projection.

    ``phi`` is already the Riemannian gradient for the Grassmann metric
    (Euclidean gradient times Phi^T Phi); ``psi`` is the Euclidean gradient.
    ``tensors`` holds the gradient w.r.t. the model's own dynamics parameters;
    ``grad_A``, ``grad_H`` and ``grad_B`` are w.r.t. the assembled tensors.
    """
    phi: np.ndarray
    psi: np.ndarray
    tensors: Dict[str, np.ndarray]
    grad_A: np.ndarray
    grad_H: np.ndarray
    grad_B: np.ndarray


def stability_penalty(A: np.ndarray, weight: float, t_final: float) -> Tuple[float, np.ndarray]:
    """
    weight * ||exp(A t_final)||_F^2 and its gradient w.r.t. A.

    The gradient uses the Frechet derivative of the matrix exponential,
    grad = 2 weight t_final L(A^T t_final, exp(A t_final)).

    Raises:
        PenaltyOverflowError: If the exponential is not finite.
    """
    X = A * t_final
    with np.errstate(over="ignore", invalid="ignore"):
        E = sla.expm(X)
        if not np.all(np.isfinite(E)):
            raise PenaltyOverflowError(spectral_abscissa(A))
        value = weight * float(np.sum(E * E))
        L = sla.expm_frechet(X.T, E, compute_expm=False)
    if not np.isfinite(value) or not np.all(np.isfinite(L)):
        raise PenaltyOverflowError(spectral_abscissa(A))
    return value, 2.0 * weight * t_final * L


def _vjp(A: np.ndarray, Hs: np.ndarray, Z: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Rows of c^T J(z) for the latent right-hand side, batched."""
    return C @ A + np.einsum("ti,ijq,tq->tj", C, Hs, Z)


def _rhs(A, H, B, Z, U):
    return Z @ A.T + contract_quadratic(H, Z) + U @ B.T


def discrete_adjoint(
    A: np.ndarray,
    H: np.ndarray,
    B: np.ndarray,
    states: np.ndarray,
    grid: np.ndarray,
    sample_index: np.ndarray,
    jumps: np.ndarray,
    input_fn: Callable[[float], np.ndarray],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Reverse sweep through the RK4 steps with cotangent jumps at the samples.

    Args:
        A, H, B: Latent tensors
        states: (G+1, T, r) forward grid states
        grid: (G+1,) time grid
        sample_index: (N,) grid index of each sample
        jumps: (N, T, r) derivative of the loss w.r.t. z at every sample
        input_fn: t -> (T, m)

    Returns:
        (dL/dz(t0) (T, r), dL/dA, dL/dH, dL/dB)
    """
    Hs = H + H.transpose(0, 2, 1)
    G = grid.size - 1
    jump_at = {int(g): i for i, g in enumerate(sample_index)}
    mu = np.zeros_like(states[0])
    cots, ys, us = [], [], []

    for n in range(G - 1, -1, -1):
        if n + 1 in jump_at:
            mu = mu + jumps[jump_at[n + 1]]
        t, h = grid[n], grid[n + 1] - grid[n]
        z = states[n]
        u1, u2, u4 = input_fn(t), input_fn(t + 0.5 * h), input_fn(t + h)
        k1 = _rhs(A, H, B, z, u1)
        y2 = z + 0.5 * h * k1
        k2 = _rhs(A, H, B, y2, u2)
        y3 = z + 0.5 * h * k2
        k3 = _rhs(A, H, B, y3, u2)
        y4 = z + h * k3

        c4 = (h / 6.0) * mu
        c3 = (h / 3.0) * mu
        c2 = (h / 3.0) * mu
        c1 = (h / 6.0) * mu
        zbar = mu.copy()

        g4 = _vjp(A, Hs, y4, c4)
        zbar += g4
        c3 = c3 + h * g4
        g3 = _vjp(A, Hs, y3, c3)
        zbar += g3
        c2 = c2 + 0.5 * h * g3
        g2 = _vjp(A, Hs, y2, c2)
        zbar += g2
        c1 = c1 + 0.5 * h * g2
        zbar += _vjp(A, Hs, z, c1)

        cots.extend((c1, c2, c3, c4))
        ys.extend((z, y2, y3, y4))
        us.extend((u1, u2, u2, u4))
        mu = zbar

    if 0 in jump_at:
        mu = mu + jumps[jump_at[0]]

    return (mu, *_accumulate(cots, ys, us, A, H, B))


def _accumulate(cots, ys, us, A, H, B):
    if not cots:
        return np.zeros_like(A), np.zeros_like(H), np.zeros_like(B)
    Cm = np.concatenate(cots)
    Ym = np.concatenate(ys)
    Um = np.concatenate(us)
    grad_A = Cm.T @ Ym
    grad_H = np.einsum("ki,kp,kq->ipq", Cm, Ym, Ym, optimize=True)
    grad_B = Cm.T @ Um
    return grad_A, grad_H, grad_B


def continuous_adjoint(
    A: np.ndarray,
    H: np.ndarray,
    B: np.ndarray,
    states: np.ndarray,
    grid: np.ndarray,
    sample_index: np.ndarray,
    jumps: np.ndarray,
    input_fn: Callable[[float], np.ndarray],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward RK4 integration of the adjoint ODE with trapezoidal parameter integrals.

    Same signature and return values as ``discrete_adjoint``. Mid-step states
    come from cubic Hermite interpolation of the stored grid states.
    """
    Hs = H + H.transpose(0, 2, 1)
    G = grid.size - 1
    jump_at = {int(g): i for i, g in enumerate(sample_index)}
    mu = np.zeros_like(states[0])
    grad_A, grad_H, grad_B = np.zeros_like(A), np.zeros_like(H), np.zeros_like(B)

    def add(weight, c, z, u):
        nonlocal grad_A, grad_H, grad_B
        grad_A = grad_A + weight * (c.T @ z)
        grad_H = grad_H + weight * np.einsum("ti,tp,tq->ipq", c, z, z)
        grad_B = grad_B + weight * (c.T @ u)

    for n in range(G - 1, -1, -1):
        if n + 1 in jump_at:
            mu = mu + jumps[jump_at[n + 1]]
        t0, t1 = grid[n], grid[n + 1]
        h = t1 - t0
        z0, z1 = states[n], states[n + 1]
        u0, um, u1 = input_fn(t0), input_fn(t0 + 0.5 * h), input_fn(t1)
        f0, f1 = _rhs(A, H, B, z0, u0), _rhs(A, H, B, z1, u1)
        zm = 0.5 * (z0 + z1) + (h / 8.0) * (f0 - f1)

        add(0.5 * h, mu, z1, u1)
        k1 = -_vjp(A, Hs, z1, mu)
        k2 = -_vjp(A, Hs, zm, mu - 0.5 * h * k1)
        k3 = -_vjp(A, Hs, zm, mu - 0.5 * h * k2)
        k4 = -_vjp(A, Hs, z0, mu - h * k3)
        mu = mu - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        add(0.5 * h, mu, z0, u0)

    if 0 in jump_at:
        mu = mu + jumps[jump_at[0]]
    return mu, grad_A, grad_H, grad_B


ADJOINTS = {"discrete": discrete_adjoint, "continuous": continuous_adjoint}


def _chunks(count: int, threads: int) -> List[List[int]]:
    threads = max(1, min(threads, count))
    return [list(c) for c in np.array_split(np.arange(count), threads) if len(c)]


class _TrajectoryTerms:
    """Per-batch loss contributions and raw gradient pieces."""

    def __init__(self, model: RomModel, dataset: SnapshotDataset, step_factor: int,
                 adjoint_scheme: str):
        self.model = model
        self.dataset = dataset
        self.step_factor = step_factor
        self.adjoint = ADJOINTS[adjoint_scheme]
        self.tensors = latent_tensors(model)
        self.factor = oblique_factor(model)
        D = self.factor.solve_transposed(model.phi.T).T
        self.D = D
        self.CD = D if model.C is None else model.C @ D

    def __call__(self, idx: Sequence[int], need_grad: bool):
        ds = self.dataset
        x0 = ds.initial_states[idx]
        input_fn = ds.input_function(idx)
        states, grid, sample_index, _ = simulate_batch(
            self.model, x0, input_fn, ds.times, self.step_factor, tensors=self.tensors
        )
        Z = states[sample_index]
        E = ds.outputs[idx].transpose(1, 0, 2) - Z @ self.CD.T
        w = 1.0 / ds.weights[idx]
        loss = float(np.einsum("ntp,t->", E * E, w))
        if not need_grad:
            return loss, None

        Ew = E * w[None, :, None]
        jumps = -2.0 * (Ew @ self.CD)
        mu0, gA, gH, gB = self.adjoint(*self.tensors, states, grid, sample_index, jumps, input_fn)
        M1 = Ew.reshape(-1, Ew.shape[2]).T @ Z.reshape(-1, Z.shape[2])
        return loss, (gA, gH, gB, M1, x0.T @ mu0)


def _evaluate(model: RomModel, dataset: SnapshotDataset, need_grad: bool, step_factor: int,
              adjoint_scheme: str, threads: int):
    terms = _TrajectoryTerms(model, dataset, step_factor, adjoint_scheme)
    chunks = _chunks(dataset.n_traj, threads)
    if len(chunks) == 1:
        results = [terms(chunks[0], need_grad)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(lambda c: terms(c, need_grad), chunks))
    loss = sum(r[0] for r in results)
    if not need_grad:
        return terms, loss, None
    parts = [r[1] for r in results]
    summed = [sum(p[k] for p in parts) for k in range(5)]
    return terms, loss, summed


def loss(
    model: RomModel,
    dataset: SnapshotDataset,
    horizon: Optional[float] = None,
    step_factor: int = 10,
    threads: int = 1,
) -> float:
    """
    Weighted output error of the model on the dataset, truncated to ``horizon``.

    Returns ``inf`` when a latent trajectory blows up.

    Raises:
        SingularMatrixError: If Psi^T Phi (or Q) is singular.
    """
    data = dataset if horizon is None else dataset.truncated(horizon)
    try:
        return _evaluate(model, data, False, step_factor, "discrete", threads)[1]
    except BlowUpError as exc:
        logger.debug(f"loss is infinite: {exc}")
        return float("inf")


def gradient(
    model: RomModel,
    dataset: SnapshotDataset,
    horizon: Optional[float] = None,
    step_factor: int = 10,
    adjoint_scheme: str = "discrete",
    threads: int = 1,
    penalty: Optional[Tuple[float, float]] = None,
) -> Tuple[float, AmbientGradient]:
    """
    Loss and ambient gradient w.r.t. (Phi, Psi, dynamics parameters).

    Args:
        model: ROM
        dataset: Training data
        horizon: Use only samples with t <= horizon
        step_factor: RK4 steps per sample interval
        adjoint_scheme: "discrete" (exact for the RK4 discretization) or
            "continuous" (adjoint ODE with trapezoidal quadrature)
        threads: Worker threads over trajectory batches
        penalty: Optional (weight, t_final) stability penalty added to the loss

    Returns:
        (loss, AmbientGradient)
    """
    data = dataset if horizon is None else dataset.truncated(horizon)
    terms, value, (gA, gH, gB, M1, psi_init) = _evaluate(
        model, data, True, step_factor, adjoint_scheme, threads
    )

    if penalty is not None:
        p_value, p_grad = stability_penalty(terms.tensors[0], *penalty)
        value += p_value
        gA = gA + p_grad

    phi, psi, factor, D = model.phi, model.psi, terms.factor, terms.D
    X = M1 if model.C is None else model.C.T @ M1
    Y1 = factor.solve(X.T).T
    P = Y1 - psi @ factor.solve_transposed(phi.T @ Y1)
    grad_phi = -2.0 * P @ (phi.T @ phi)
    grad_psi = 2.0 * D @ (M1.T @ terms.CD) + psi_init

    if isinstance(model.dynamics, StableLatentParams):
        tensors = pullback(model.dynamics, gA, gH, gB)
    else:
        tensors = {"A": gA, "H": gH, "B": gB}

    return value, AmbientGradient(phi=grad_phi, psi=grad_psi, tensors=tensors,
                                  grad_A=gA, grad_H=gH, grad_B=gB)


def model_to_point(model: RomModel) -> ProductPoint:
    return ProductPoint(
        grassmann=GrassmannPoint(model.phi),
        stiefel=StiefelPoint(model.psi),
        euclid={k: np.array(v, copy=True) for k, v in model.dynamics.as_dict().items()},
    )


def point_to_model(point: ProductPoint, template: RomModel) -> RomModel:
    cls = StableLatentParams if template.is_stable else RawLatentTensors
    return replace(template, phi=point.grassmann.frame, psi=point.stiefel.frame,
                   dynamics=cls.from_dict(point.euclid))


def block_factors(block: str, model: RomModel) -> List[str]:
    keys = list(model.dynamics.as_dict())
    if block == "projection":
        return ["grassmann", "stiefel"]
    if block == "tensors":
        return keys
    if block == "joint":
        return ["grassmann", "stiefel"] + keys
    raise ConfigError("train.blocks", f"unknown block '{block}'")


def make_objective(template: RomModel, dataset: SnapshotDataset, config: TrainConfig,
                   penalty: Optional[Tuple[float, float]] = None):
    """Objective over ProductPoints for the optimizers."""

    def objective(point: ProductPoint):
        model = point_to_model(point, template)
        value, g = gradient(model, dataset, step_factor=config.step_factor,
                            adjoint_scheme=config.adjoint_scheme, threads=config.threads,
                            penalty=penalty)
        return value, TangentVector(grassmann=g.phi, stiefel=g.psi, euclid=g.tensors)

    return objective


def _run_block(model, dataset, config, block, iterations, optimizer, penalty) -> Tuple[RomModel, OptimizerResult]:
    objective = make_objective(model, dataset, config, penalty)
    active = block_factors(block, model)
    point = model_to_point(model)
    if optimizer == "adam":
        result = riemannian_adam(objective, point, active, iterations, config.adam, config.gtol)
    else:
        result = riemannian_lbfgs(objective, point, active, iterations, config.lbfgs, config.gtol)
    return point_to_model(result.point, model), result


def _penalty_needed(model: RomModel) -> bool:
    if model.is_stable:
        return False
    A = latent_tensors(model)[0]
    return spectral_abscissa(A) >= 0


def optimize(
    model: RomModel,
    dataset: SnapshotDataset,
    config: Optional[TrainConfig] = None,
    stage: str = "train",
) -> Tuple[RomModel, pd.DataFrame]:
    """
    Run the horizon schedule and coordinate-descent blocks.

    For unconstrained dynamics the stability penalty is either always on, off,
    or ("auto") switched on after the schedule when A has an eigenvalue with
    non-negative real part; the final joint block is then repeated with a
    growing penalty weight until A is Hurwitz or the round limit is reached.

    Returns:
        (trained model, history DataFrame with one row per iteration)
    """
    config = config or TrainConfig()
    config.validate()
    model = replace(model, phi=GrassmannPoint(model.phi).reconditioned().frame)

    penalty = None
    if not model.is_stable and config.penalty.mode == "always":
        penalty = (config.penalty.weight, config.penalty.t_final)

    rows = []

    def record(result: OptimizerResult, horizon, block, optimizer, round_):
        for row in result.history:
            rows.append({"stage": stage, "horizon": horizon, "block": block, "optimizer": optimizer,
                         "penalty_round": round_, **row})

    logger.info("=" * 60)
    logger.info(f"Optimizing ({stage}): method={model.method}, r={model.r}, horizons={config.horizons}")
    logger.info("=" * 60)

    last_horizon_data = dataset
    for horizon in config.horizons:
        data = dataset.truncated(horizon) if np.isfinite(horizon) else dataset
        last_horizon_data = data
        optimizer = "adam" if config.optimizer == "adam" or (
            config.optimizer == "lbfgs-adam" and horizon >= config.adam_after) else "lbfgs"
        for block, iterations in config.blocks:
            model, result = _run_block(model, data, config, block, iterations, optimizer, penalty)
            record(result, horizon, block, optimizer, 0)
            logger.info(f"horizon={horizon:g} block={block:<10} {optimizer}: loss={result.value:.6e} "
                        f"iterations={len(result.history) - 1} ({result.reason})")

    if not model.is_stable and config.penalty.mode == "auto":
        weight = config.penalty.weight
        for round_ in range(1, config.penalty.max_rounds + 1):
            if not _penalty_needed(model):
                break
            logger.info(f"A is not Hurwitz; re-optimizing with stability penalty weight {weight:.3e}")
            penalty = (weight, config.penalty.t_final)
            iterations = max((it for b, it in config.blocks if b == "joint"), default=100)
            model, result = _run_block(model, last_horizon_data, config, "joint", iterations, "lbfgs", penalty)
            record(result, config.horizons[-1], "joint", "lbfgs", round_)
            weight *= config.penalty.growth
        else:
            if _penalty_needed(model):
                logger.warning("Stability penalty rounds exhausted; model may still be unstable")

    history = pd.DataFrame(rows, columns=["stage", "horizon", "block", "optimizer", "penalty_round",
                                          "iteration", "loss", "grad_norm", "step"])
    return model, history


def check_gradient(
    model: RomModel,
    dataset: SnapshotDataset,
    eps: float = 1e-6,
    step_factor: int = 10,
    rng: Optional[np.random.Generator] = None,
    samples: int = 5,
) -> Dict[str, float]:
    """
    Relative error between adjoint gradients and central finite differences.

    The error of a component is max |fd - grad| over the sampled entries,
    divided by the largest sampled magnitude.

    Checks ``samples`` random entries of every component; the Grassmann
    component is compared after removing the Phi^T Phi factor.
    """
    rng = rng or np.random.default_rng(0)
    _, g = gradient(model, dataset, step_factor=step_factor)
    euclid_phi = np.linalg.solve(model.phi.T @ model.phi, g.phi.T).T
    targets = {"phi": (model.phi, euclid_phi), "psi": (model.psi, g.psi)}
    params = model.dynamics.as_dict()
    for k, v in params.items():
        targets[k] = (v, g.tensors[k])

    errors = {}
    for name, (array, grad) in targets.items():
        fds, exact = [], []
        for flat in rng.choice(array.size, size=min(samples, array.size), replace=False):
            idx = np.unravel_index(flat, array.shape)
            vals = []
            for sign in (1.0, -1.0):
                bumped = {k: np.array(v, copy=True) for k, v in params.items()}
                phi, psi = model.phi.copy(), model.psi.copy()
                target = {"phi": phi, "psi": psi}.get(name, bumped.get(name))
                target[idx] += sign * eps
                cls = StableLatentParams if model.is_stable else RawLatentTensors
                m2 = replace(model, phi=phi, psi=psi, dynamics=cls.from_dict(bumped))
                vals.append(loss(m2, dataset, step_factor=step_factor))
            fds.append((vals[0] - vals[1]) / (2 * eps))
            exact.append(grad[idx])
        fds, exact = np.array(fds), np.array(exact)
        scale = max(np.abs(exact).max(), np.abs(fds).max(), 1e-12)
        errors[name] = float(np.abs(fds - exact).max() / scale)
    return errors
