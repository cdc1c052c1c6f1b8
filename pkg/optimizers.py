"""
First-order and quasi-Newton optimizers on ProductPoint manifolds.

An objective maps a ProductPoint to ``(value, ambient_gradient)``. The
ambient gradient is projected onto the tangent space here, so callers may
return Euclidean gradients for the Stiefel and Euclidean factors and the
metric-scaled gradient for the Grassmann factor. A value of ``inf`` (or an
objective raising NumericalError) marks an inadmissible point: line searches
backtrack past it.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from errors import NumericalError
from manifolds import (
    ProductPoint,
    TangentVector,
    metric,
    norm,
    project_tangent,
    retract,
    transport,
    zero_tangent,
)

logger = logging.getLogger(__name__)

Objective = Callable[[ProductPoint], Tuple[float, Optional[TangentVector]]]


@dataclass
class LbfgsConfig:
    memory: int = 10
    c1: float = 1e-4
    contraction: float = 0.5
    initial_step: float = 1.0
    max_backtracks: int = 30


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


@dataclass
class OptimizerResult:
    point: ProductPoint
    value: float
    history: List[Dict[str, float]] = field(default_factory=list)
    reason: str = "max_iter"


def safe_call(objective: Objective, point: ProductPoint) -> Tuple[float, Optional[TangentVector]]:
    """Evaluate the objective, mapping numerical failures to ``inf``."""
    try:
        value, grad = objective(point)
    except NumericalError as exc:
        logger.debug(f"Objective rejected trial point: {exc}")
        return float("inf"), None
    if not np.isfinite(value) or grad is None or not grad.is_finite():
        return float("inf"), None
    return float(value), grad


def _start(objective: Objective, x0: ProductPoint, active: Iterable[str]):
    value, grad = safe_call(objective, x0)
    if not np.isfinite(value):
        value, grad = objective(x0)
        raise NumericalError(f"objective is not finite at the starting point ({value})")
    return value, project_tangent(x0, grad).masked(active)


def armijo_search(
    objective: Objective,
    x: ProductPoint,
    direction: TangentVector,
    value: float,
    slope: float,
    alpha0: float,
    config: LbfgsConfig,
) -> Optional[Tuple[float, ProductPoint, float, TangentVector]]:
    """
    Backtracking search for f(R_x(alpha d)) <= f(x) + c1 alpha <grad, d>.

    Returns:
        (alpha, new point, new value, new ambient gradient) or None on failure
    """
    alpha = alpha0
    for _ in range(config.max_backtracks):
        try:
            trial = retract(x, direction, alpha)
        except NumericalError:
            alpha *= config.contraction
            continue
        f_trial, g_trial = safe_call(objective, trial)
        if np.isfinite(f_trial) and f_trial <= value + config.c1 * alpha * slope:
            return alpha, trial, f_trial, g_trial
        alpha *= config.contraction
    return None


def _two_loop(x: ProductPoint, grad: TangentVector, pairs) -> TangentVector:
    q = grad
    coeffs = []
    for s, y, rho in reversed(pairs):
        a = rho * metric(x, s, q)
        coeffs.append(a)
        q = q - a * y
    s, y, _ = pairs[-1]
    gamma = metric(x, s, y) / metric(x, y, y)
    r = gamma * q
    for (s, y, rho), a in zip(pairs, reversed(coeffs)):
        b = rho * metric(x, y, r)
        r = r + (a - b) * s
    return -r


def riemannian_lbfgs(
    objective: Objective,
    x0: ProductPoint,
    active: Iterable[str],
    max_iter: int,
    config: Optional[LbfgsConfig] = None,
    gtol: float = 1e-10,
) -> OptimizerResult:
    """
    Limited-memory BFGS with Armijo backtracking on a product manifold.

    Curvature pairs are transported to every new iterate. A failed line search
    clears the memory once; a second failure switches to steepest descent for
    the rest of the run, and a failure in steepest descent stops the run.

    Args:
        objective: point -> (value, ambient gradient)
        x0: Starting point
        active: Names of the factors being optimized (others stay fixed)
        max_iter: Iteration budget
        config: Line-search and memory settings
        gtol: Stop when the Riemannian gradient norm drops below this

    Returns:
        OptimizerResult
    """
    config = config or LbfgsConfig()
    active = list(active)
    x = x0
    f, g = _start(objective, x, active)
    pairs = deque(maxlen=config.memory)
    restarted = steepest = False
    history = [{"iteration": 0, "loss": f, "grad_norm": norm(x, g), "step": 0.0}]
    reason = "max_iter"

    for it in range(1, max_iter + 1):
        gnorm = norm(x, g)
        if gnorm <= gtol:
            reason = "gradient_tolerance"
            break

        if steepest or not pairs:
            d = -g
            alpha0 = config.initial_step if pairs or steepest else min(config.initial_step, 1.0 / gnorm)
        else:
            d = _two_loop(x, g, list(pairs))
            alpha0 = config.initial_step
        slope = metric(x, g, d)
        if slope >= 0:
            logger.debug("L-BFGS direction is not a descent direction; resetting memory")
            pairs.clear()
            d, slope, alpha0 = -g, -gnorm ** 2, min(config.initial_step, 1.0 / gnorm)

        found = armijo_search(objective, x, d, f, slope, alpha0, config)
        if found is None:
            pairs.clear()
            if steepest:
                reason = "line_search_failed"
                logger.info(f"Steepest-descent line search failed at iteration {it}; stopping")
                break
            if restarted:
                logger.info(f"Line search failed again at iteration {it}; falling back to steepest descent")
                steepest = True
            else:
                logger.info(f"Line search failed at iteration {it}; restarting L-BFGS memory")
                restarted = True
            continue

        alpha, x_new, f_new, G_new = found
        g_new = project_tangent(x_new, G_new).masked(active)
        if not steepest:
            s = transport(x, x_new, alpha * d)
            y = g_new - transport(x, x_new, g)
            moved = deque(maxlen=config.memory)
            for ps, py, prho in pairs:
                moved.append((transport(x, x_new, ps), transport(x, x_new, py), prho))
            pairs = moved
            sy = metric(x_new, s, y)
            if sy > 1e-12 * norm(x_new, s) * norm(x_new, y):
                pairs.append((s, y, 1.0 / sy))

        x, f, g = x_new, f_new, g_new
        history.append({"iteration": it, "loss": f, "grad_norm": norm(x, g), "step": alpha})
        logger.debug(f"L-BFGS it {it}: loss={f:.6e} |grad|={history[-1]['grad_norm']:.3e} step={alpha:.3e}")

    return OptimizerResult(point=x, value=f, history=history, reason=reason)


def _componentwise(t: TangentVector, fn) -> TangentVector:
    return TangentVector(
        grassmann=None if t.grassmann is None else fn(t.grassmann),
        stiefel=None if t.stiefel is None else fn(t.stiefel),
        euclid={k: fn(v) for k, v in t.euclid.items()},
    )


def _zip_componentwise(a: TangentVector, b: TangentVector, fn) -> TangentVector:
    return TangentVector(
        grassmann=None if a.grassmann is None else fn(a.grassmann, b.grassmann),
        stiefel=None if a.stiefel is None else fn(a.stiefel, b.stiefel),
        euclid={k: fn(v, b.euclid[k]) for k, v in a.euclid.items()},
    )


def riemannian_adam(
    objective: Objective,
    x0: ProductPoint,
    active: Iterable[str],
    max_iter: int,
    config: Optional[AdamConfig] = None,
    gtol: float = 1e-10,
) -> OptimizerResult:
    """
    Riemannian Adam (AdamW when ``weight_decay`` > 0).

    The first moment is transported to each new iterate; the second moment is
    kept element-wise in ambient coordinates. Weight decay is decoupled and acts
    on the active Euclidean factors only. A step that lands on an inadmissible
    point is rejected and the learning rate halved.
    """
    config = config or AdamConfig()
    active = list(active)
    x = x0
    f, g = _start(objective, x, active)
    m = zero_tangent(x)
    v = zero_tangent(x)
    lr = config.lr
    history = [{"iteration": 0, "loss": f, "grad_norm": norm(x, g), "step": 0.0}]
    reason = "max_iter"
    b1, b2 = config.beta1, config.beta2

    for it in range(1, max_iter + 1):
        gnorm = norm(x, g)
        if gnorm <= gtol:
            reason = "gradient_tolerance"
            break

        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * _componentwise(g, np.square)
        m_hat = m_new * (1.0 / (1.0 - b1 ** it))
        v_hat = v_new * (1.0 / (1.0 - b2 ** it))
        d = _zip_componentwise(m_hat, v_hat, lambda a, b: a / (np.sqrt(b) + config.eps))
        d = project_tangent(x, d).masked(active)
        if config.weight_decay > 0:
            for k in x.euclid:
                if k in active:
                    d.euclid[k] = d.euclid[k] + config.weight_decay * x.euclid[k]

        try:
            x_new = retract(x, d, -lr)
            f_new, G_new = safe_call(objective, x_new)
        except NumericalError:
            f_new, G_new = float("inf"), None
        if not np.isfinite(f_new):
            lr *= 0.5
            logger.debug(f"Adam step rejected at iteration {it}; lr -> {lr:.3e}")
            if lr < 1e-12:
                reason = "step_rejected"
                break
            continue

        m = transport(x, x_new, m_new)
        v = v_new
        x, f = x_new, f_new
        g = project_tangent(x, G_new).masked(active)
        history.append({"iteration": it, "loss": f, "grad_norm": norm(x, g), "step": lr})
        logger.debug(f"Adam it {it}: loss={f:.6e} |grad|={history[-1]['grad_norm']:.3e}")

    return OptimizerResult(point=x, value=f, history=history, reason=reason)
