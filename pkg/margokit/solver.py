"""Training back-ends.

Everything here solves the ½-scaled problem

    min_f  sum_i c_i * loss(f(x_i), y_i) + ½ ||f||^2,

which is (1/N) sum_i (1/n_i) sum_j loss + lambda ||f||^2 divided by 2*lambda,
so c_i = 1 / (2 lambda N n_i). No offset term anywhere.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Union

import numpy as np

from margokit.exceptions import DimensionMismatchError, NonFiniteInputError
from margokit.kernels import min_eigenvalue_ok

logger = logging.getLogger(__name__)

GREEDY_LIMIT = 2000
PSD_CHECK_LIMIT = 3000
PSD_JITTER = 1e-10


class LossKind(str, Enum):
    hinge = "hinge"
    eps_insensitive = "eps_insensitive"


def loss_values(
    kind: Union[LossKind, str], t: np.ndarray, y: np.ndarray, epsilon: float = 0.1
) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if LossKind(kind) == LossKind.hinge:
        return np.maximum(0.0, 1.0 - y * t)
    return np.maximum(0.0, np.abs(t - y) - epsilon)


def loss_eval(kind: Union[LossKind, str], t: float, y: float, epsilon: float = 0.1) -> float:
    return float(loss_values(kind, np.array([t]), np.array([y]), epsilon)[0])


def dual_costs(task_sizes: Sequence[int], lam: float, concatenate: bool = False) -> np.ndarray:
    """Per-example box bounds c_i for rows grouped by task, in task order."""
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    sizes = np.asarray(task_sizes, dtype=np.int64)
    if sizes.size == 0 or np.any(sizes < 1):
        raise ValueError("task sizes must be a nonempty list of positive counts")
    if concatenate:
        return np.full(int(sizes.sum()), 1.0 / (2.0 * lam * sizes.sum()))
    return np.repeat(1.0 / (2.0 * lam * sizes.size * sizes), sizes)


def _check_labels(labels: np.ndarray, kind: LossKind) -> None:
    if not np.all(np.isfinite(labels)):
        raise NonFiniteInputError("labels contain NaN or infinite values")
    if kind == LossKind.hinge and not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("hinge loss needs labels in {-1, +1}")


@dataclass(frozen=True)
class DualSolution:
    """Dual variables over the training Gram.

    For hinge, `alphas` are the box-constrained multipliers and the
    expansion coefficients are alpha_i * y_i. For eps_insensitive the
    alphas are the signed coefficients beta_i in [-c_i, c_i] directly.
    """

    alphas: np.ndarray
    costs: np.ndarray
    labels: np.ndarray
    loss_kind: LossKind
    objective: float
    gap: float
    kkt_violation: float
    iterations: int
    converged: bool

    @property
    def coef(self) -> np.ndarray:
        if self.loss_kind == LossKind.hinge:
            return self.alphas * self.labels
        return self.alphas


def predict_dual(sol: Union[DualSolution, np.ndarray], kernel_row: np.ndarray) -> Union[float, np.ndarray]:
    """f(x) = sum_i alpha_i y_i k_bar(X_i, x); `kernel_row` may also be a matrix of rows."""
    coef = sol.coef if isinstance(sol, DualSolution) else np.asarray(sol, dtype=np.float64)
    row = np.asarray(kernel_row, dtype=np.float64)
    if row.shape[-1] != coef.shape[0]:
        raise DimensionMismatchError(f"kernel row has length {row.shape[-1]}, expected {coef.shape[0]}")
    out = row @ coef
    return float(out) if out.ndim == 0 else out


def _prepare_gram(gram: np.ndarray) -> np.ndarray:
    K = np.array(gram, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionMismatchError(f"gram must be square, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise NonFiniteInputError("gram contains NaN or infinite values")
    if K.shape[0] <= PSD_CHECK_LIMIT:
        ok, min_eig = min_eigenvalue_ok(K)
        if not ok:
            logger.warning("gram is not PSD within tolerance min_eig=%.3g; adding jitter=%g", min_eig, PSD_JITTER)
            K[np.diag_indices_from(K)] += PSD_JITTER
    return K


def _prepare_costs(costs: Sequence[float], size: int) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64).reshape(-1)
    if c.shape[0] != size:
        raise DimensionMismatchError(f"{c.shape[0]} costs for {size} examples")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValueError("costs must be finite and nonnegative")
    return c


class _CoordinateOrder:
    """Greedy max-violation order for small problems, seeded permutation sweeps above."""

    def __init__(self, size: int, seed: int, greedy_limit: int) -> None:
        self.greedy = size <= greedy_limit
        self._rng = np.random.default_rng(seed)
        self._size = size

    def sweep(self) -> np.ndarray:
        return self._rng.permutation(self._size)


def _svm_violation(grad: np.ndarray, alpha: np.ndarray, c: np.ndarray) -> np.ndarray:
    # projected gradient of the (maximized) dual; zero-cost coordinates are pinned
    pg = grad.copy()
    at_low = alpha <= 0.0
    at_high = alpha >= c
    pg[at_low] = np.maximum(grad[at_low], 0.0)
    pg[at_high] = np.minimum(pg[at_high], 0.0)
    pg[c <= 0.0] = 0.0
    return np.abs(pg)


def solve_dual_svm(
    gram: np.ndarray,
    labels: Sequence[float],
    costs: Sequence[float],
    tol: float = 1e-6,
    max_iter: int = 200_000,
    seed: int = 0,
    greedy_limit: int = GREEDY_LIMIT,
) -> DualSolution:
    """max_a  sum a_i - ½ sum a_i a_j y_i y_j K_ij   s.t. 0 <= a_i <= c_i."""
    K = _prepare_gram(gram)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    size = K.shape[0]
    if y.shape[0] != size:
        raise DimensionMismatchError(f"{y.shape[0]} labels for a {size} x {size} gram")
    _check_labels(y, LossKind.hinge)
    c = _prepare_costs(costs, size)

    Q = (y[:, None] * y[None, :]) * K
    diag = np.diag(Q).copy()
    alpha = np.zeros(size)
    grad = np.ones(size)
    order = _CoordinateOrder(size, seed, greedy_limit)

    def step(i: int) -> None:
        g = grad[i]
        if diag[i] > 0:
            new = min(max(alpha[i] + g / diag[i], 0.0), c[i])
        elif g > 0:
            new = c[i]
        elif g < 0:
            new = 0.0
        else:
            return
        delta = new - alpha[i]
        if delta != 0.0:
            alpha[i] = new
            grad[:] -= delta * Q[:, i]

    iterations = 0
    converged = False
    violation = float(_svm_violation(grad, alpha, c).max())
    while iterations < max_iter:
        if violation < tol:
            converged = True
            break
        if order.greedy:
            viol = _svm_violation(grad, alpha, c)
            # np.argmax takes the lowest index on ties
            step(int(np.argmax(viol)))
            iterations += 1
        else:
            for i in order.sweep():
                step(int(i))
                iterations += 1
                if iterations >= max_iter:
                    break
        violation = float(_svm_violation(grad, alpha, c).max())
    converged = converged or violation < tol

    q_alpha = Q @ alpha
    dual = float(alpha.sum() - 0.5 * alpha @ q_alpha)
    primal = float(0.5 * alpha @ q_alpha + c @ np.maximum(0.0, 1.0 - q_alpha))
    gap = max(primal - dual, 0.0)
    if not converged:
        logger.warning("solve_dual_svm hit max_iter=%d kkt=%.3g gap=%.3g", max_iter, violation, gap)
    logger.debug("solve_dual_svm done size=%d iters=%d kkt=%.3g converged=%s", size, iterations, violation, converged)
    return DualSolution(alpha, c, y, LossKind.hinge, dual, gap, violation, iterations, converged)


def _svr_step(beta: float, g: float, q: float, c: float, epsilon: float) -> float:
    """Minimize ½ q (b - beta)^2 + g (b - beta) + eps |b| over b in [-c, c]."""
    gp, gn = g + epsilon, g - epsilon
    if q > 0:
        if gp < q * beta:
            new = beta - gp / q
        elif gn > q * beta:
            new = beta - gn / q
        else:
            new = 0.0
        return min(max(new, -c), c)
    if gp < 0:
        return c
    if gn > 0:
        return -c
    return 0.0


def _svr_violation(grad: np.ndarray, beta: np.ndarray, c: np.ndarray, epsilon: float) -> np.ndarray:
    gp, gn = grad + epsilon, grad - epsilon
    viol = np.zeros_like(grad)
    zero = beta == 0.0
    viol[zero] = np.maximum(np.maximum(-gp[zero], gn[zero]), 0.0)
    pos = (beta > 0.0) & (beta < c)
    viol[pos] = np.abs(gp[pos])
    top = (beta >= c) & ~zero
    viol[top] = np.maximum(gp[top], 0.0)
    neg = (beta < 0.0) & (beta > -c)
    viol[neg] = np.abs(gn[neg])
    bottom = (beta <= -c) & ~zero
    viol[bottom] = np.maximum(-gn[bottom], 0.0)
    viol[c <= 0.0] = 0.0
    return viol


def solve_dual_svr(
    gram: np.ndarray,
    targets: Sequence[float],
    costs: Sequence[float],
    epsilon: float,
    tol: float = 1e-6,
    max_iter: int = 200_000,
    seed: int = 0,
    greedy_limit: int = GREEDY_LIMIT,
) -> DualSolution:
    """Kernel eps-insensitive regression without offset, coefficients beta_i in [-c_i, c_i]."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    K = _prepare_gram(gram)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    size = K.shape[0]
    if y.shape[0] != size:
        raise DimensionMismatchError(f"{y.shape[0]} targets for a {size} x {size} gram")
    _check_labels(y, LossKind.eps_insensitive)
    c = _prepare_costs(costs, size)

    diag = np.diag(K).copy()
    beta = np.zeros(size)
    k_beta = np.zeros(size)
    order = _CoordinateOrder(size, seed, greedy_limit)

    def step(i: int) -> None:
        new = _svr_step(beta[i], k_beta[i] - y[i], diag[i], c[i], epsilon)
        delta = new - beta[i]
        if delta != 0.0:
            beta[i] = new
            k_beta[:] += delta * K[:, i]

    iterations = 0
    converged = False
    violation = float(_svr_violation(k_beta - y, beta, c, epsilon).max())
    while iterations < max_iter:
        if violation < tol:
            converged = True
            break
        if order.greedy:
            step(int(np.argmax(_svr_violation(k_beta - y, beta, c, epsilon))))
            iterations += 1
        else:
            for i in order.sweep():
                step(int(i))
                iterations += 1
                if iterations >= max_iter:
                    break
        violation = float(_svr_violation(k_beta - y, beta, c, epsilon).max())
    converged = converged or violation < tol

    k_beta = K @ beta
    quad = 0.5 * float(beta @ k_beta)
    dual = float(y @ beta - epsilon * np.abs(beta).sum() - quad)
    primal = quad + float(c @ loss_values(LossKind.eps_insensitive, k_beta, y, epsilon))
    gap = max(primal - dual, 0.0)
    if not converged:
        logger.warning("solve_dual_svr hit max_iter=%d kkt=%.3g gap=%.3g", max_iter, violation, gap)
    return DualSolution(beta, c, y, LossKind.eps_insensitive, dual, gap, violation, iterations, converged)


@dataclass(frozen=True)
class LinearSolution:
    weights: np.ndarray
    loss_kind: LossKind
    lam: float
    epsilon: float
    duals: np.ndarray
    costs: np.ndarray
    gap: float
    epochs: int
    converged: bool
    objective_trace: List[float] = field(default_factory=list)

    @property
    def objective(self) -> float:
        """Final value of (1/N) sum (1/n_i) sum loss + lambda ||w||^2."""
        return self.objective_trace[-1]


def solve_linear(
    features: np.ndarray,
    labels: Sequence[float],
    loss_kind: Union[LossKind, str],
    lam: float,
    task_sizes: Sequence[int],
    tol: float = 1e-4,
    max_iter: int = 1000,
    epsilon: float = 0.1,
    seed: int = 0,
    concatenate: bool = False,
    costs: Optional[Sequence[float]] = None,
) -> LinearSolution:
    """Weighted dual coordinate descent over explicit features, one epoch per iteration.

    Rows of `features` are grouped by task in the order of `task_sizes`.
    Exits when the duality gap is below tol * (1 + |primal|).
    """
    kind = LossKind(loss_kind)
    Z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f"features {Z.shape} do not match {y.shape[0]} labels")
    if not np.all(np.isfinite(Z)):
        raise NonFiniteInputError("features contain NaN or infinite values")
    _check_labels(y, kind)
    c = dual_costs(task_sizes, lam, concatenate) if costs is None else _prepare_costs(costs, y.shape[0])
    if c.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f"task sizes cover {c.shape[0]} rows, features have {y.shape[0]}")
    if kind == LossKind.eps_insensitive and epsilon < 0:
        raise ValueError("epsilon must be >= 0")

    size = Z.shape[0]
    q_diag = np.einsum("ij,ij->i", Z, Z)
    duals = np.zeros(size)
    w = np.zeros(Z.shape[1])
    rng = np.random.default_rng(seed)
    trace: List[float] = []
    gap = np.inf
    converged = False
    epoch = 0

    for epoch in range(1, max_iter + 1):
        for i in rng.permutation(size):
            z_i = Z[i]
            if kind == LossKind.hinge:
                g = y[i] * float(w @ z_i) - 1.0
                if q_diag[i] > 0:
                    new = min(max(duals[i] - g / q_diag[i], 0.0), c[i])
                else:
                    new = c[i] if g < 0 else (0.0 if g > 0 else duals[i])
                delta = new - duals[i]
                if delta != 0.0:
                    duals[i] = new
                    w += (delta * y[i]) * z_i
            else:
                new = _svr_step(duals[i], float(w @ z_i) - y[i], q_diag[i], c[i], epsilon)
                delta = new - duals[i]
                if delta != 0.0:
                    duals[i] = new
                    w += delta * z_i

        # resynchronize w with the duals to keep drift out of the gap
        w = Z.T @ (duals * y if kind == LossKind.hinge else duals)
        margins = Z @ w
        half_norm = 0.5 * float(w @ w)
        primal = half_norm + float(c @ loss_values(kind, margins, y, epsilon))
        if kind == LossKind.hinge:
            dual = float(duals.sum()) - half_norm
        else:
            dual = float(y @ duals - epsilon * np.abs(duals).sum()) - half_norm
        gap = max(primal - dual, 0.0)
        trace.append(2.0 * lam * primal)
        if gap < tol * (1.0 + abs(primal)):
            converged = True
            break

    if not converged:
        logger.warning("solve_linear hit max_iter=%d gap=%.3g", max_iter, gap)
    logger.debug("solve_linear done rows=%d dim=%d epochs=%d gap=%.3g", size, Z.shape[1], epoch, gap)
    return LinearSolution(w, kind, float(lam), float(epsilon), duals, c, float(gap), epoch, converged, trace)
