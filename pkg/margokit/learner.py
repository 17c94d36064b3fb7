"""The marginal transfer estimator.

Training points are the extended pairs (P_hat^(i), X_ij); a test bag is
predicted through its own empirical marginal, so nothing about a test task
beyond its unlabeled points is ever used.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from helpers.prop_loader import MethodFamily, Trainer, TrainSettings
from helpers.utils import child_seed
from margokit.exceptions import (
    DataError,
    DimensionMismatchError,
    EmptyBagError,
    MissingLabelsError,
    SpecCompatibilityError,
)
from margokit.features import (
    NystromMap,
    ProductRffMap,
    RffMap,
    embed_bag_rff,
    fit_nystrom,
    nystrom_transform,
    product_features,
    product_features_from_embedding,
    rff_rows,
    sample_product_rff,
    sample_rff,
)
from margokit.kernels import (
    Bag,
    EmbeddingCache,
    ExtendedSet,
    KernelSpec,
    KpKind,
    KxKind,
    as_matrix,
    base_gram,
    distribution_gram,
    extended_gram,
)
from margokit.solver import (
    LossKind,
    dual_costs,
    loss_values,
    solve_dual_svm,
    solve_dual_svr,
    solve_linear,
)

logger = logging.getLogger(__name__)

FeatureMap = Union[RffMap, ProductRffMap, NystromMap]

POOLED_BAG_ID = "pooled"


class Method(str, Enum):
    exact_dual = "exact_dual"
    rff_linear = "rff_linear"
    nystrom_linear = "nystrom_linear"
    pooling_exact = "pooling_exact"
    pooling_linear = "pooling_linear"

    @property
    def exact(self) -> bool:
        return self in (Method.exact_dual, Method.pooling_exact)

    @property
    def pooling(self) -> bool:
        return self in (Method.pooling_exact, Method.pooling_linear)


def resolve_method(family: MethodFamily, trainer: Trainer) -> Method:
    if family == MethodFamily.pooling:
        return Method.pooling_exact if trainer == Trainer.exact else Method.pooling_linear
    return {
        Trainer.exact: Method.exact_dual,
        Trainer.rff: Method.rff_linear,
        Trainer.nystrom: Method.nystrom_linear,
    }[trainer]


@dataclass(frozen=True, eq=False)
class DualPayload:
    """Support expansion: f = sum_i coef_i k_bar(support_i, .), coef_i = alpha_i y_i."""

    support: ExtendedSet
    coef: np.ndarray
    objective: float
    gap: float
    converged: bool


@dataclass(frozen=True, eq=False)
class LinearPayload:
    weights: np.ndarray
    feature_map: FeatureMap
    objective: float
    gap: float
    converged: bool


@dataclass(frozen=True)
class ModelMetadata:
    seeds: Dict[str, int]
    bag_sizes: List[int]
    task_ids: List[str]
    created_at: Optional[str] = None


@dataclass(frozen=True, eq=False)
class Model:
    method: Method
    spec: KernelSpec
    lam: float
    loss_kind: LossKind
    epsilon: float
    d: int
    payload: Union[DualPayload, LinearPayload]
    metadata: ModelMetadata = field(default_factory=lambda: ModelMetadata({}, [], []))

    def __post_init__(self) -> None:
        expected = DualPayload if self.method.exact else LinearPayload
        if not isinstance(self.payload, expected):
            raise SpecCompatibilityError(f"method {self.method.value} needs a {expected.__name__}")
        if self.method.pooling and self.spec.kp_kind != KpKind.constant:
            raise SpecCompatibilityError("pooling models must carry a constant k_P")


class EvalReport(BaseModel):
    loss: LossKind
    per_bag_risk: Dict[str, float]
    mean_risk: float
    per_bag_error: Optional[Dict[str, float]] = None
    error_rate: Optional[float] = None
    rmse: Optional[float] = None


def _check_training_bags(bags: Sequence[Bag]) -> int:
    if not bags:
        raise EmptyBagError("training needs at least one bag")
    d = bags[0].d
    for bag in bags:
        if not bag.labeled:
            raise MissingLabelsError(f"bag {bag.task_id!r} has no labels")
        if bag.d != d:
            raise DimensionMismatchError(f"bag {bag.task_id!r} has dimension {bag.d}, expected {d}")
    return d


def _pooled_set(xs: np.ndarray) -> ExtendedSet:
    # k_P is constant for pooling, so every point can share one placeholder bag
    return ExtendedSet((Bag(POOLED_BAG_ID, xs[:1]),), np.zeros(xs.shape[0], dtype=np.int64), xs)


def _default_epsilon(labels: np.ndarray) -> float:
    return 0.1 * float(np.std(labels))


def train(
    bags: Sequence[Bag],
    spec: KernelSpec,
    lam: float,
    loss_kind: Union[LossKind, str],
    method: Union[Method, str],
    seed: int = 0,
    settings: Optional[TrainSettings] = None,
    pooling_features: Trainer = Trainer.rff,
    created_at: Optional[str] = None,
) -> Model:
    """Minimize (1/N) sum_i (1/n_i) sum_j loss(f(X~_ij), Y_ij) + lam ||f||^2."""
    method = Method(method)
    loss_kind = LossKind(loss_kind)
    settings = settings or TrainSettings()
    d = _check_training_bags(bags)
    if settings.concatenate_pooling and not method.pooling:
        raise SpecCompatibilityError("concatenated costs only apply to pooling methods")

    labels = np.concatenate([b.labels for b in bags])
    sizes = [b.n for b in bags]
    epsilon = 0.0
    if loss_kind == LossKind.eps_insensitive:
        epsilon = settings.epsilon if settings.epsilon is not None else _default_epsilon(labels)
    costs = dual_costs(sizes, lam, settings.concatenate_pooling)
    eff_spec = spec.pooled() if method.pooling else spec
    seeds = {
        "master": seed,
        "features": child_seed(seed, "features"),
        "solver": child_seed(seed, "solver"),
    }
    logger.info(
        "train method=%s loss=%s bags=%d points=%d lambda=%g",
        method.value, loss_kind.value, len(bags), int(labels.shape[0]), lam,
    )

    payload: Union[DualPayload, LinearPayload]
    if method.exact:
        ext = ExtendedSet.from_bags(bags)
        gram = extended_gram(ext, None, eff_spec, EmbeddingCache())
        if loss_kind == LossKind.hinge:
            sol = solve_dual_svm(gram, labels, costs, settings.tol, settings.max_iter, seeds["solver"])
        else:
            sol = solve_dual_svr(gram, labels, costs, epsilon, settings.tol, settings.max_iter, seeds["solver"])
        keep = np.flatnonzero(sol.coef != 0.0)
        # the dual objective is on the ½-scaled problem
        objective = 2.0 * lam * sol.objective
        payload = DualPayload(ext.subset(keep), sol.coef[keep], objective, 2.0 * lam * sol.gap, sol.converged)
        logger.info("train exact support=%d of %d converged=%s", keep.size, len(ext), sol.converged)
    else:
        feature_map, features = _fit_features(bags, eff_spec, method, settings, seeds["features"], pooling_features)
        lin = solve_linear(
            features,
            labels,
            loss_kind,
            lam,
            sizes,
            tol=settings.tol,
            max_iter=settings.linear_max_epochs,
            epsilon=epsilon,
            seed=seeds["solver"],
            costs=costs,
        )
        payload = LinearPayload(lin.weights, feature_map, lin.objective, 2.0 * lam * lin.gap, lin.converged)
        logger.info("train linear dim=%d epochs=%d converged=%s", features.shape[1], lin.epochs, lin.converged)

    metadata = ModelMetadata(seeds, sizes, [b.task_id for b in bags], created_at)
    return Model(method, eff_spec, float(lam), loss_kind, float(epsilon), d, payload, metadata)


def _fit_features(
    bags: Sequence[Bag],
    spec: KernelSpec,
    method: Method,
    settings: TrainSettings,
    seed: int,
    pooling_features: Trainer,
) -> Tuple[FeatureMap, np.ndarray]:
    if method == Method.rff_linear:
        prff = sample_product_rff(seed, settings.L, settings.Q, spec, bags[0].d)
        return prff, np.vstack([product_features(prff, b) for b in bags])
    if method == Method.nystrom_linear:
        ext = ExtendedSet.from_bags(bags)
        nmap = fit_nystrom(ext, spec, min(settings.m, len(ext)), seed, settings.eps_eig)
        return nmap, nystrom_transform(nmap, ext)

    xs = np.vstack([b.points for b in bags])
    if pooling_features == Trainer.rff:
        if spec.kx_kind != KxKind.gaussian:
            raise SpecCompatibilityError("RFF pooling requires a gaussian k_X")
        rff = sample_rff(seed, settings.Q, spec.sigma_x, xs.shape[1])
        return rff, rff_rows(rff, xs)
    if pooling_features == Trainer.nystrom:
        ext = _pooled_set(xs)
        nmap = fit_nystrom(ext, spec, min(settings.m, len(ext)), seed, settings.eps_eig)
        return nmap, nystrom_transform(nmap, ext)
    raise SpecCompatibilityError("pooling_linear needs rff or nystrom features")


class _KernelRows:
    """k_bar between one test bag's points and a fixed extended set.

    k_P against every reference bag is computed once; chunks only pay for k_X.
    """

    def __init__(self, spec: KernelSpec, test_bag: Bag, reference: ExtendedSet) -> None:
        self._spec = spec
        self._reference = reference
        kp = distribution_gram([test_bag], reference.bags, spec, EmbeddingCache())[0]
        self._kp = kp[reference.bag_index]

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        kx = base_gram(self._spec.kx_kind, self._spec.sigma_x, xs, self._reference.xs)
        return kx * self._kp[None, :]


def predict_bag(model: Model, test_points: Sequence[Sequence[float]], chunk_size: int = 4096) -> np.ndarray:
    """Real-valued f(P_hat^T, x_j) for every row of the test bag; callers apply sign."""
    pts = as_matrix(test_points, "test_points")
    if pts.shape[0] < 1:
        raise EmptyBagError("test bag has no points")
    if pts.shape[1] != model.d:
        raise DimensionMismatchError(f"model expects dimension {model.d}, got {pts.shape[1]}")
    test_bag = Bag("test", pts)
    payload = model.payload
    out = np.empty(pts.shape[0])

    if isinstance(payload, DualPayload):
        if payload.coef.size == 0:
            out[:] = 0.0
            return out
        rows = _KernelRows(model.spec, test_bag, payload.support)
        transform = lambda xs: rows(xs) @ payload.coef  # noqa: E731
    else:
        fmap = payload.feature_map
        if isinstance(fmap, ProductRffMap):
            z_p = embed_bag_rff(fmap.inner, test_bag)
            transform = lambda xs: product_features_from_embedding(fmap, z_p, xs) @ payload.weights  # noqa: E731
        elif isinstance(fmap, RffMap):
            transform = lambda xs: rff_rows(fmap, xs) @ payload.weights  # noqa: E731
        else:
            rows = _KernelRows(fmap.spec, test_bag, fmap.landmarks)
            transform = lambda xs: (rows(xs) @ fmap.whitening.T) @ payload.weights  # noqa: E731

    for start in range(0, pts.shape[0], chunk_size):
        stop = min(start + chunk_size, pts.shape[0])
        out[start:stop] = transform(pts[start:stop])
    return out


def sign_of(margins: np.ndarray) -> np.ndarray:
    """sign with sign(0) = +1."""
    return np.where(margins >= 0.0, 1.0, -1.0)


def evaluate(model: Model, labeled_test_bags: Sequence[Bag], chunk_size: int = 4096) -> EvalReport:
    """Per-bag average loss, with every bag weighted equally regardless of size."""
    if not labeled_test_bags:
        raise EmptyBagError("evaluation needs at least one bag")
    per_bag_risk: Dict[str, float] = {}
    per_bag_error: Dict[str, float] = {}
    per_bag_mse: List[float] = []
    for bag in labeled_test_bags:
        if not bag.labeled:
            raise MissingLabelsError(f"bag {bag.task_id!r} has no labels")
        if bag.task_id in per_bag_risk:
            raise DataError(f"duplicate task id {bag.task_id!r} in evaluation set")
        margins = predict_bag(model, bag.points, chunk_size)
        per_bag_risk[bag.task_id] = float(np.mean(loss_values(model.loss_kind, margins, bag.labels, model.epsilon)))
        if model.loss_kind == LossKind.hinge:
            per_bag_error[bag.task_id] = float(np.mean(sign_of(margins) != bag.labels))
        else:
            per_bag_mse.append(float(np.mean((margins - bag.labels) ** 2)))

    report = EvalReport(
        loss=model.loss_kind,
        per_bag_risk=per_bag_risk,
        mean_risk=float(np.mean(list(per_bag_risk.values()))),
    )
    if model.loss_kind == LossKind.hinge:
        report.per_bag_error = per_bag_error
        report.error_rate = float(np.mean(list(per_bag_error.values())))
    else:
        report.rmse = float(np.sqrt(np.mean(per_bag_mse)))
    return report
