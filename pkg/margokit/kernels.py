"""Exact kernels on the extended input space (P_X, x).

The product kernel is k̄((P1, x1), (P2, x2)) = k_P(P1, P2) * k_X(x1, x2), where
k_P is evaluated on kernel mean embeddings of the bags under k'_X. Every
k_P value reduces to averages of k'_X over pairs of bag rows, so those
averages are what gets cached.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, root_validator, validator
from scipy.spatial.distance import cdist

from margokit.exceptions import (
    DimensionMismatchError,
    EmptyBagError,
    NonFiniteInputError,
    NumericalError,
)

logger = logging.getLogger(__name__)

PSD_REL_TOL = 1e-8


class KxKind(str, Enum):
    gaussian = "gaussian"
    linear = "linear"
    # k_X == 1 turns the learner into a pure distributional classifier/regressor
    constant = "constant"


class KpKind(str, Enum):
    gaussian_like = "gaussian_like"
    exponential_inner = "exponential_inner"
    linear_inner = "linear_inner"
    polynomial_inner = "polynomial_inner"
    constant = "constant"


INNER_KP_KINDS = (
    KpKind.linear_inner,
    KpKind.exponential_inner,
    KpKind.polynomial_inner,
)


class KernelSpec(BaseModel):
    """Declarative description of k_X, k'_X and k_P.

    `sigma_x`/`sigma_xp` are only read for gaussian kinds, `sigma_p` for
    gaussian_like, `kappa` for exponential_inner and `degree` for
    polynomial_inner. `kp_kind = constant` is the pooling baseline.
    """

    kx_kind: KxKind = KxKind.gaussian
    sigma_x: float = 1.0
    kxp_kind: KxKind = KxKind.gaussian
    sigma_xp: float = 1.0
    kp_kind: KpKind = KpKind.gaussian_like
    sigma_p: float = 1.0
    kappa: float = 1.0
    degree: int = 2
    kp_normalized: bool = False

    class Config:
        allow_mutation = False

    @validator("sigma_x", "sigma_xp", "sigma_p", "kappa")
    def _strictly_positive(cls, v: float, field: object) -> float:
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{getattr(field, 'name', 'value')} must be finite and > 0")
        return float(v)

    @validator("degree")
    def _degree_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("degree must be >= 1")
        return v

    @validator("kxp_kind")
    def _embedding_kernel(cls, v: KxKind) -> KxKind:
        if v == KxKind.constant:
            raise ValueError("k'_X must be gaussian or linear; a constant embedding carries no information")
        return v

    @root_validator(skip_on_failure=True)
    def _normalization_target(cls, values: Dict) -> Dict:
        if values.get("kp_normalized") and values.get("kp_kind") not in INNER_KP_KINDS:
            raise ValueError("kp_normalized applies to linear_inner, exponential_inner and polynomial_inner only")
        return values

    @property
    def all_gaussian(self) -> bool:
        return (
            self.kx_kind == KxKind.gaussian
            and self.kxp_kind == KxKind.gaussian
            and self.kp_kind == KpKind.gaussian_like
        )

    def pooled(self) -> "KernelSpec":
        return self.with_params(kp_kind=KpKind.constant, kp_normalized=False)

    def with_params(self, **updates: object) -> "KernelSpec":
        return KernelSpec(**{**self.dict(), **updates})


def _check_finite(values: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteInputError(f"{name} contains NaN or infinite values")


def as_vector(x: Sequence[float], name: str = "x") -> np.ndarray:
    vec = np.asarray(x, dtype=np.float64)
    if vec.ndim == 0:
        vec = vec.reshape(1)
    if vec.ndim != 1:
        raise DimensionMismatchError(f"{name} must be a vector, got shape {vec.shape}")
    _check_finite(vec, name)
    return vec


def as_matrix(points: Sequence[Sequence[float]], name: str = "points") -> np.ndarray:
    mat = np.asarray(points, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionMismatchError(f"{name} must be an n x d matrix, got shape {mat.shape}")
    _check_finite(mat, name)
    return mat


@dataclass(frozen=True, eq=False)
class Bag:
    """One task's sample; stands in for the empirical marginal (1/n) sum delta_{X_j}."""

    task_id: str
    points: np.ndarray
    labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2:
            raise DimensionMismatchError(
                f"bag {self.task_id!r}: points must be an n x d matrix, got shape {points.shape}"
            )
        if points.shape[0] < 1:
            raise EmptyBagError(f"bag {self.task_id!r} has no points")
        if points.shape[1] < 1:
            raise DimensionMismatchError(f"bag {self.task_id!r} has zero feature dimension")
        _check_finite(points, f"bag {self.task_id!r} points")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.float64).reshape(-1)
            if labels.shape[0] != points.shape[0]:
                raise DimensionMismatchError(
                    f"bag {self.task_id!r}: {labels.shape[0]} labels for {points.shape[0]} points"
                )
            _check_finite(labels, f"bag {self.task_id!r} labels")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    @property
    def d(self) -> int:
        return int(self.points.shape[1])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @cached_property
    def content_key(self) -> Tuple[str, str]:
        digest = hashlib.sha1()
        digest.update(np.asarray(self.points.shape, dtype="<i8").tobytes())
        digest.update(np.ascontiguousarray(self.points, dtype="<f8").tobytes())
        return self.task_id, digest.hexdigest()

    def unlabeled(self) -> "Bag":
        return Bag(self.task_id, self.points)

    def subset(self, rows: Sequence[int]) -> "Bag":
        idx = np.asarray(rows, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Bag(self.task_id, self.points[idx], labels)

    def same_content(self, other: "Bag") -> bool:
        if self.task_id != other.task_id or not np.array_equal(self.points, other.points):
            return False
        if self.labels is None or other.labels is None:
            return self.labels is None and other.labels is None
        return bool(np.array_equal(self.labels, other.labels))


def base_gram(kind: KxKind, bandwidth: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if xs.shape[1] != ys.shape[1]:
        raise DimensionMismatchError(f"dimension mismatch: {xs.shape[1]} vs {ys.shape[1]}")
    kind = KxKind(kind)
    if kind == KxKind.gaussian:
        if not bandwidth > 0:
            raise ValueError("gaussian bandwidth must be > 0")
        # elementwise (x-y)^2 sums keep k(x, y) == k(y, x) bit for bit
        sq = cdist(xs, ys, "sqeuclidean")
        return np.exp(-sq / (2.0 * bandwidth * bandwidth))
    if kind == KxKind.linear:
        return xs @ ys.T
    return np.ones((xs.shape[0], ys.shape[0]))


def base_kernel(kind: KxKind, bandwidth: float, x: Sequence[float], y: Sequence[float]) -> float:
    xv, yv = as_vector(x, "x"), as_vector(y, "y")
    if xv.shape != yv.shape:
        raise DimensionMismatchError(f"dimension mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    return float(base_gram(kind, bandwidth, xv[None, :], yv[None, :])[0, 0])


def _check_same_dim(bag_a: Bag, bag_b: Bag) -> None:
    if bag_a.d != bag_b.d:
        raise DimensionMismatchError(
            f"bags {bag_a.task_id!r} and {bag_b.task_id!r} differ in dimension ({bag_a.d} vs {bag_b.d})"
        )


def embedding_inner(bag_a: Bag, bag_b: Bag, kind: KxKind, bandwidth: float) -> float:
    """<Psi(P_a), Psi(P_b)> = (1 / (n_a n_b)) sum_ij k'_X(a_i, b_j)."""
    _check_same_dim(bag_a, bag_b)
    return float(np.mean(base_gram(kind, bandwidth, bag_a.points, bag_b.points)))


class EmbeddingCache:
    """Per-bag self inner products <Psi(P), Psi(P)>, keyed by task id + content hash."""

    def __init__(self) -> None:
        self._self_inner: Dict[Tuple[str, str, str, float], float] = {}

    def __len__(self) -> int:
        return len(self._self_inner)

    def self_inner(self, bag: Bag, kind: KxKind, bandwidth: float) -> float:
        key = (*bag.content_key, KxKind(kind).value, float(bandwidth))
        value = self._self_inner.get(key)
        if value is None:
            value = embedding_inner(bag, bag, kind, bandwidth)
            self._self_inner[key] = value
        return value


def _inner_kp(spec: KernelSpec, g: float) -> float:
    if spec.kp_kind == KpKind.linear_inner:
        return g
    if spec.kp_kind == KpKind.exponential_inner:
        return float(np.exp(spec.kappa * g))
    return float((1.0 + g) ** spec.degree)


def _kp_from_inner(spec: KernelSpec, g_ab: float, g_aa: float, g_bb: float) -> float:
    if spec.kp_kind == KpKind.gaussian_like:
        sq = max(g_aa + g_bb - 2.0 * g_ab, 0.0)
        return float(np.exp(-sq / (2.0 * spec.sigma_p * spec.sigma_p)))
    value = _inner_kp(spec, g_ab)
    if spec.kp_normalized:
        denom = _inner_kp(spec, g_aa) * _inner_kp(spec, g_bb)
        if not denom > 0:
            raise NumericalError(
                f"normalized {spec.kp_kind.value} kernel is undefined for a bag with a zero self-value"
                f" (k(a, a)={_inner_kp(spec, g_aa):.3g}, k(b, b)={_inner_kp(spec, g_bb):.3g})"
            )
        value /= float(np.sqrt(denom))
    return value


def distribution_kernel(
    bag_a: Bag, bag_b: Bag, spec: KernelSpec, cache: Optional[EmbeddingCache] = None
) -> float:
    _check_same_dim(bag_a, bag_b)
    if spec.kp_kind == KpKind.constant:
        return 1.0
    cache = cache if cache is not None else EmbeddingCache()
    g_ab = embedding_inner(bag_a, bag_b, spec.kxp_kind, spec.sigma_xp)
    if spec.kp_kind == KpKind.gaussian_like or spec.kp_normalized:
        g_aa = cache.self_inner(bag_a, spec.kxp_kind, spec.sigma_xp)
        g_bb = cache.self_inner(bag_b, spec.kxp_kind, spec.sigma_xp)
    else:
        g_aa = g_bb = 0.0
    return _kp_from_inner(spec, g_ab, g_aa, g_bb)


def product_kernel(
    pa: Tuple[Bag, Sequence[float]],
    pb: Tuple[Bag, Sequence[float]],
    spec: KernelSpec,
    cache: Optional[EmbeddingCache] = None,
) -> float:
    (bag_a, x_a), (bag_b, x_b) = pa, pb
    xa, xb = as_vector(x_a, "x"), as_vector(x_b, "x'")
    if xa.shape[0] != bag_a.d or xb.shape[0] != bag_b.d:
        raise DimensionMismatchError("point dimension differs from its bag's dimension")
    kp = distribution_kernel(bag_a, bag_b, spec, cache)
    return kp * base_kernel(spec.kx_kind, spec.sigma_x, xa, xb)


@dataclass(frozen=True, eq=False)
class ExtendedSet:
    """Extended points (bags[bag_index[i]], xs[i]) with bags deduplicated by content."""

    bags: Tuple[Bag, ...]
    bag_index: np.ndarray
    xs: np.ndarray

    def __len__(self) -> int:
        return int(self.xs.shape[0])

    @property
    def d(self) -> int:
        return int(self.xs.shape[1])

    def subset(self, rows: Sequence[int]) -> "ExtendedSet":
        rows = np.asarray(rows, dtype=np.int64)
        used, remapped = np.unique(self.bag_index[rows], return_inverse=True)
        return ExtendedSet(
            tuple(self.bags[i] for i in used), remapped.astype(np.int64), self.xs[rows]
        )

    @classmethod
    def from_bags(cls, bags: Sequence[Bag]) -> "ExtendedSet":
        """Every row of every bag, paired with its own bag."""
        if not bags:
            raise EmptyBagError("no bags given")
        for bag in bags[1:]:
            _check_same_dim(bags[0], bag)
        index = np.concatenate([np.full(b.n, i, dtype=np.int64) for i, b in enumerate(bags)])
        xs = np.vstack([b.points for b in bags])
        return cls(tuple(bags), index, xs)

    @classmethod
    def from_pairs(cls, points: Sequence[Tuple[Bag, Sequence[float]]]) -> "ExtendedSet":
        if not points:
            raise EmptyBagError("no extended points given")
        bags: List[Bag] = []
        seen: Dict[Tuple[str, str], int] = {}
        index = np.empty(len(points), dtype=np.int64)
        rows = []
        for i, (bag, x) in enumerate(points):
            key = bag.content_key
            if key not in seen:
                seen[key] = len(bags)
                bags.append(bag)
            index[i] = seen[key]
            vec = as_vector(x, "x")
            if vec.shape[0] != bag.d:
                raise DimensionMismatchError(
                    f"point {i} has dimension {vec.shape[0]}, its bag {bag.task_id!r} has {bag.d}"
                )
            rows.append(vec)
        for bag in bags[1:]:
            _check_same_dim(bags[0], bag)
        return cls(tuple(bags), index, np.vstack(rows))


def distribution_gram(
    bags_a: Sequence[Bag],
    bags_b: Optional[Sequence[Bag]],
    spec: KernelSpec,
    cache: Optional[EmbeddingCache] = None,
) -> np.ndarray:
    """k_P between bag lists, one embedding double sum per bag pair.

    With `bags_b` None the result is the symmetric Gram of `bags_a`, built
    from the upper triangle and mirrored.
    """
    symmetric = bags_b is None
    right = bags_a if bags_b is None else bags_b
    out = np.ones((len(bags_a), len(right)))
    if spec.kp_kind == KpKind.constant:
        for bag in right:
            _check_same_dim(bags_a[0], bag)
        return out
    cache = cache if cache is not None else EmbeddingCache()
    need_self = spec.kp_kind == KpKind.gaussian_like or spec.kp_normalized
    self_a = [cache.self_inner(b, spec.kxp_kind, spec.sigma_xp) if need_self else 0.0 for b in bags_a]
    self_b = self_a if symmetric else [
        cache.self_inner(b, spec.kxp_kind, spec.sigma_xp) if need_self else 0.0 for b in right
    ]
    for i, bag_a in enumerate(bags_a):
        start = i if symmetric else 0
        for j in range(start, len(right)):
            if symmetric and i == j:
                g_ab = self_a[i] if need_self else embedding_inner(bag_a, bag_a, spec.kxp_kind, spec.sigma_xp)
            else:
                g_ab = embedding_inner(bag_a, right[j], spec.kxp_kind, spec.sigma_xp)
            out[i, j] = _kp_from_inner(spec, g_ab, self_a[i], self_b[j])
            if symmetric:
                out[j, i] = out[i, j]
    return out


def _mirror_upper(mat: np.ndarray) -> np.ndarray:
    return np.triu(mat) + np.triu(mat, 1).T


def extended_gram(
    left: ExtendedSet,
    right: Optional[ExtendedSet],
    spec: KernelSpec,
    cache: Optional[EmbeddingCache] = None,
) -> np.ndarray:
    if right is None:
        kp = distribution_gram(left.bags, None, spec, cache)
        kx = base_gram(spec.kx_kind, spec.sigma_x, left.xs, left.xs)
        return _mirror_upper(kp[np.ix_(left.bag_index, left.bag_index)] * kx)
    if left.d != right.d:
        raise DimensionMismatchError(f"dimension mismatch: {left.d} vs {right.d}")
    kp = distribution_gram(left.bags, right.bags, spec, cache)
    kx = base_gram(spec.kx_kind, spec.sigma_x, left.xs, right.xs)
    return kp[np.ix_(left.bag_index, right.bag_index)] * kx


def gram_matrix(
    points: Sequence[Tuple[Bag, Sequence[float]]],
    spec: KernelSpec,
    cache_embeddings: bool = True,
) -> np.ndarray:
    cache = EmbeddingCache() if cache_embeddings else None
    gram = extended_gram(ExtendedSet.from_pairs(points), None, spec, cache)
    logger.debug("gram_matrix built size=%d cached_bags=%d", gram.shape[0], len(cache or ()))
    return gram


def cross_gram(
    points_a: Sequence[Tuple[Bag, Sequence[float]]],
    points_b: Sequence[Tuple[Bag, Sequence[float]]],
    spec: KernelSpec,
) -> np.ndarray:
    return extended_gram(
        ExtendedSet.from_pairs(points_a), ExtendedSet.from_pairs(points_b), spec, EmbeddingCache()
    )


def extended_points(bags: Sequence[Bag]) -> List[Tuple[Bag, np.ndarray]]:
    return [(bag, row) for bag in bags for row in bag.points]


def min_eigenvalue_ok(gram: np.ndarray, rel_tol: float = PSD_REL_TOL) -> Tuple[bool, float]:
    """PSD check relative to the mean diagonal: min eig >= -rel_tol * trace / M."""
    eigs = np.linalg.eigvalsh(gram)
    size = gram.shape[0]
    mean_diag = float(np.trace(gram)) / size
    floor = -rel_tol * (mean_diag if mean_diag > 0 else 1.0)
    return bool(eigs[0] >= floor), float(eigs[0])
