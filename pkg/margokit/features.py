"""Approximate feature maps so training can run on a linear solver.

Three maps live here: plain random Fourier features for one Gaussian kernel,
the two-stage construction for the all-Gaussian product kernel (RFF-embed the
bag, rescale-concatenate with the point, RFF the outer Gaussian), and the
Nyström landmark map that works for any KernelSpec.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from helpers.utils import child_seed, make_rng
from margokit.exceptions import (
    DimensionMismatchError,
    NumericalError,
    SpecCompatibilityError,
)
from margokit.kernels import (
    Bag,
    EmbeddingCache,
    ExtendedSet,
    KernelSpec,
    as_matrix,
    as_vector,
    extended_gram,
    product_kernel,
)

logger = logging.getLogger(__name__)

DEFAULT_EPS_EIG = 1e-10


@dataclass(frozen=True, eq=False)
class RffMap:
    frequencies: np.ndarray
    sigma: float
    seed: int

    @property
    def L(self) -> int:
        return int(self.frequencies.shape[0])

    @property
    def d(self) -> int:
        return int(self.frequencies.shape[1])

    @property
    def dim(self) -> int:
        return 2 * self.L


def sample_rff(seed: int, L: int, sigma: float, d: int) -> RffMap:
    """Frequencies w_l ~ Normal(0, I / sigma^2), the Fourier dual of exp(-|x-y|^2 / (2 sigma^2))."""
    if L < 1 or d < 1:
        raise ValueError(f"L and d must be >= 1, got L={L} d={d}")
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    rng = np.random.default_rng(seed)
    frequencies = rng.normal(0.0, 1.0 / sigma, size=(L, d))
    frequencies.setflags(write=False)
    return RffMap(frequencies, float(sigma), int(seed))


def _cos_sin(projections: np.ndarray) -> np.ndarray:
    n, L = projections.shape
    out = np.empty((n, 2 * L))
    out[:, 0::2] = np.cos(projections)
    out[:, 1::2] = np.sin(projections)
    out /= math.sqrt(L)
    return out


def rff_rows(rff: RffMap, xs: np.ndarray) -> np.ndarray:
    if xs.shape[1] != rff.d:
        raise DimensionMismatchError(f"RFF map expects dimension {rff.d}, got {xs.shape[1]}")
    return _cos_sin(xs @ rff.frequencies.T)


def rff_transform(rff: RffMap, x: Sequence[float]) -> np.ndarray:
    """z(x) = (1/sqrt(L)) [cos(w_1.x), sin(w_1.x), ..., cos(w_L.x), sin(w_L.x)]."""
    return rff_rows(rff, as_vector(x)[None, :])[0]


def embed_bag_rff(rff: RffMap, bag: Bag) -> np.ndarray:
    """Z_P(P_hat): the mean of z over the bag's rows."""
    return rff_rows(rff, bag.points).mean(axis=0)


@dataclass(frozen=True, eq=False)
class ProductRffMap:
    inner: RffMap
    outer: np.ndarray
    sigma_x: float
    sigma_p: float
    seed: int

    @property
    def Q(self) -> int:
        return int(self.outer.shape[0])

    @property
    def d(self) -> int:
        return self.inner.d

    @property
    def dim(self) -> int:
        return 2 * self.Q


def sample_product_rff(seed: int, L: int, Q: int, spec: KernelSpec, d: int) -> ProductRffMap:
    if not spec.all_gaussian:
        raise SpecCompatibilityError("RFF path requires all-Gaussian kernels")
    if Q < 1:
        raise ValueError(f"Q must be >= 1, got {Q}")
    inner = sample_rff(child_seed(seed, "inner"), L, spec.sigma_xp, d)
    # u = (sigma_x Z_P, sigma_p x) turns k_P * k_X into one Gaussian of width sigma_p * sigma_x
    outer_sigma = spec.sigma_p * spec.sigma_x
    outer = make_rng(seed, "outer").normal(0.0, 1.0 / outer_sigma, size=(Q, 2 * L + d))
    outer.setflags(write=False)
    return ProductRffMap(inner, outer, spec.sigma_x, spec.sigma_p, int(seed))


def product_features(prff: ProductRffMap, bag: Bag, xs: Optional[np.ndarray] = None) -> np.ndarray:
    """z_bar for every row of `xs` (default: the bag's own rows) under the bag's marginal."""
    xs = bag.points if xs is None else xs
    if bag.d != prff.d:
        raise DimensionMismatchError(f"product map expects dimension {prff.d}, bag has {bag.d}")
    return product_features_from_embedding(prff, embed_bag_rff(prff.inner, bag), xs)


def product_features_from_embedding(prff: ProductRffMap, z_p: np.ndarray, xs: np.ndarray) -> np.ndarray:
    if xs.shape[1] != prff.d:
        raise DimensionMismatchError(f"product map expects dimension {prff.d}, got {xs.shape[1]}")
    u = np.hstack([np.broadcast_to(prff.sigma_x * z_p, (xs.shape[0], z_p.shape[0])), prff.sigma_p * xs])
    return _cos_sin(u @ prff.outer.T)


def product_feature(prff: ProductRffMap, bag: Bag, x: Sequence[float]) -> np.ndarray:
    return product_features(prff, bag, as_vector(x)[None, :])[0]


@dataclass(frozen=True, eq=False)
class NystromMap:
    landmarks: ExtendedSet
    whitening: np.ndarray
    eigenvalues: np.ndarray
    spec: KernelSpec
    seed: int

    @property
    def m(self) -> int:
        return len(self.landmarks)

    @property
    def dim(self) -> int:
        return int(self.whitening.shape[0])


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # eigenvector signs are arbitrary; pin the largest-magnitude entry positive
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def fit_nystrom(
    points: Union[ExtendedSet, Sequence[Tuple[Bag, Sequence[float]]]],
    spec: KernelSpec,
    m: int,
    seed: int,
    eps_eig: float = DEFAULT_EPS_EIG,
) -> NystromMap:
    ext = points if isinstance(points, ExtendedSet) else ExtendedSet.from_pairs(points)
    if not 1 <= m <= len(ext):
        raise ValueError(f"m must be in [1, {len(ext)}], got {m}")
    if eps_eig < 0:
        raise ValueError("eps_eig must be >= 0")

    rows = np.sort(np.random.default_rng(seed).choice(len(ext), size=m, replace=False))
    landmarks = ext.subset(rows)
    k_hat = extended_gram(landmarks, None, spec, EmbeddingCache())
    values, vectors = np.linalg.eigh(k_hat)
    values, vectors = values[::-1], vectors[:, ::-1]

    top = float(values[0])
    keep = values > max(eps_eig * top, 0.0)
    if top <= 0 or not np.any(keep):
        raise NumericalError("every landmark Gram eigenvalue is below the retention threshold")
    if not np.all(keep):
        logger.info("fit_nystrom dropped eigenpairs kept=%d m=%d", int(keep.sum()), m)

    kept_values = values[keep]
    kept_vectors = _fix_signs(vectors[:, keep])
    whitening = (kept_vectors / np.sqrt(kept_values)).T
    whitening.setflags(write=False)
    return NystromMap(landmarks, whitening, kept_values, spec, int(seed))


def nystrom_transform(nmap: NystromMap, ext: ExtendedSet, cache: Optional[EmbeddingCache] = None) -> np.ndarray:
    """z_n(x) = D^{-1/2} V^T [k(x, l_1), ..., k(x, l_m)] for every extended point."""
    k_b = extended_gram(ext, nmap.landmarks, nmap.spec, cache if cache is not None else EmbeddingCache())
    return k_b @ nmap.whitening.T


def tail_bound_terms(
    L: int, Q: int, eps_l: float, eps_q: float, sigma_p: float, n1: int, n2: int
) -> Tuple[float, float]:
    """Pointwise tail bound for |k_bar - z_bar.z_bar'| >= eps_l + eps_q, split as (Q term, L term)."""
    eps = 0.5 * sigma_p * sigma_p * math.log1p(eps_l)
    q_term = 2.0 * math.exp(-Q * eps_q * eps_q / 2.0)
    l_term = 6.0 * n1 * n2 * math.exp(-L * eps * eps / 2.0)
    return q_term, l_term


def tail_bound(L: int, Q: int, eps_l: float, eps_q: float, sigma_p: float, n1: int, n2: int) -> float:
    return sum(tail_bound_terms(L, Q, eps_l, eps_q, sigma_p, n1, n2))


def uniform_bound(
    L: int, Q: int, eps_l: float, eps_q: float, spec: KernelSpec, n1: int, n2: int, d: int, diameter: float
) -> float:
    """Tail bound holding simultaneously over a compact set of the given diameter."""
    q_term = 2.0 ** 8 * (spec.sigma_xp * diameter / eps_q) ** 2 * math.exp(-Q * eps_q ** 2 / (2.0 * (d + 2)))
    l_term = (
        2.0 ** 9 * 3.0 * n1 * n2
        * (spec.sigma_p * spec.sigma_x * diameter / eps_l) ** 2
        * math.exp(-L * eps_l ** 2 / (2.0 * (d + 2)))
    )
    return q_term + l_term


@dataclass(frozen=True)
class ApproxErrorRow:
    repeat: int
    max_error: float
    mean_error: float
    exceed_frac: float


@dataclass(frozen=True)
class ApproxErrorReport:
    L: int
    Q: int
    eps_l: float
    eps_q: float
    n1: int
    n2: int
    rows: List[ApproxErrorRow]
    exceedance: float
    bound: float
    q_term: float
    l_term: float
    uniform_bound: float

    @property
    def median_max_error(self) -> float:
        return float(np.median([r.max_error for r in self.rows]))

    @property
    def median_mean_error(self) -> float:
        return float(np.median([r.mean_error for r in self.rows]))


def sample_pair_set(
    seed: int, n_pairs: int, bag_size: int, d: int
) -> List[Tuple[Tuple[Bag, np.ndarray], Tuple[Bag, np.ndarray]]]:
    """(bag, point) pairs with everything drawn from the unit cube."""
    rng = make_rng(seed, "pairs")
    pairs = []
    for p in range(n_pairs):
        sides = []
        for side in ("a", "b"):
            bag = Bag(f"pair-{p:04d}-{side}", as_matrix(rng.uniform(0.0, 1.0, size=(bag_size, d))))
            sides.append((bag, rng.uniform(0.0, 1.0, size=d)))
        pairs.append((sides[0], sides[1]))
    return pairs


def approx_error_stats(
    spec: KernelSpec,
    L: int,
    Q: int,
    n_pairs: int,
    n_repeats: int,
    seed: int,
    eps_l: float = 0.5,
    eps_q: float = 0.2,
    bag_size: int = 10,
    d: int = 3,
) -> ApproxErrorReport:
    """Empirical |k_bar - z_bar.z_bar'| over a fixed pair set, fresh maps per repeat."""
    if min(L, Q, n_pairs, n_repeats, bag_size, d) < 1:
        raise ValueError("all counts must be >= 1")
    pairs = sample_pair_set(seed, n_pairs, bag_size, d)
    cache = EmbeddingCache()
    exact = np.array([product_kernel(pa, pb, spec, cache) for pa, pb in pairs])

    threshold = eps_l + eps_q
    rows = []
    exceed_count = 0
    for repeat in range(n_repeats):
        prff = sample_product_rff(child_seed(seed, "map", repeat), L, Q, spec, d)
        approx = np.array([
            float(product_feature(prff, bag_a, x_a) @ product_feature(prff, bag_b, x_b))
            for (bag_a, x_a), (bag_b, x_b) in pairs
        ])
        errors = np.abs(exact - approx)
        exceeded = int(np.count_nonzero(errors >= threshold))
        exceed_count += exceeded
        rows.append(ApproxErrorRow(repeat, float(errors.max()), float(errors.mean()), exceeded / n_pairs))
        logger.debug("approx_error_stats repeat=%d max=%.4g mean=%.4g", repeat, errors.max(), errors.mean())

    q_term, l_term = tail_bound_terms(L, Q, eps_l, eps_q, spec.sigma_p, bag_size, bag_size)
    return ApproxErrorReport(
        L=L,
        Q=Q,
        eps_l=eps_l,
        eps_q=eps_q,
        n1=bag_size,
        n2=bag_size,
        rows=rows,
        exceedance=exceed_count / (n_pairs * n_repeats),
        bound=q_term + l_term,
        q_term=q_term,
        l_term=l_term,
        uniform_bound=uniform_bound(L, Q, eps_l, eps_q, spec, bag_size, bag_size, d, math.sqrt(d)),
    )
