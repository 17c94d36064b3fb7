"""Synthetic tasks, bag CSV files and bag-level splits.

Bag CSV layout: a header ``task_id[,row][,y],f1,...,fd`` then one row per
point. ``row`` (a per-task row number) and ``y`` are optional; when ``row``
is present a repeated (task_id, row) pair is an error. Rows of one task keep
their file order.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, root_validator, validator

from helpers.utils import child_seed, id_gen, make_rng
from margokit.exceptions import (
    DataError,
    DimensionMismatchError,
    DuplicateRowError,
    MissingHeaderError,
    NonNumericCellError,
    RaggedRowError,
)
from margokit.kernels import Bag

logger = logging.getLogger(__name__)

ALPHA_LOW = math.pi / 4
ALPHA_HIGH = 3 * math.pi / 4
TASK_SCOPE = "synth"


class EllipseTaskParams(BaseModel):
    a: float = 1.0
    b: float = 0.5
    alpha: float
    n: int
    seed: int

    @validator("alpha")
    def _alpha_range(cls, v: float) -> float:
        if not ALPHA_LOW <= v <= ALPHA_HIGH:
            raise ValueError("rotation must lie in [pi/4, 3pi/4]")
        return v

    @validator("n")
    def _n_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("n must be >= 1")
        return v

    @validator("seed")
    def _seed(cls, v: int) -> int:
        if v < 0:
            raise ValueError("seed must be >= 0")
        return v

    @root_validator(skip_on_failure=True)
    def _axes(cls, values: Dict) -> Dict:
        if not values["a"] > values["b"] > 0:
            raise ValueError("semi-axes need a > b > 0")
        return values


@dataclass(frozen=True, eq=False)
class BagCollection:
    bags: Tuple[Bag, ...]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "bags", tuple(self.bags))
        seen: Set[str] = set()
        for bag in self.bags:
            if bag.task_id in seen:
                raise DataError(f"duplicate task id {bag.task_id!r}")
            seen.add(bag.task_id)
            if bag.d != self.bags[0].d:
                raise DimensionMismatchError(
                    f"bag {bag.task_id!r} has dimension {bag.d}, expected {self.bags[0].d}"
                )

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self) -> Iterator[Bag]:
        return iter(self.bags)

    @property
    def d(self) -> Optional[int]:
        return self.bags[0].d if self.bags else None

    @property
    def labeled(self) -> bool:
        return bool(self.bags) and all(b.labeled for b in self.bags)

    @property
    def task_ids(self) -> List[str]:
        return [b.task_id for b in self.bags]

    @property
    def n_points(self) -> int:
        return sum(b.n for b in self.bags)

    def same_content(self, other: "BagCollection") -> bool:
        return len(self) == len(other) and all(a.same_content(b) for a, b in zip(self.bags, other.bags))


def ellipse_labels(points: np.ndarray, alpha: float) -> np.ndarray:
    """+1 strictly left of the rotated major axis, -1 otherwise (the axis itself included)."""
    normal = np.array([-math.sin(alpha), math.cos(alpha)])
    return np.where(points @ normal > 0.0, 1.0, -1.0)


def gen_ellipse_task(params: EllipseTaskParams, task_id: str = "task") -> Bag:
    rng = np.random.default_rng(params.seed)
    t = rng.uniform(0.0, 2.0 * math.pi, size=params.n)
    local = np.column_stack([params.a * np.cos(t), params.b * np.sin(t)])
    c, s = math.cos(params.alpha), math.sin(params.alpha)
    rotation = np.array([[c, -s], [s, c]])
    points = local @ rotation.T
    return Bag(task_id, points, ellipse_labels(points, params.alpha))


def gen_collection(
    N: int, n: int, seed: int, a: float = 1.0, b: float = 0.5, scope: str = TASK_SCOPE
) -> BagCollection:
    """N rotated-ellipse tasks; task i draws its rotation and points from streams keyed by i."""
    if N < 1 or n < 1:
        raise ValueError(f"N and n must be >= 1, got N={N} n={n}")
    bags = []
    alphas = []
    point_seeds = []
    for i in range(N):
        alpha = float(make_rng(seed, "task", i).uniform(ALPHA_LOW, ALPHA_HIGH))
        params = EllipseTaskParams(a=a, b=b, alpha=alpha, n=n, seed=child_seed(seed, "task", i, "points"))
        bags.append(gen_ellipse_task(params, id_gen(scope, "task", i)))
        alphas.append(alpha)
        point_seeds.append(params.seed)
    logger.info("gen_collection generator=ellipse N=%d n=%d seed=%d", N, n, seed)
    provenance = {
        "generator": "ellipse",
        "seed": seed,
        "a": a,
        "b": b,
        "alphas": alphas,
        "point_seeds": point_seeds,
    }
    return BagCollection(tuple(bags), provenance)


def gen_scaled_regression_task(
    scale: float, n: int, seed: int, noise: float = 0.1, task_id: str = "task"
) -> Bag:
    """X ~ N(0, scale^2 I_2), Y = scale * X_1 + N(0, noise^2)."""
    if not scale > 0 or noise < 0 or n < 1:
        raise ValueError("need scale > 0, noise >= 0 and n >= 1")
    rng = np.random.default_rng(seed)
    points = rng.normal(0.0, scale, size=(n, 2))
    targets = scale * points[:, 0] + rng.normal(0.0, noise, size=n)
    return Bag(task_id, points, targets)


def gen_scaled_regression_collection(
    N: int, n: int, seed: int, noise: float = 0.1, scope: str = TASK_SCOPE
) -> BagCollection:
    """Regression tasks whose slope equals their spread, so only the marginal reveals it."""
    if N < 1 or n < 1:
        raise ValueError(f"N and n must be >= 1, got N={N} n={n}")
    bags = []
    scales = []
    for i in range(N):
        scale = float(make_rng(seed, "task", i).uniform(0.5, 2.0))
        bags.append(
            gen_scaled_regression_task(scale, n, child_seed(seed, "task", i, "points"), noise, id_gen(scope, "task", i))
        )
        scales.append(scale)
    logger.info("gen_collection generator=scaled_regression N=%d n=%d seed=%d", N, n, seed)
    return BagCollection(
        tuple(bags), {"generator": "scaled_regression", "seed": seed, "noise": noise, "scales": scales}
    )


def _parse_header(header: List[str]) -> Tuple[bool, bool, int]:
    if not header or header[0].strip() != "task_id":
        raise MissingHeaderError(1, "expected a header starting with task_id")
    names = [h.strip() for h in header[1:]]
    has_row = bool(names) and names[0] == "row"
    names = names[1:] if has_row else names
    has_y = bool(names) and names[0] == "y"
    names = names[1:] if has_y else names
    expected = [f"f{k}" for k in range(1, len(names) + 1)]
    if not names or names != expected:
        raise MissingHeaderError(1, f"feature columns must be f1..fd, got {names}")
    return has_row, has_y, len(names)


def _float_cell(text: str, line_no: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise NonNumericCellError(line_no, f"column {column}: {text!r} is not a number")
    if not math.isfinite(value):
        raise NonNumericCellError(line_no, f"column {column}: {text!r} is not finite")
    return value


def read_bags(path: Union[str, Path]) -> BagCollection:
    points: Dict[str, List[List[float]]] = {}
    labels: Dict[str, List[float]] = {}
    seen_rows: Set[Tuple[str, int]] = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise MissingHeaderError(1, "file is empty")
        has_row, has_y, d = _parse_header(header)
        offset = 1 + int(has_row) + int(has_y)
        width = offset + d
        for cells in reader:
            line_no = reader.line_num
            if not cells:
                continue
            if len(cells) != width:
                raise RaggedRowError(line_no, f"expected {width} cells, found {len(cells)}")
            task_id = cells[0].strip()
            if not task_id:
                raise NonNumericCellError(line_no, "task_id is empty")
            if has_row:
                try:
                    row = int(cells[1])
                except ValueError:
                    raise NonNumericCellError(line_no, f"column row: {cells[1]!r} is not an integer")
                if (task_id, row) in seen_rows:
                    raise DuplicateRowError(line_no, f"row {row} of task {task_id!r} appears twice")
                seen_rows.add((task_id, row))
            if has_y:
                labels.setdefault(task_id, []).append(_float_cell(cells[offset - 1], line_no, "y"))
            points.setdefault(task_id, []).append(
                [_float_cell(cells[offset + k], line_no, f"f{k + 1}") for k in range(d)]
            )

    bags = tuple(
        Bag(task_id, np.array(rows), np.array(labels[task_id]) if has_y else None)
        for task_id, rows in points.items()
    )
    logger.info("read_bags path=%s bags=%d d=%d labeled=%s", path, len(bags), d, has_y)
    return BagCollection(bags, {"source": str(path)})


def _fmt(value: float) -> str:
    # repr is the shortest string that round-trips the double
    return repr(float(value))


def write_bags(collection: BagCollection, path: Union[str, Path], include_row: bool = False) -> None:
    labeled = collection.labeled
    if not labeled and any(b.labeled for b in collection):
        raise DataError("either every bag or no bag may carry labels")
    d = collection.d or 0
    header = ["task_id"] + (["row"] if include_row else []) + (["y"] if labeled else [])
    header += [f"f{k}" for k in range(1, d + 1)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for bag in collection:
            for j in range(bag.n):
                cells = [bag.task_id] + ([str(j)] if include_row else [])
                if labeled:
                    cells.append(_fmt(bag.labels[j]))
                cells.extend(_fmt(v) for v in bag.points[j])
                writer.writerow(cells)
    logger.info("write_bags path=%s bags=%d points=%d", path, len(collection), collection.n_points)


def split_collection(
    collection: BagCollection,
    n_test_bags: int,
    per_bag_subsample: Optional[int] = None,
    seed: int = 0,
) -> Tuple[BagCollection, BagCollection]:
    """Bag-level split; `per_bag_subsample` thins the training bags only."""
    if not 0 <= n_test_bags < len(collection):
        raise ValueError(f"n_test_bags must be in [0, {len(collection)}), got {n_test_bags}")
    order = make_rng(seed, "split").permutation(len(collection))
    test_idx = set(int(i) for i in order[:n_test_bags])
    train_bags: List[Bag] = []
    test_bags: List[Bag] = []
    for i, bag in enumerate(collection):
        if i in test_idx:
            test_bags.append(bag)
            continue
        if per_bag_subsample is not None:
            bag = _subsample(bag, per_bag_subsample, make_rng(seed, "subsample", i))
        train_bags.append(bag)
    prov = dict(collection.provenance, split_seed=seed)
    return BagCollection(tuple(train_bags), prov), BagCollection(tuple(test_bags), prov)


def _subsample(bag: Bag, size: int, rng: np.random.Generator) -> Bag:
    if size < 1:
        raise ValueError("per_bag_subsample must be >= 1")
    if size > bag.n:
        raise DataError(f"cannot subsample {size} points from bag {bag.task_id!r} of size {bag.n}")
    return bag.subset(np.sort(rng.choice(bag.n, size=size, replace=False)))