"""Repeated k-fold cross-validation with boundary-triggered grid recentering.

Folds split the bag list, never a bag, so each validation bag is predicted
through its own marginal exactly as an unseen task would be.
"""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from helpers.prop_loader import GridSpec, ParamAxis, Trainer, TrainSettings
from helpers.utils import child_seed, make_rng, resolve_threads
from margokit.exceptions import DataError
from margokit.kernels import Bag, KernelSpec
from margokit.learner import Method, evaluate, train
from margokit.solver import LossKind

logger = logging.getLogger(__name__)

SPEC_PARAMS = ("sigma_x", "sigma_xp", "sigma_p")
AGGREGATE = "all"


@dataclass(frozen=True)
class ScoreRow:
    point: int
    params: Dict[str, float]
    repeat: Optional[int]
    fold: Optional[int]
    risk: float
    error_rate: Optional[float] = None
    rmse: Optional[float] = None


@dataclass(frozen=True)
class CVResult:
    grid: GridSpec
    best_index: int
    best_params: Dict[str, float]
    best_score: float
    scores: List[float]
    rows: List[ScoreRow]
    folds: List[List[List[int]]]

    @property
    def aggregate_rows(self) -> List[ScoreRow]:
        return [r for r in self.rows if r.repeat is None]


@dataclass(frozen=True)
class Selection:
    best_params: Dict[str, float]
    best_score: float
    rounds: List[CVResult] = field(default_factory=list)

    @property
    def interior(self) -> bool:
        return not on_boundary(self.rounds[-1].grid, self.best_params)


def apply_params(
    spec: KernelSpec, settings: TrainSettings, params: Dict[str, float]
) -> Tuple[KernelSpec, float]:
    updates = {k: v for k, v in params.items() if k in SPEC_PARAMS}
    lam = params.get("lambda", settings.lambda_)
    return (spec.with_params(**updates) if updates else spec), lam


def fold_assignment(n_bags: int, folds: int, repeats: int, seed: int) -> List[List[List[int]]]:
    """repeat -> fold -> sorted bag indices; each repeat partitions range(n_bags)."""
    out = []
    for r in range(repeats):
        perm = make_rng(seed, "folds", r).permutation(n_bags)
        out.append([sorted(int(i) for i in part) for part in np.array_split(perm, folds)])
    return out


def _evaluate_point(
    index: int,
    params: Dict[str, float],
    bags: Sequence[Bag],
    spec_template: KernelSpec,
    method: Method,
    loss_kind: LossKind,
    settings: TrainSettings,
    folds: List[List[List[int]]],
    seed: int,
    pooling_features: Trainer,
) -> List[ScoreRow]:
    spec, lam = apply_params(spec_template, settings, params)
    rows = []
    for r, parts in enumerate(folds):
        for k, held_out in enumerate(parts):
            held = set(held_out)
            train_bags = [b for i, b in enumerate(bags) if i not in held]
            valid_bags = [bags[i] for i in held_out]
            model = train(
                train_bags,
                spec,
                lam,
                loss_kind,
                method,
                seed=child_seed(seed, "train", r, k),
                settings=settings,
                pooling_features=pooling_features,
            )
            report = evaluate(model, valid_bags)
            rows.append(ScoreRow(index, params, r, k, report.mean_risk, report.error_rate, report.rmse))
    risk = float(np.mean([row.risk for row in rows]))
    error = None if rows[0].error_rate is None else float(np.mean([row.error_rate for row in rows]))
    rmse = None if rows[0].rmse is None else float(np.mean([row.rmse for row in rows]))
    logger.info("cv point=%d params=%s risk=%.6g", index, params, risk)
    rows.append(ScoreRow(index, params, None, None, risk, error, rmse))
    return rows


def cross_validate(
    bags: Sequence[Bag],
    spec_template: KernelSpec,
    grid: GridSpec,
    method: Union[Method, str],
    loss_kind: Union[LossKind, str],
    settings: Optional[TrainSettings] = None,
    pooling_features: Trainer = Trainer.rff,
) -> CVResult:
    method = Method(method)
    loss_kind = LossKind(loss_kind)
    settings = settings or TrainSettings()
    if len(bags) < grid.folds:
        raise DataError(f"{len(bags)} bags cannot fill {grid.folds} folds")

    folds = fold_assignment(len(bags), grid.folds, grid.repeats, grid.seed)
    points = grid.points()
    workers = min(resolve_threads(), len(points))
    logger.info("cross_validate points=%d folds=%d repeats=%d workers=%d", len(points), grid.folds, grid.repeats, workers)

    def run(index: int) -> List[ScoreRow]:
        return _evaluate_point(
            index, points[index], bags, spec_template, method, loss_kind, settings, folds, grid.seed, pooling_features
        )

    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_point = list(pool.map(run, range(len(points))))

    rows = [row for point_rows in per_point for row in point_rows]
    scores = [point_rows[-1].risk for point_rows in per_point]
    # np.argmin returns the first minimum, i.e. the earliest grid point on ties
    best = int(np.argmin(scores))
    return CVResult(grid, best, dict(points[best]), scores[best], scores, rows, folds)


def _axis_index(axis: ParamAxis, value: float) -> int:
    values = axis.values()
    for i, v in enumerate(values):
        if math.isclose(v, value, rel_tol=1e-9, abs_tol=1e-300):
            return i
    raise ValueError(f"{value} is not a point of the axis {values}")


def on_boundary(grid: GridSpec, selected: Dict[str, float]) -> bool:
    for name, axis in grid.axes.items():
        if axis.count >= 2 and _axis_index(axis, selected[name]) in (0, axis.count - 1):
            return True
    return False


def _recentered_axis(axis: ParamAxis, value: float) -> ParamAxis:
    if axis.log:
        half_span = math.sqrt(axis.high / axis.low)
        return ParamAxis(low=value / half_span, high=value * half_span, count=axis.count, log=True)
    half_width = (axis.high - axis.low) / 2.0
    return ParamAxis(low=value - half_width, high=value + half_width, count=axis.count, log=False)


def recenter_grid(grid: GridSpec, selected: Dict[str, float]) -> GridSpec:
    """Recenter every axis whose selected value sits on its boundary; same count and span."""
    axes = dict(grid.axes)
    moved = []
    for name, axis in grid.axes.items():
        idx = _axis_index(axis, selected[name])
        if axis.count >= 2 and idx in (0, axis.count - 1):
            axes[name] = _recentered_axis(axis, selected[name])
            moved.append(name)
    if not moved:
        return grid
    logger.info("recenter_grid moved=%s", ",".join(moved))
    return grid.copy(update={"axes": axes})


def select_hyperparameters(
    bags: Sequence[Bag],
    spec_template: KernelSpec,
    grid: GridSpec,
    method: Union[Method, str],
    loss_kind: Union[LossKind, str],
    settings: Optional[TrainSettings] = None,
    pooling_features: Trainer = Trainer.rff,
) -> Selection:
    """Cross-validate, recenter while the winner sits on the boundary, keep every round."""
    rounds = []
    for round_no in range(grid.max_recenter + 1):
        result = cross_validate(bags, spec_template, grid, method, loss_kind, settings, pooling_features)
        rounds.append(result)
        new_grid = recenter_grid(grid, result.best_params)
        if new_grid is grid:
            break
        if round_no == grid.max_recenter:
            logger.warning("select_hyperparameters selection still on the boundary after %d rounds", round_no)
            break
        grid = new_grid
    last = rounds[-1]
    return Selection(last.best_params, last.best_score, rounds)


def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_score_table(results: Union[CVResult, Selection], path: Union[str, Path]) -> None:
    rounds = results.rounds if isinstance(results, Selection) else [results]
    names = list(rounds[0].grid.axes)
    header = ["round", "point"] + names + ["repeat", "fold", "risk", "error_rate", "rmse", "selected"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for round_no, result in enumerate(rounds):
            for row in result.rows:
                aggregate = row.repeat is None
                writer.writerow(
                    [str(round_no), str(row.point)]
                    + [repr(float(row.params[n])) for n in names]
                    + [
                        AGGREGATE if aggregate else str(row.repeat),
                        AGGREGATE if aggregate else str(row.fold),
                        _cell(row.risk),
                        _cell(row.error_rate),
                        _cell(row.rmse),
                        "1" if aggregate and row.point == result.best_index else "0",
                    ]
                )
    logger.info("write_score_table path=%s rounds=%d", path, len(rounds))
