"""The N x n synthetic sweep and the random-feature approximation check."""
import csv
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from helpers.prop_loader import ExperimentGrid, MethodFamily, Trainer
from helpers.utils import child_seed
from margokit.data import gen_collection
from margokit.features import ApproxErrorReport, approx_error_stats
from margokit.kernels import KernelSpec
from margokit.learner import evaluate, resolve_method, train
from margokit.solver import LossKind

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["N", "n", "method", "trainer", "repeat", "error_rate", "wall_time_s", "status"]
APPROX_COLUMNS = ["repeat", "L", "Q", "max_error", "mean_error", "exceed_frac", "bound", "uniform_bound"]


@dataclass(frozen=True)
class SweepRow:
    N: int
    n: int
    method: str
    trainer: str
    repeat: str
    error_rate: Optional[float]
    wall_time_s: Optional[float]
    status: str

    def cells(self) -> List[str]:
        return [
            str(self.N),
            str(self.n),
            self.method,
            self.trainer,
            self.repeat,
            "" if self.error_rate is None else repr(self.error_rate),
            "" if self.wall_time_s is None else f"{self.wall_time_s:.3f}",
            self.status,
        ]


class _RowWriter:
    """Serialized CSV writer; every row is flushed so a partial file stays parseable."""

    def __init__(self, handle: Optional[IO[str]]) -> None:
        self._handle = handle
        self._writer = csv.writer(handle, lineterminator="\n") if handle is not None else None
        self._lock = threading.Lock()

    def write(self, cells: List[str]) -> None:
        if self._writer is None or self._handle is None:
            return
        with self._lock:
            self._writer.writerow(cells)
            self._handle.flush()


@dataclass(frozen=True)
class _Cell:
    N: int
    n: int
    family: MethodFamily
    repeat: int


def _cells(grid: ExperimentGrid) -> List[_Cell]:
    return [
        _Cell(N, n, family, r)
        for N in grid.Ns
        for n in grid.ns
        for family in grid.methods
        for r in range(grid.repeats)
    ]


def _run_cell(grid: ExperimentGrid, cell: _Cell, chunk_size: int) -> SweepRow:
    # data streams ignore the method so mtl and pooling see the same tasks
    data_key = (cell.N, cell.n, cell.repeat)
    method = resolve_method(cell.family, grid.trainer)
    start = time.perf_counter()
    try:
        train_set = gen_collection(cell.N, cell.n, child_seed(grid.seed, "train", *data_key), grid.ellipse_a, grid.ellipse_b)
        test_set = gen_collection(
            grid.test_tasks,
            grid.test_points,
            child_seed(grid.seed, "test", *data_key),
            grid.ellipse_a,
            grid.ellipse_b,
            scope="test",
        )
        model = train(
            train_set.bags,
            grid.kernel,
            grid.train.lambda_,
            grid.train.loss,
            method,
            seed=child_seed(grid.seed, "features", *data_key),
            settings=grid.train,
            pooling_features=grid.trainer if grid.trainer != Trainer.exact else Trainer.rff,
        )
        report = evaluate(model, test_set.bags, chunk_size)
        metric = report.error_rate if model.loss_kind == LossKind.hinge else report.rmse
        status = "ok"
    except Exception as e:
        logger.warning("sweep cell failed N=%d n=%d method=%s repeat=%d error=%s", cell.N, cell.n, cell.family.value, cell.repeat, e)
        metric, status = None, "failed"
    elapsed = time.perf_counter() - start
    logger.info(
        "sweep cell N=%d n=%d method=%s repeat=%d metric=%s wall=%.2fs",
        cell.N, cell.n, cell.family.value, cell.repeat, metric, elapsed,
    )
    return SweepRow(cell.N, cell.n, cell.family.value, grid.trainer.value, str(cell.repeat), metric, elapsed, status)


def aggregate_rows(rows: Iterable[SweepRow]) -> List[SweepRow]:
    """mean and sd rows per (N, n, method), over the repeats that succeeded."""
    groups: Dict[Tuple[int, int, str, str], List[SweepRow]] = {}
    for row in rows:
        groups.setdefault((row.N, row.n, row.method, row.trainer), []).append(row)
    out = []
    for (N, n, method, trainer), members in groups.items():
        ok = [r for r in members if r.status == "ok" and r.error_rate is not None]
        errors = np.array([r.error_rate for r in ok], dtype=np.float64)
        times = np.array([r.wall_time_s for r in ok], dtype=np.float64)
        if errors.size == 0:
            out.append(SweepRow(N, n, method, trainer, "mean", None, None, "failed"))
            continue
        sd = float(np.std(errors, ddof=1)) if errors.size > 1 else 0.0
        sd_time = float(np.std(times, ddof=1)) if times.size > 1 else 0.0
        out.append(SweepRow(N, n, method, trainer, "mean", float(errors.mean()), float(times.mean()), "aggregate"))
        out.append(SweepRow(N, n, method, trainer, "sd", sd, sd_time, "aggregate"))
    return out


def run_sweep(
    grid: ExperimentGrid,
    out_path: Optional[Union[str, Path]] = None,
    workers: int = 1,
    chunk_size: int = 4096,
) -> List[SweepRow]:
    """Train and evaluate every (N, n, method, repeat) cell; a failing cell is recorded, not raised."""
    out_path = out_path if out_path is not None else grid.out
    cells = _cells(grid)
    logger.info("run_sweep cells=%d trainer=%s workers=%d out=%s", len(cells), grid.trainer.value, workers, out_path)
    handle = open(out_path, "w", newline="", encoding="utf-8") if out_path else None
    try:
        writer = _RowWriter(handle)
        writer.write(SWEEP_COLUMNS)
        rows: List[SweepRow] = []
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            # map yields in submission order, so the file order is fixed
            for row in pool.map(lambda c: _run_cell(grid, c, chunk_size), cells):
                rows.append(row)
                writer.write(row.cells())
        summary = aggregate_rows(rows)
        for row in summary:
            writer.write(row.cells())
    finally:
        if handle is not None:
            handle.close()
    return rows + summary


def _broadcast_sizes(Ls: Sequence[int], Qs: Sequence[int]) -> List[Tuple[int, int]]:
    if len(Ls) == len(Qs):
        return list(zip(Ls, Qs))
    if len(Ls) == 1:
        return [(Ls[0], q) for q in Qs]
    if len(Qs) == 1:
        return [(l_, Qs[0]) for l_ in Ls]
    raise ValueError("L and Q lists must have equal length or one of them a single value")


def run_approx_check(
    spec: KernelSpec,
    Ls: Sequence[int],
    Qs: Sequence[int],
    n_pairs: int,
    n_repeats: int,
    seed: int,
    eps_l: float = 0.5,
    eps_q: float = 0.2,
    bag_size: int = 10,
    d: int = 3,
    out_path: Optional[Union[str, Path]] = None,
) -> List[ApproxErrorReport]:
    reports = []
    for L, Q in _broadcast_sizes(Ls, Qs):
        report = approx_error_stats(
            spec, L, Q, n_pairs, n_repeats, seed, eps_l, eps_q, bag_size, d
        )
        logger.info(
            "approx_check L=%d Q=%d median_max=%.4g exceedance=%.4g bound=%.4g",
            L, Q, report.median_max_error, report.exceedance, report.bound,
        )
        reports.append(report)
    if out_path is not None:
        write_approx_table(reports, out_path)
    return reports


def write_approx_table(reports: Sequence[ApproxErrorReport], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(APPROX_COLUMNS)
        for report in reports:
            for row in report.rows:
                writer.writerow([
                    str(row.repeat),
                    str(report.L),
                    str(report.Q),
                    repr(row.max_error),
                    repr(row.mean_error),
                    repr(row.exceed_frac),
                    repr(report.bound),
                    repr(report.uniform_bound),
                ])
