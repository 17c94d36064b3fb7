from pathlib import Path

import numpy as np
import pytest

from helpers.prop_loader import ExperimentGrid, MethodFamily, TrainSettings
from margokit.data import gen_scaled_regression_collection, read_bags, split_collection, write_bags
from margokit.experiment import run_sweep
from margokit.kernels import KernelSpec
from margokit.learner import Method, evaluate, train
from margokit.solver import LossKind

CONF = Path(__file__).resolve().parent.parent / "conf"


def test_regression_through_csv_beats_zero_predictor(tmp_path):
    path = tmp_path / "reg.csv"
    write_bags(gen_scaled_regression_collection(8, 40, seed=13), path)
    train_set, test_set = split_collection(read_bags(path), 3, seed=1)
    spec = KernelSpec(sigma_x=1.0, sigma_xp=1.0, sigma_p=1.0)
    model = train(train_set.bags, spec, 1e-3, LossKind.eps_insensitive, Method.exact_dual, settings=TrainSettings(tol=1e-5))
    report = evaluate(model, test_set.bags)
    zero_rmse = float(np.sqrt(np.mean([np.mean(b.labels ** 2) for b in test_set.bags])))
    assert report.rmse < zero_rmse


def _quick_grid(N, n, methods):
    base = ExperimentGrid.load(str(CONF / "sweep_props.quick.yaml"))
    return base.copy(update={"Ns": [N], "ns": [n], "methods": methods})


def _mean_errors(rows):
    assert not [r for r in rows if r.status == "failed"]
    return {r.method: r.error_rate for r in rows if r.repeat == "mean"}


@pytest.mark.slow
def test_quick_sweep_mtl_corner_cells(tmp_path):
    means = {}
    for N, n in [(16, 8), (64, 32), (256, 256)]:
        rows = run_sweep(_quick_grid(N, n, [MethodFamily.mtl]), tmp_path / f"sweep_{N}_{n}.csv")
        means[(N, n)] = _mean_errors(rows)["mtl"]
    assert 0.28 <= means[(16, 8)] <= 0.44
    assert means[(256, 256)] <= 0.05
    assert means[(256, 256)] < means[(64, 32)] < means[(16, 8)]


@pytest.mark.slow
def test_quick_sweep_pooling_beats_chance_on_the_ellipse_family(tmp_path):
    # every task normal points into the -x half-plane, so one pooled boundary is far from chance
    rows = run_sweep(_quick_grid(16, 8, [MethodFamily.mtl, MethodFamily.pooling]), tmp_path / "sweep.csv")
    means = _mean_errors(rows)
    assert 0.1 <= means["pooling"] <= 0.35
    assert means["pooling"] < means["mtl"]
