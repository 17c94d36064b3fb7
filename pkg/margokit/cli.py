"""Command-line surface.

Exit codes: 0 success, 1 usage or configuration error, 2 data or model file
error, 3 numerical failure. Reports go to standard output, logs to standard
error.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, NoReturn, Optional, Sequence, Tuple

import yaml
from pydantic import ValidationError

from helpers.prop_loader import (
    CommonProperties,
    ExperimentGrid,
    GridSpec,
    MethodFamily,
    ParamAxis,
    Trainer,
    TrainSettings,
)
from helpers.utils import resolve_threads
from margokit.data import gen_collection, gen_scaled_regression_collection, read_bags, write_bags
from margokit.exceptions import (
    ConfigError,
    DataError,
    ModelFileError,
    NumericalError,
    SpecCompatibilityError,
    UsageError,
)
from margokit.experiment import run_approx_check, run_sweep
from margokit.kernels import KernelSpec
from margokit.learner import evaluate, predict_bag, resolve_method, sign_of, train
from margokit.model_io import load_model, save_model
from margokit.modelsel import select_hyperparameters, write_score_table
from margokit.solver import LossKind

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DEFAULT_COMM_PROPS = Path(__file__).resolve().parent.parent / "conf" / "comm_props.yaml"
LOSS_FLAGS = {"hinge": LossKind.hinge, "eps": LossKind.eps_insensitive}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonnegative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _load_yaml_model(loader: Any, path: str) -> Any:
    try:
        return loader(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}")
    except (ValidationError, TypeError) as e:
        raise ConfigError(f"config file {path} is invalid: {e}")


def _comm_props(args: argparse.Namespace) -> CommonProperties:
    if args.config:
        return _load_yaml_model(CommonProperties.load, args.config)
    if DEFAULT_COMM_PROPS.exists():
        return _load_yaml_model(CommonProperties.load, str(DEFAULT_COMM_PROPS))
    return CommonProperties(product_prefix="margokit", kernel=KernelSpec(), train=TrainSettings())


def _kernel_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    names = ("kx_kind", "sigma_x", "kxp_kind", "sigma_xp", "kp_kind", "sigma_p", "kappa", "degree")
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _settings_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    updates: Dict[str, Any] = {}
    for name in ("L", "Q", "m", "epsilon", "seed", "tol"):
        if getattr(args, name, None) is not None:
            updates[name] = getattr(args, name)
    if getattr(args, "lam", None) is not None:
        updates["lambda_"] = args.lam
    if getattr(args, "loss", None) is not None:
        updates["loss"] = LOSS_FLAGS[args.loss]
    if getattr(args, "concatenate_pooling", False):
        updates["concatenate_pooling"] = True
    return updates


def _resolve_spec(comm: CommonProperties, args: argparse.Namespace) -> KernelSpec:
    try:
        return comm.kernel.with_params(**_kernel_overrides(args))
    except ValidationError as e:
        raise UsageError(f"invalid kernel flags: {e}")


def _resolve_spec_and_settings(args: argparse.Namespace) -> Tuple[CommonProperties, KernelSpec, TrainSettings]:
    comm = _comm_props(args)
    spec = _resolve_spec(comm, args)
    try:
        settings = TrainSettings(**{**comm.train.dict(), **_settings_overrides(args)})
    except ValidationError as e:
        raise UsageError(f"invalid training flags: {e}")
    return comm, spec, settings


def _emit_json(payload: Dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    sys.stdout.flush()


def cmd_synth(args: argparse.Namespace) -> int:
    if args.generator == "ellipse":
        try:
            collection = gen_collection(args.tasks, args.points, args.seed, args.a, args.b)
        except ValidationError as e:
            raise UsageError(f"invalid ellipse parameters: {e}")
    else:
        collection = gen_scaled_regression_collection(args.tasks, args.points, args.seed, args.noise)
    write_bags(collection, args.out, include_row=args.include_row)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    _, spec, settings = _resolve_spec_and_settings(args)
    method = resolve_method(MethodFamily(args.method), Trainer(args.trainer))
    if settings.concatenate_pooling and args.method != MethodFamily.pooling.value:
        raise UsageError("--concatenate-pooling needs --method pooling")
    collection = read_bags(args.data)
    model = train(
        collection.bags,
        spec,
        settings.lambda_,
        settings.loss,
        method,
        seed=settings.seed,
        settings=settings,
        pooling_features=Trainer(args.trainer) if args.trainer != Trainer.exact.value else Trainer.rff,
        created_at=args.created_at,
    )
    save_model(model, args.out)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    comm = _comm_props(args)
    model = load_model(args.model)
    collection = read_bags(args.data)
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["task_id", "row", "margin", "sign"])
        for bag in collection:
            margins = predict_bag(model, bag.points, comm.eval_chunk_size)
            for j, (margin, sign) in enumerate(zip(margins, sign_of(margins))):
                writer.writerow([bag.task_id, str(j), repr(float(margin)), str(int(sign))])
    logger.info("predict bags=%d points=%d out=%s", len(collection), collection.n_points, args.out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    comm = _comm_props(args)
    model = load_model(args.model)
    collection = read_bags(args.data)
    report = evaluate(model, collection.bags, comm.eval_chunk_size)
    _emit_json(json.loads(report.json()))
    return 0


def _cli_grid(args: argparse.Namespace) -> GridSpec:
    if args.grid:
        grid = _load_yaml_model(GridSpec.load, args.grid)
    elif args.param:
        try:
            axes = {
                name: ParamAxis(low=float(low), high=float(high), count=int(count), log=not args.linear)
                for name, low, high, count in args.param
            }
            grid = GridSpec(axes=axes)
        except (ValueError, ValidationError) as e:
            raise UsageError(f"invalid --param: {e}")
    else:
        raise UsageError("cv needs --grid or at least one --param")
    updates = {
        k: getattr(args, k) for k in ("folds", "repeats", "max_recenter") if getattr(args, k) is not None
    }
    if args.seed is not None:
        updates["seed"] = args.seed
    try:
        return GridSpec(**{**grid.dict(), **updates})
    except ValidationError as e:
        raise UsageError(f"invalid grid settings: {e}")


def cmd_cv(args: argparse.Namespace) -> int:
    _, spec, settings = _resolve_spec_and_settings(args)
    grid = _cli_grid(args)
    method = resolve_method(MethodFamily(args.method), Trainer(args.trainer))
    collection = read_bags(args.data)
    selection = select_hyperparameters(
        collection.bags,
        spec,
        grid,
        method,
        settings.loss,
        settings,
        Trainer(args.trainer) if args.trainer != Trainer.exact.value else Trainer.rff,
    )
    if args.scores:
        write_score_table(selection, args.scores)
    _emit_json({
        "best_params": selection.best_params,
        "best_score": selection.best_score,
        "rounds": len(selection.rounds),
        "interior": selection.interior,
    })
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    comm = _comm_props(args)
    grid = _load_yaml_model(ExperimentGrid.load, args.grid)
    out = args.out or grid.out
    if not out:
        raise UsageError("sweep needs --out or an `out` entry in the grid file")
    workers = min(args.workers, resolve_threads())
    rows = run_sweep(grid, out, workers=workers, chunk_size=comm.eval_chunk_size)
    failed = sum(1 for r in rows if r.status == "failed" and r.repeat not in ("mean", "sd"))
    if failed:
        logger.warning("sweep finished with failed cells count=%d", failed)
    return 0


def cmd_approx_check(args: argparse.Namespace) -> int:
    # --L and --Q are lists of map sizes here, not training settings
    spec = _resolve_spec(_comm_props(args), args)
    reports = run_approx_check(
        spec,
        args.L,
        args.Q,
        args.pairs,
        args.repeats,
        args.seed if args.seed is not None else 0,
        args.eps_l,
        args.eps_q,
        args.bag_size,
        args.dim,
        out_path=args.out,
    )
    _emit_json({
        "reports": [
            {
                "L": r.L,
                "Q": r.Q,
                "median_max_error": r.median_max_error,
                "median_mean_error": r.median_mean_error,
                "exceedance": r.exceedance,
                "bound": r.bound,
                "uniform_bound": r.uniform_bound,
            }
            for r in reports
        ]
    })
    return 0


def _add_kernel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kx-kind", dest="kx_kind", choices=["gaussian", "linear", "constant"])
    p.add_argument("--kxp-kind", dest="kxp_kind", choices=["gaussian", "linear"])
    p.add_argument(
        "--kp-kind",
        dest="kp_kind",
        choices=["gaussian_like", "exponential_inner", "linear_inner", "polynomial_inner", "constant"],
    )
    p.add_argument("--sigma-x", dest="sigma_x", type=float)
    p.add_argument("--sigma-xp", dest="sigma_xp", type=float)
    p.add_argument("--sigma-p", dest="sigma_p", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--degree", type=_positive_int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=[m.value for m in MethodFamily], default=MethodFamily.mtl.value)
    p.add_argument("--trainer", choices=[t.value for t in Trainer], default=Trainer.exact.value)
    p.add_argument("--loss", choices=sorted(LOSS_FLAGS))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--L", type=_positive_int)
    p.add_argument("--Q", type=_positive_int)
    p.add_argument("--m", type=_positive_int)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=_nonnegative_int)
    _add_kernel_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="margokit", description="Marginal transfer learning over bags of points.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--config", help="common properties YAML (default conf/comm_props.yaml)")
    sub = parser.add_subparsers(dest="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic bag CSV")
    p.add_argument("--tasks", type=_positive_int, required=True)
    p.add_argument("--points", type=_positive_int, required=True)
    p.add_argument("--seed", type=_nonnegative_int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=0.5)
    p.add_argument("--generator", choices=["ellipse", "scaled_regression"], default="ellipse")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--include-row", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a labeled bag CSV")
    _add_train_flags(p)
    p.add_argument("--concatenate-pooling", action="store_true")
    p.add_argument("--created-at", help="timestamp recorded in the model file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-point margins for a bag CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="print an evaluation report as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="cross-validated hyperparameter selection")
    _add_train_flags(p)
    p.add_argument("--grid", help="GridSpec YAML")
    p.add_argument(
        "--param",
        nargs=4,
        action="append",
        metavar=("NAME", "LOW", "HIGH", "COUNT"),
        help="grid axis; repeatable",
    )
    p.add_argument("--linear", action="store_true", help="linear instead of log spacing for --param axes")
    p.add_argument("--folds", type=_positive_int)
    p.add_argument("--repeats", type=_positive_int)
    p.add_argument("--recenters", dest="max_recenter", type=_nonnegative_int)
    p.add_argument("--scores", help="score table CSV")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("sweep", help="run the N x n synthetic experiment grid")
    p.add_argument("--grid", required=True, help="ExperimentGrid YAML")
    p.add_argument("--out")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("approx-check", help="random feature approximation error against the tail bound")
    p.add_argument("--L", type=_positive_int, nargs="+", default=[2048])
    p.add_argument("--Q", type=_positive_int, nargs="+", default=[2048])
    p.add_argument("--eps-l", dest="eps_l", type=float, default=0.5)
    p.add_argument("--eps-q", dest="eps_q", type=float, default=0.2)
    p.add_argument("--pairs", type=_positive_int, default=100)
    p.add_argument("--repeats", type=_positive_int, default=50)
    p.add_argument("--bag-size", dest="bag_size", type=_positive_int, default=10)
    p.add_argument("--dim", type=_positive_int, default=3)
    p.add_argument("--seed", type=_nonnegative_int)
    p.add_argument("--out")
    _add_kernel_flags(p)
    p.set_defaults(func=cmd_approx_check)
    return parser


def _fail(code: int, error: BaseException) -> int:
    sys.stderr.write(f"error: {error}\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        sys.stderr.write(parser.format_usage())
        return _fail(1, e)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)

    try:
        return int(args.func(args))
    except (UsageError, ConfigError, SpecCompatibilityError) as e:
        return _fail(1, e)
    except (DataError, ModelFileError) as e:
        return _fail(2, e)
    except NumericalError as e:
        return _fail(3, e)
    except OSError as e:
        return _fail(2, e)
    except (ValidationError, ValueError) as e:
        return _fail(1, e)
