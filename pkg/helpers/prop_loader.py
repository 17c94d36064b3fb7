import itertools
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
import yaml
from pydantic import BaseModel, Field, root_validator, validator

from margokit.kernels import KernelSpec
from margokit.solver import LossKind

GRID_PARAMS = ("sigma_x", "sigma_xp", "sigma_p", "lambda")


class Trainer(str, Enum):
    exact = "exact"
    rff = "rff"
    nystrom = "nystrom"


class MethodFamily(str, Enum):
    mtl = "mtl"
    pooling = "pooling"


class TrainSettings(BaseModel):
    lambda_: float = Field(1e-3, alias="lambda")
    loss: LossKind = LossKind.hinge
    # None: 0.1 * std of the training targets
    epsilon: Optional[float] = None
    L: int = 2048
    Q: int = 2048
    m: int = 512
    eps_eig: float = 1e-10
    tol: float = 1e-4
    max_iter: int = 200_000
    linear_max_epochs: int = 300
    concatenate_pooling: bool = False
    seed: int = 0

    class Config:
        allow_population_by_field_name = True

    @validator("lambda_")
    def _lambda_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("lambda must be > 0")
        return v

    @validator("L", "Q", "m", "max_iter", "linear_max_epochs")
    def _count_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("feature counts and iteration limits must be >= 1")
        return v

    @validator("epsilon", "eps_eig", "tol")
    def _nonnegative(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v < 0:
            raise ValueError("tolerances must be >= 0")
        return v

    @validator("seed")
    def _seed_nonnegative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("seed must be >= 0")
        return v


class CommonProperties(BaseModel):
    product_prefix: str
    kernel: KernelSpec
    train: TrainSettings
    eval_chunk_size: int = 4096

    @classmethod
    def load(
            cls,
            config_f: str,
    ) -> "CommonProperties":

        with open(config_f) as f:
            return CommonProperties(**yaml.load(f, Loader=yaml.FullLoader))


class ParamAxis(BaseModel):
    low: float
    high: float
    count: int
    log: bool = True

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values: Dict) -> Dict:
        low, high, count = values["low"], values["high"], values["count"]
        if count < 1:
            raise ValueError("count must be >= 1")
        if count == 1 and low != high:
            raise ValueError("a single-point axis needs low == high")
        if count >= 2 and not low < high:
            raise ValueError("low must be < high")
        if values["log"] and low <= 0:
            raise ValueError("log-spaced axes need low > 0")
        return values

    def values(self) -> List[float]:
        if self.count == 1:
            return [float(self.low)]
        if self.log:
            return [float(v) for v in np.geomspace(self.low, self.high, self.count)]
        return [float(v) for v in np.linspace(self.low, self.high, self.count)]

    @classmethod
    def fixed(cls, value: float, log: bool = True) -> "ParamAxis":
        return cls(low=value, high=value, count=1, log=log)


class GridSpec(BaseModel):
    axes: Dict[str, ParamAxis]
    folds: int = 5
    repeats: int = 5
    max_recenter: int = 3
    seed: int = 0

    @validator("axes")
    def _known_params(cls, v: Dict[str, ParamAxis]) -> Dict[str, ParamAxis]:
        if not v:
            raise ValueError("grid needs at least one axis")
        unknown = set(v) - set(GRID_PARAMS)
        if unknown:
            raise ValueError(f"unknown grid parameters: {sorted(unknown)}")
        return v

    @validator("folds")
    def _folds(cls, v: int) -> int:
        if v < 2:
            raise ValueError("folds must be >= 2")
        return v

    @validator("repeats")
    def _repeats(cls, v: int) -> int:
        if v < 1:
            raise ValueError("repeats must be >= 1")
        return v

    @validator("max_recenter")
    def _rounds(cls, v: int) -> int:
        if v < 0:
            raise ValueError("max_recenter must be >= 0")
        return v

    def points(self) -> List[Dict[str, float]]:
        """Grid points in enumeration order (first axis varies slowest)."""
        names = list(self.axes)
        return [
            dict(zip(names, combo))
            for combo in itertools.product(*(self.axes[n].values() for n in names))
        ]

    @classmethod
    def load(
            cls,
            config_f: str,
    ) -> "GridSpec":

        with open(config_f) as f:
            return GridSpec(**yaml.load(f, Loader=yaml.FullLoader))


class ExperimentGrid(BaseModel):
    Ns: List[int]
    ns: List[int]
    methods: List[MethodFamily]
    trainer: Trainer = Trainer.rff
    repeats: int = 5
    seed: int = 0
    out: Optional[str] = None
    test_tasks: int = 10
    test_points: int = 20_000
    ellipse_a: float = 1.0
    ellipse_b: float = 0.5
    kernel: KernelSpec
    train: TrainSettings

    @validator("Ns", "ns", "methods")
    def _nonempty(cls, v: List) -> List:
        if not v:
            raise ValueError("sweep lists must be nonempty")
        return v

    @validator("Ns", "ns", each_item=True)
    def _sizes_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("task counts and sizes must be >= 1")
        return v

    @validator("repeats", "test_tasks", "test_points")
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @classmethod
    def load(
            cls,
            config_f: str,
    ) -> "ExperimentGrid":

        with open(config_f) as f:
            return ExperimentGrid(**yaml.load(f, Loader=yaml.FullLoader))
