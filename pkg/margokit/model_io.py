"""Versioned JSON model files.

Arrays are stored as little-endian base64 blobs with dtype and shape, so a
loaded model reproduces predictions bit for bit. Keys are sorted and no
wall-clock time is written unless the model carries one.
"""
import base64
import binascii
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from margokit.exceptions import (
    CorruptModelError,
    DataError,
    MargokitError,
    ModelFileError,
    ModelSchemaError,
    ModelVersionError,
)
from margokit.features import NystromMap, ProductRffMap, RffMap
from margokit.kernels import Bag, ExtendedSet, KernelSpec
from margokit.learner import DualPayload, LinearPayload, Method, Model, ModelMetadata
from margokit.solver import LossKind

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_DTYPES = {"<f8": np.float64, "<i8": np.int64}


class ArrayBlob(BaseModel):
    dtype: Literal["<f8", "<i8"]
    shape: List[int]
    data: str


class BagBlob(BaseModel):
    task_id: str
    points: ArrayBlob


class ExtendedSetBlob(BaseModel):
    bags: List[BagBlob]
    bag_index: ArrayBlob
    xs: ArrayBlob


class RffBlob(BaseModel):
    kind: Literal["rff"]
    frequencies: ArrayBlob
    sigma: float
    seed: int


class ProductRffBlob(BaseModel):
    kind: Literal["product_rff"]
    inner: RffBlob
    outer: ArrayBlob
    sigma_x: float
    sigma_p: float
    seed: int


class NystromBlob(BaseModel):
    kind: Literal["nystrom"]
    landmarks: ExtendedSetBlob
    whitening: ArrayBlob
    eigenvalues: ArrayBlob
    spec: KernelSpec
    seed: int


class DualBlob(BaseModel):
    kind: Literal["dual"]
    support: ExtendedSetBlob
    coef: ArrayBlob
    objective: float
    gap: float
    converged: bool


class LinearBlob(BaseModel):
    kind: Literal["linear"]
    weights: ArrayBlob
    feature_map: Union[RffBlob, ProductRffBlob, NystromBlob]
    objective: float
    gap: float
    converged: bool


class MetadataBlob(BaseModel):
    bag_sizes: List[int]
    task_ids: List[str]
    created_at: Optional[str] = None


class ModelFile(BaseModel):
    format_version: int
    method: Method
    spec: KernelSpec
    lambda_: float = Field(..., alias="lambda")
    loss: LossKind
    epsilon: float
    d: int
    payload: Union[DualBlob, LinearBlob]
    seeds: Dict[str, int]
    metadata: MetadataBlob


def _encode_array(arr: np.ndarray) -> Dict[str, Any]:
    dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
    data = np.ascontiguousarray(arr, dtype=dtype)
    return {
        "dtype": dtype,
        "shape": list(data.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(blob: ArrayBlob) -> np.ndarray:
    try:
        raw = base64.b64decode(blob.data.encode("ascii"), validate=True)
    except (binascii.Error, ValueError) as e:
        raise CorruptModelError(f"array data is not valid base64: {e}")
    dtype = np.dtype(_DTYPES[blob.dtype]).newbyteorder("<")
    expected = int(np.prod(blob.shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected or any(s < 0 for s in blob.shape):
        raise CorruptModelError(f"array of shape {blob.shape} needs {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(blob.shape).astype(_DTYPES[blob.dtype])
    if arr.dtype == np.float64 and not np.all(np.isfinite(arr)):
        raise CorruptModelError("array contains NaN or infinite values")
    return arr


def _encode_extended(ext: ExtendedSet) -> Dict[str, Any]:
    return {
        "bags": [{"task_id": b.task_id, "points": _encode_array(b.points)} for b in ext.bags],
        "bag_index": _encode_array(ext.bag_index),
        "xs": _encode_array(ext.xs),
    }


def _decode_extended(blob: ExtendedSetBlob, d: int) -> ExtendedSet:
    bags = tuple(Bag(b.task_id, _decode_array(b.points)) for b in blob.bags)
    index = _decode_array(blob.bag_index)
    xs = _decode_array(blob.xs)
    if xs.ndim != 2 or xs.shape[1] != d:
        raise CorruptModelError(f"extended points have shape {xs.shape}, expected (k, {d})")
    if index.shape != (xs.shape[0],) or (index.size and (index.min() < 0 or index.max() >= len(bags))):
        raise CorruptModelError("extended set bag_index is inconsistent with its bags")
    return ExtendedSet(bags, index, xs)


def _encode_rff(rff: RffMap) -> Dict[str, Any]:
    return {"kind": "rff", "frequencies": _encode_array(rff.frequencies), "sigma": rff.sigma, "seed": rff.seed}


def _encode_feature_map(fmap: Union[RffMap, ProductRffMap, NystromMap]) -> Dict[str, Any]:
    if isinstance(fmap, ProductRffMap):
        return {
            "kind": "product_rff",
            "inner": _encode_rff(fmap.inner),
            "outer": _encode_array(fmap.outer),
            "sigma_x": fmap.sigma_x,
            "sigma_p": fmap.sigma_p,
            "seed": fmap.seed,
        }
    if isinstance(fmap, RffMap):
        return _encode_rff(fmap)
    return {
        "kind": "nystrom",
        "landmarks": _encode_extended(fmap.landmarks),
        "whitening": _encode_array(fmap.whitening),
        "eigenvalues": _encode_array(fmap.eigenvalues),
        "spec": json.loads(fmap.spec.json()),
        "seed": fmap.seed,
    }


def _read_only(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _decode_feature_map(blob: Union[RffBlob, ProductRffBlob, NystromBlob], d: int) -> Any:
    if isinstance(blob, RffBlob):
        return RffMap(_read_only(_decode_array(blob.frequencies)), blob.sigma, blob.seed)
    if isinstance(blob, ProductRffBlob):
        inner = _decode_feature_map(blob.inner, d)
        return ProductRffMap(inner, _read_only(_decode_array(blob.outer)), blob.sigma_x, blob.sigma_p, blob.seed)
    return NystromMap(
        _decode_extended(blob.landmarks, d),
        _read_only(_decode_array(blob.whitening)),
        _decode_array(blob.eigenvalues),
        blob.spec,
        blob.seed,
    )


def model_to_dict(model: Model) -> Dict[str, Any]:
    payload = model.payload
    if isinstance(payload, DualPayload):
        body: Dict[str, Any] = {
            "kind": "dual",
            "support": _encode_extended(payload.support),
            "coef": _encode_array(payload.coef),
        }
    else:
        body = {
            "kind": "linear",
            "weights": _encode_array(payload.weights),
            "feature_map": _encode_feature_map(payload.feature_map),
        }
    body.update(objective=payload.objective, gap=payload.gap, converged=payload.converged)
    meta = model.metadata
    return {
        "format_version": FORMAT_VERSION,
        "method": model.method.value,
        "spec": json.loads(model.spec.json()),
        "lambda": model.lam,
        "loss": model.loss_kind.value,
        "epsilon": model.epsilon,
        "d": model.d,
        "payload": body,
        "seeds": dict(meta.seeds),
        "metadata": {
            "bag_sizes": list(meta.bag_sizes),
            "task_ids": list(meta.task_ids),
            "created_at": meta.created_at,
        },
    }


def dumps_model(model: Model) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":")) + "\n"


def _decode_model(parsed: ModelFile) -> Model:
    body = parsed.payload
    payload: Union[DualPayload, LinearPayload]
    if isinstance(body, DualBlob):
        coef = _decode_array(body.coef)
        support = _decode_extended(body.support, parsed.d)
        if coef.shape != (len(support),):
            raise CorruptModelError(f"{coef.shape[0]} coefficients for {len(support)} support points")
        payload = DualPayload(support, coef, body.objective, body.gap, body.converged)
    else:
        payload = LinearPayload(
            _decode_array(body.weights),
            _decode_feature_map(body.feature_map, parsed.d),
            body.objective,
            body.gap,
            body.converged,
        )
    meta = parsed.metadata
    return Model(
        parsed.method,
        parsed.spec,
        parsed.lambda_,
        parsed.loss,
        parsed.epsilon,
        parsed.d,
        payload,
        ModelMetadata(parsed.seeds, meta.bag_sizes, meta.task_ids, meta.created_at),
    )


def loads_model(text: str) -> Model:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise CorruptModelError(f"model file is not valid JSON: {e}")
    if not isinstance(raw, dict) or "format_version" not in raw:
        raise ModelSchemaError("model file has no format_version")
    if raw["format_version"] != FORMAT_VERSION:
        raise ModelVersionError(
            f"unsupported model format_version {raw['format_version']!r}, expected {FORMAT_VERSION}"
        )
    try:
        parsed = ModelFile.parse_obj(raw)
    except ValidationError as e:
        raise ModelSchemaError(f"model file does not match the schema: {e}")

    try:
        return _decode_model(parsed)
    except ModelFileError:
        raise
    except DataError as e:
        raise CorruptModelError(f"model arrays are malformed: {e}")
    except MargokitError as e:
        raise ModelSchemaError(f"model file is inconsistent: {e}")


def save_model(model: Model, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")
    logger.info("save_model path=%s method=%s", path, model.method.value)


def load_model(path: Union[str, Path]) -> Model:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise CorruptModelError(f"model file is not UTF-8 text: {e}")
    model = loads_model(text)
    logger.info("load_model path=%s method=%s", path, model.method.value)
    return model
