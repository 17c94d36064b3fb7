import json

import numpy as np
import pytest

from helpers.prop_loader import Trainer, TrainSettings
from margokit.exceptions import CorruptModelError, ModelSchemaError, ModelVersionError
from margokit.learner import Method, predict_bag, train
from margokit.model_io import dumps_model, load_model, loads_model, model_to_dict, save_model
from margokit.solver import LossKind

SETTINGS = TrainSettings(L=32, Q=64, m=30, tol=1e-6, linear_max_epochs=200)


@pytest.fixture
def queries():
    return np.random.default_rng(21).uniform(-1.0, 1.0, size=(9, 2))


@pytest.mark.parametrize(
    "method, features",
    [
        (Method.exact_dual, Trainer.rff),
        (Method.rff_linear, Trainer.rff),
        (Method.nystrom_linear, Trainer.rff),
        (Method.pooling_exact, Trainer.rff),
        (Method.pooling_linear, Trainer.rff),
        (Method.pooling_linear, Trainer.nystrom),
    ],
)
def test_saved_model_predicts_identically(tmp_path, ellipse_tasks, unit_spec, queries, method, features):
    model = train(
        ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, method, seed=4, settings=SETTINGS, pooling_features=features
    )
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.method == model.method
    assert loaded.spec == model.spec
    assert loaded.metadata == model.metadata
    np.testing.assert_array_equal(predict_bag(loaded, queries), predict_bag(model, queries))


def test_regression_model_keeps_epsilon(tmp_path, unit_spec, queries):
    from margokit.data import gen_scaled_regression_collection

    bags = gen_scaled_regression_collection(3, 10, seed=2).bags
    model = train(bags, unit_spec, 1e-1, LossKind.eps_insensitive, Method.exact_dual, settings=SETTINGS)
    loaded = loads_model(dumps_model(model))
    assert loaded.loss_kind == LossKind.eps_insensitive
    assert loaded.epsilon == model.epsilon
    np.testing.assert_array_equal(predict_bag(loaded, queries), predict_bag(model, queries))


def test_saving_twice_is_byte_identical(tmp_path, ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.rff_linear, seed=1, settings=SETTINGS)
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    save_model(model, first)
    save_model(load_model(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_file_layout(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, seed=6, settings=SETTINGS)
    raw = json.loads(dumps_model(model))
    assert set(raw) == {
        "format_version", "method", "spec", "lambda", "loss", "epsilon", "d", "payload", "seeds", "metadata",
    }
    assert raw["format_version"] == 1
    assert raw["lambda"] == 1e-2
    assert raw["seeds"]["master"] == 6
    assert raw["metadata"]["created_at"] is None
    assert raw["payload"]["kind"] == "dual"
    assert raw["payload"]["coef"]["dtype"] == "<f8"
    assert model_to_dict(model)["metadata"]["bag_sizes"] == [20, 20, 20, 20]


def _dual_dict(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, settings=SETTINGS)
    return json.loads(dumps_model(model))


def test_truncated_file_is_corrupt(tmp_path, ellipse_tasks, unit_spec):
    text = json.dumps(_dual_dict(ellipse_tasks, unit_spec))
    path = tmp_path / "cut.json"
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CorruptModelError):
        load_model(path)


def test_unknown_version(ellipse_tasks, unit_spec):
    raw = _dual_dict(ellipse_tasks, unit_spec)
    raw["format_version"] = 2
    with pytest.raises(ModelVersionError):
        loads_model(json.dumps(raw))


@pytest.mark.parametrize("drop", ["format_version", "payload", "spec"])
def test_missing_fields_are_schema_errors(ellipse_tasks, unit_spec, drop):
    raw = _dual_dict(ellipse_tasks, unit_spec)
    del raw[drop]
    with pytest.raises(ModelSchemaError):
        loads_model(json.dumps(raw))


def test_unknown_method_is_schema_error(ellipse_tasks, unit_spec):
    raw = _dual_dict(ellipse_tasks, unit_spec)
    raw["method"] = "boosting"
    with pytest.raises(ModelSchemaError):
        loads_model(json.dumps(raw))


def test_payload_kind_must_match_method(ellipse_tasks, unit_spec):
    raw = _dual_dict(ellipse_tasks, unit_spec)
    raw["method"] = "rff_linear"
    with pytest.raises(ModelSchemaError):
        loads_model(json.dumps(raw))


def test_wrong_array_length_is_corrupt(ellipse_tasks, unit_spec):
    raw = _dual_dict(ellipse_tasks, unit_spec)
    raw["payload"]["coef"]["shape"] = [raw["payload"]["coef"]["shape"][0] + 1]
    with pytest.raises(CorruptModelError):
        loads_model(json.dumps(raw))


def test_bad_base64_is_corrupt(ellipse_tasks, unit_spec):
    raw = _dual_dict(ellipse_tasks, unit_spec)
    raw["payload"]["coef"]["data"] = "not base64!"
    with pytest.raises(CorruptModelError):
        loads_model(json.dumps(raw))


def test_non_object_is_schema_error():
    with pytest.raises(ModelSchemaError):
        loads_model("[1, 2, 3]")


def test_non_utf8_is_corrupt(tmp_path):
    path = tmp_path / "binary.json"
    path.write_bytes(b"\xff\xfe\x00garbage")
    with pytest.raises(CorruptModelError):
        load_model(path)
