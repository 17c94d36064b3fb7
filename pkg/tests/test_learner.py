import numpy as np
import pytest

from helpers.prop_loader import MethodFamily, Trainer, TrainSettings
from margokit.exceptions import (
    DataError,
    DimensionMismatchError,
    EmptyBagError,
    MissingLabelsError,
    SpecCompatibilityError,
)
from margokit.features import nystrom_transform, product_features
from margokit.kernels import Bag, EmbeddingCache, ExtendedSet, KernelSpec, KxKind, base_gram, extended_gram
from margokit.learner import (
    DualPayload,
    LinearPayload,
    Method,
    Model,
    evaluate,
    predict_bag,
    resolve_method,
    sign_of,
    train,
)
from margokit.solver import LossKind, dual_costs, predict_dual, solve_dual_svm

EXACT = TrainSettings(tol=1e-9)
SMALL_MAPS = TrainSettings(L=64, Q=128, m=40, tol=1e-6, linear_max_epochs=500)


def _flip(bags):
    return [Bag(b.task_id, b.points, -b.labels) for b in bags]


@pytest.mark.parametrize(
    "family, trainer, expected",
    [
        (MethodFamily.mtl, Trainer.exact, Method.exact_dual),
        (MethodFamily.mtl, Trainer.rff, Method.rff_linear),
        (MethodFamily.mtl, Trainer.nystrom, Method.nystrom_linear),
        (MethodFamily.pooling, Trainer.exact, Method.pooling_exact),
        (MethodFamily.pooling, Trainer.rff, Method.pooling_linear),
    ],
)
def test_resolve_method(family, trainer, expected):
    assert resolve_method(family, trainer) == expected


def test_sign_of_zero_is_positive():
    np.testing.assert_array_equal(sign_of(np.array([-0.1, 0.0, 2.0])), [-1.0, 1.0, 1.0])


def test_exact_training_records_metadata(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, seed=3, settings=EXACT)
    assert isinstance(model.payload, DualPayload)
    assert model.d == 2
    assert model.metadata.bag_sizes == [20, 20, 20, 20]
    assert model.metadata.task_ids == ellipse_tasks.task_ids
    assert model.metadata.seeds["master"] == 3
    assert set(model.metadata.seeds) == {"master", "features", "solver"}
    assert model.payload.converged
    assert np.all(model.payload.coef != 0.0)
    assert model.payload.objective > 0.0


def test_label_flip_negates_predictions(ellipse_tasks, unit_spec):
    bags = list(ellipse_tasks.bags)
    queries = np.random.default_rng(2).uniform(-1.0, 1.0, size=(15, 2))
    base = train(bags, unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, settings=EXACT)
    flipped = train(_flip(bags), unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, settings=EXACT)
    np.testing.assert_allclose(predict_bag(flipped, queries), -predict_bag(base, queries), atol=1e-10)


def test_prediction_is_permutation_equivariant(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, settings=EXACT)
    queries = np.random.default_rng(4).uniform(-1.0, 1.0, size=(12, 2))
    perm = np.random.default_rng(5).permutation(12)
    np.testing.assert_allclose(predict_bag(model, queries[perm]), predict_bag(model, queries)[perm], atol=1e-12)


def test_chunk_size_does_not_change_predictions(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, settings=EXACT)
    queries = np.random.default_rng(6).uniform(-1.0, 1.0, size=(11, 2))
    np.testing.assert_allclose(predict_bag(model, queries, chunk_size=3), predict_bag(model, queries), atol=1e-12)


def test_pooling_prediction_ignores_other_points(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.pooling_exact, settings=EXACT)
    x = [0.3, -0.2]
    a = predict_bag(model, [x, [0.9, 0.9], [0.1, 0.5]])[0]
    b = predict_bag(model, [x, [-3.0, 2.0]])[0]
    assert a == pytest.approx(b, abs=1e-12)
    assert model.spec.kp_kind.value == "constant"


def test_pooling_exact_matches_a_plain_svm(ellipse_tasks, unit_spec):
    bags = ellipse_tasks.bags
    model = train(bags, unit_spec, 1e-2, LossKind.hinge, Method.pooling_exact, settings=EXACT)
    xs = np.vstack([b.points for b in bags])
    labels = np.concatenate([b.labels for b in bags])
    gram = base_gram(KxKind.gaussian, 1.0, xs, xs)
    sol = solve_dual_svm(gram, labels, dual_costs([b.n for b in bags], 1e-2), tol=1e-9)
    queries = np.random.default_rng(7).uniform(-1.0, 1.0, size=(10, 2))
    expected = predict_dual(sol, base_gram(KxKind.gaussian, 1.0, queries, xs))
    np.testing.assert_allclose(predict_bag(model, queries), expected, atol=1e-8)


def test_rff_model_predicts_through_its_features(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.rff_linear, seed=1, settings=SMALL_MAPS)
    assert isinstance(model.payload, LinearPayload)
    bag = ellipse_tasks.bags[0]
    expected = product_features(model.payload.feature_map, bag) @ model.payload.weights
    np.testing.assert_allclose(predict_bag(model, bag.points, chunk_size=7), expected, atol=1e-10)


def test_nystrom_model_predicts_through_its_features(ellipse_tasks, unit_spec):
    model = train(
        ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.nystrom_linear, seed=2, settings=SMALL_MAPS
    )
    bag = ellipse_tasks.bags[1]
    nmap = model.payload.feature_map
    expected = nystrom_transform(nmap, ExtendedSet.from_bags([bag])) @ model.payload.weights
    np.testing.assert_allclose(predict_bag(model, bag.points), expected, atol=1e-10)


@pytest.mark.parametrize("features", [Trainer.rff, Trainer.nystrom])
def test_pooling_linear_trains(ellipse_tasks, unit_spec, features):
    model = train(
        ellipse_tasks.bags,
        unit_spec,
        1e-2,
        LossKind.hinge,
        Method.pooling_linear,
        settings=SMALL_MAPS,
        pooling_features=features,
    )
    report = evaluate(model, ellipse_tasks.bags)
    assert 0.0 <= report.error_rate <= 1.0


def test_training_is_deterministic(ellipse_tasks, unit_spec):
    a = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.rff_linear, seed=9, settings=SMALL_MAPS)
    b = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.rff_linear, seed=9, settings=SMALL_MAPS)
    np.testing.assert_array_equal(a.payload.weights, b.payload.weights)


def test_evaluate_weights_bags_equally(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, settings=EXACT)
    small = ellipse_tasks.bags[0].subset([0, 1, 2])
    report = evaluate(model, [small, ellipse_tasks.bags[1]])
    assert report.mean_risk == pytest.approx(np.mean(list(report.per_bag_risk.values())))
    assert report.error_rate == pytest.approx(np.mean(list(report.per_bag_error.values())))
    assert report.rmse is None


def test_zero_model_scores_half(unit_spec):
    empty = ExtendedSet((Bag("s", [[0.0, 0.0]]),), np.zeros(0, dtype=np.int64), np.zeros((0, 2)))
    model = Model(Method.exact_dual, unit_spec, 1.0, LossKind.hinge, 0.0, 2, DualPayload(empty, np.zeros(0), 0.0, 0.0, True))
    bags = [Bag(f"t{i}", [[0.0, 1.0], [1.0, 0.0]], [1.0, -1.0]) for i in range(3)]
    report = evaluate(model, bags)
    assert report.error_rate == pytest.approx(0.5)
    assert report.mean_risk == pytest.approx(1.0)
    np.testing.assert_array_equal(predict_bag(model, [[3.0, 4.0]]), [0.0])


def test_eps_loss_defaults_epsilon_and_reports_rmse(unit_spec):
    rng = np.random.default_rng(3)
    bags = [Bag(f"r{i}", rng.normal(size=(8, 2)), rng.normal(size=8)) for i in range(3)]
    model = train(bags, unit_spec, 1e-1, LossKind.eps_insensitive, Method.exact_dual, settings=EXACT)
    labels = np.concatenate([b.labels for b in bags])
    assert model.epsilon == pytest.approx(0.1 * np.std(labels))
    report = evaluate(model, bags)
    assert report.error_rate is None
    per_bag_mse = [np.mean((predict_bag(model, b.points) - b.labels) ** 2) for b in bags]
    assert report.rmse == pytest.approx(np.sqrt(np.mean(per_bag_mse)))


def test_explicit_epsilon_is_used(unit_spec):
    bags = [Bag("r", [[0.0, 0.0], [1.0, 1.0]], [0.5, -0.5])]
    model = train(bags, unit_spec, 1.0, LossKind.eps_insensitive, Method.exact_dual, settings=TrainSettings(epsilon=1.0))
    assert model.epsilon == 1.0
    # every target already sits inside the tube around zero
    np.testing.assert_array_equal(predict_bag(model, [[0.2, 0.2]]), [0.0])


def test_rff_needs_gaussian_kernels(ellipse_tasks):
    spec = KernelSpec(kx_kind=KxKind.linear)
    with pytest.raises(SpecCompatibilityError):
        train(ellipse_tasks.bags, spec, 1e-2, LossKind.hinge, Method.rff_linear, settings=SMALL_MAPS)
    with pytest.raises(SpecCompatibilityError):
        train(ellipse_tasks.bags, spec, 1e-2, LossKind.hinge, Method.pooling_linear, settings=SMALL_MAPS)


def test_concatenated_costs_only_for_pooling(ellipse_tasks, unit_spec):
    settings = TrainSettings(concatenate_pooling=True)
    with pytest.raises(SpecCompatibilityError):
        train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.exact_dual, settings=settings)
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.pooling_exact, settings=settings)
    assert model.method == Method.pooling_exact


def test_training_input_checks(unit_spec):
    with pytest.raises(EmptyBagError):
        train([], unit_spec, 1.0, LossKind.hinge, Method.exact_dual)
    with pytest.raises(MissingLabelsError):
        train([Bag("u", [[0.0]])], unit_spec, 1.0, LossKind.hinge, Method.exact_dual)
    with pytest.raises(DimensionMismatchError):
        train(
            [Bag("a", [[0.0]], [1.0]), Bag("b", [[0.0, 1.0]], [1.0])],
            unit_spec,
            1.0,
            LossKind.hinge,
            Method.exact_dual,
        )


def test_prediction_and_evaluation_checks(ellipse_tasks, unit_spec):
    model = train(ellipse_tasks.bags, unit_spec, 1e-2, LossKind.hinge, Method.pooling_exact, settings=EXACT)
    with pytest.raises(DimensionMismatchError):
        predict_bag(model, [[0.0, 0.0, 0.0]])
    with pytest.raises(MissingLabelsError):
        evaluate(model, [Bag("u", [[0.0, 0.0]])])
    with pytest.raises(DataError):
        evaluate(model, [ellipse_tasks.bags[0], ellipse_tasks.bags[0]])
    with pytest.raises(EmptyBagError):
        evaluate(model, [])


def test_model_rejects_mismatched_payload(unit_spec):
    payload = LinearPayload(np.zeros(2), None, 0.0, 0.0, True)
    with pytest.raises(SpecCompatibilityError):
        Model(Method.exact_dual, unit_spec, 1.0, LossKind.hinge, 0.0, 1, payload)
    with pytest.raises(SpecCompatibilityError):
        Model(Method.pooling_linear, unit_spec, 1.0, LossKind.hinge, 0.0, 1, payload)


def _regularized_risk(gram, labels, sizes, lam, alphas):
    coef = alphas * labels
    margins = labels * (gram @ coef)
    hinge = np.maximum(0.0, 1.0 - margins)
    bounds = np.cumsum([0] + list(sizes))
    risk = np.mean([hinge[lo:hi].mean() for lo, hi in zip(bounds[:-1], bounds[1:])])
    return float(risk + lam * coef @ gram @ coef)


def test_exact_model_beats_projected_perturbations(ellipse_tasks, unit_spec):
    bags = ellipse_tasks.bags
    lam = 1e-2
    model = train(bags, unit_spec, lam, LossKind.hinge, Method.exact_dual, settings=EXACT)
    ext = ExtendedSet.from_bags(bags)
    gram = extended_gram(ext, None, unit_spec, EmbeddingCache())
    labels = np.concatenate([b.labels for b in bags])
    sizes = [b.n for b in bags]
    costs = dual_costs(sizes, lam)
    row_of = {tuple(x): i for i, x in enumerate(ext.xs)}
    alphas = np.zeros(len(ext))
    for x, c in zip(model.payload.support.xs, model.payload.coef):
        i = row_of[tuple(x)]
        alphas[i] = c * labels[i]
    trained = _regularized_risk(gram, labels, sizes, lam, alphas)
    assert trained == pytest.approx(model.payload.objective, rel=1e-4)
    rng = np.random.default_rng(19)
    for _ in range(20):
        moved = np.clip(alphas + rng.normal(0.0, 0.1, size=alphas.shape) * costs, 0.0, costs)
        assert trained <= _regularized_risk(gram, labels, sizes, lam, moved) + 1e-9


@pytest.mark.slow
def test_rff_agrees_with_exact_on_signs():
    from margokit.data import gen_collection

    spec = KernelSpec(sigma_x=0.5, sigma_xp=0.5, sigma_p=0.5)
    train_set = gen_collection(4, 20, seed=5)
    query_set = gen_collection(2, 100, seed=6, scope="test")
    exact = train(train_set.bags, spec, 1e-3, LossKind.hinge, Method.exact_dual, settings=TrainSettings(tol=1e-6))
    approx = train(
        train_set.bags,
        spec,
        1e-3,
        LossKind.hinge,
        Method.rff_linear,
        seed=2,
        settings=TrainSettings(L=8192, Q=8192, tol=1e-6, linear_max_epochs=2000),
    )
    same = np.concatenate([
        sign_of(predict_bag(exact, b.points)) == sign_of(predict_bag(approx, b.points))
        for b in query_set.bags
    ])
    assert same.size == 200
    assert np.mean(same) >= 0.95
