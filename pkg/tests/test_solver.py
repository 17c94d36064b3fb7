import numpy as np
import pytest
from scipy.optimize import minimize

from margokit.exceptions import DimensionMismatchError, NonFiniteInputError
from margokit.solver import (
    LossKind,
    dual_costs,
    loss_eval,
    loss_values,
    predict_dual,
    solve_dual_svm,
    solve_dual_svr,
    solve_linear,
)


@pytest.mark.parametrize(
    "kind, t, y, epsilon, expected",
    [
        (LossKind.hinge, 1.0, 1.0, 0.1, 0.0),
        (LossKind.hinge, -0.5, 1.0, 0.1, 1.5),
        (LossKind.hinge, 0.0, -1.0, 0.1, 1.0),
        (LossKind.eps_insensitive, 0.35, 0.3, 0.1, 0.0),
        (LossKind.eps_insensitive, 1.0, 0.3, 0.1, 0.6),
        ("eps_insensitive", -1.0, 1.0, 0.5, 1.5),
    ],
)
def test_loss_eval(kind, t, y, epsilon, expected):
    assert loss_eval(kind, t, y, epsilon) == pytest.approx(expected, abs=1e-12)


def test_loss_values_vectorized():
    out = loss_values(LossKind.hinge, np.array([2.0, 0.5, -1.0]), np.array([1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 2.0])


def test_dual_costs():
    np.testing.assert_allclose(dual_costs([2, 4], lam=0.5), [0.25, 0.25, 0.125, 0.125, 0.125, 0.125])
    np.testing.assert_allclose(dual_costs([2, 4], lam=0.5, concatenate=True), np.full(6, 1.0 / 6.0))
    with pytest.raises(ValueError):
        dual_costs([2], lam=0.0)
    with pytest.raises(ValueError):
        dual_costs([0, 3], lam=1.0)


def test_two_point_svm_example():
    gram = np.array([[0.0, 0.0], [0.0, 4.0]])
    sol = solve_dual_svm(gram, [1.0, -1.0], [1.0, 1.0], tol=1e-12)
    np.testing.assert_allclose(sol.alphas, [1.0, 0.25], atol=1e-12)
    assert sol.objective == pytest.approx(1.125, abs=1e-12)
    assert sol.converged
    assert predict_dual(sol, np.array([0.0, 2.0])) == pytest.approx(-0.5, abs=1e-12)


def test_identity_gram_saturates_at_cost():
    sol = solve_dual_svm(np.eye(3), [1.0, -1.0, 1.0], [0.5, 0.5, 0.5])
    # 1 - alpha_i > 0 for alpha_i <= 0.5, so every multiplier hits its box
    np.testing.assert_allclose(sol.alphas, [0.5, 0.5, 0.5])
    np.testing.assert_allclose(sol.coef, [0.5, -0.5, 0.5])


def test_zero_cost_pins_multiplier():
    sol = solve_dual_svm(np.eye(2), [1.0, 1.0], [0.0, 1.0])
    assert sol.alphas[0] == 0.0
    assert sol.alphas[1] == pytest.approx(1.0)


def test_svm_input_checks():
    with pytest.raises(DimensionMismatchError):
        solve_dual_svm(np.eye(2), [1.0], [1.0, 1.0])
    with pytest.raises(NonFiniteInputError):
        solve_dual_svm(np.array([[1.0, np.nan], [np.nan, 1.0]]), [1.0, -1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        solve_dual_svm(np.eye(2), [1.0, 0.5], [1.0, 1.0])
    with pytest.raises(DimensionMismatchError):
        predict_dual(np.array([1.0, 2.0]), np.array([1.0]))


def _random_problem(seed, size=12, dim=4):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(size, dim))
    labels = np.where(rng.uniform(size=size) < 0.5, -1.0, 1.0)
    costs = rng.uniform(0.05, 2.0, size=size)
    return Z, labels, costs


def _reference_dual(gram, labels, costs):
    Q = np.outer(labels, labels) * gram

    def negative_dual(a):
        return 0.5 * a @ Q @ a - a.sum(), Q @ a - 1.0

    res = minimize(
        negative_dual,
        np.zeros(len(labels)),
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(np.zeros(len(labels)), costs)),
        options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10_000},
    )
    return -res.fun


@pytest.mark.parametrize("seed", range(20))
def test_svm_matches_generic_qp(seed):
    Z, labels, costs = _random_problem(seed)
    gram = Z @ Z.T + 0.1 * np.eye(len(labels))
    sol = solve_dual_svm(gram, labels, costs, tol=1e-9)
    assert sol.converged
    assert sol.objective == pytest.approx(_reference_dual(gram, labels, costs), abs=1e-4)
    assert sol.gap <= 1e-6 * (1.0 + abs(sol.objective)) + 1e-6


def test_svm_kkt_conditions():
    Z, labels, costs = _random_problem(99, size=30)
    gram = Z @ Z.T
    sol = solve_dual_svm(gram, labels, costs, tol=1e-9)
    margins = labels * (gram @ sol.coef)
    tol = 1e-6
    free = (sol.alphas > tol) & (sol.alphas < costs - tol)
    assert np.all(margins[sol.alphas <= tol] >= 1.0 - tol)
    assert np.all(margins[sol.alphas >= costs - tol] <= 1.0 + tol)
    np.testing.assert_allclose(margins[free], 1.0, atol=tol)


def test_svm_objective_monotone_in_iterations():
    Z, labels, costs = _random_problem(5, size=15)
    gram = Z @ Z.T
    objectives = [solve_dual_svm(gram, labels, costs, tol=0.0, max_iter=k).objective for k in range(1, 40)]
    assert all(b >= a - 1e-12 for a, b in zip(objectives, objectives[1:]))
    assert not solve_dual_svm(gram, labels, costs, tol=0.0, max_iter=3).converged


def test_svm_sweep_order_agrees_with_greedy():
    Z, labels, costs = _random_problem(8, size=25)
    gram = Z @ Z.T + 0.1 * np.eye(25)
    greedy = solve_dual_svm(gram, labels, costs, tol=1e-9)
    sweeps = solve_dual_svm(gram, labels, costs, tol=1e-9, greedy_limit=0, seed=3)
    assert sweeps.objective == pytest.approx(greedy.objective, abs=1e-6)


def test_duplicate_with_halved_cost_is_invariant():
    Z, labels, costs = _random_problem(13, size=10)
    base = solve_dual_svm(Z @ Z.T, labels, costs, tol=1e-10)
    Zd = np.vstack([Z, Z[:1]])
    labels_d = np.append(labels, labels[0])
    costs_d = np.append(costs, costs[0] / 2.0)
    costs_d[0] = costs[0] / 2.0
    dup = solve_dual_svm(Zd @ Zd.T, labels_d, costs_d, tol=1e-10)
    queries = np.random.default_rng(0).normal(size=(6, Z.shape[1]))
    np.testing.assert_allclose(
        predict_dual(dup, queries @ Zd.T), predict_dual(base, queries @ Z.T), atol=1e-4
    )


def test_svr_interpolates_within_tube():
    gram = np.eye(3)
    sol = solve_dual_svr(gram, [1.0, -2.0, 0.05], [10.0, 10.0, 10.0], epsilon=0.1, tol=1e-12)
    # with K = I the fit is f_i = beta_i; the tube leaves eps slack
    np.testing.assert_allclose(sol.coef, [0.9, -1.9, 0.0], atol=1e-10)
    assert sol.converged


def test_svr_box_limits_coefficients():
    sol = solve_dual_svr(np.eye(2), [5.0, -5.0], [0.5, 0.5], epsilon=0.0)
    np.testing.assert_allclose(sol.coef, [0.5, -0.5])
    with pytest.raises(ValueError):
        solve_dual_svr(np.eye(2), [1.0, 2.0], [1.0, 1.0], epsilon=-0.1)


def test_linear_hinge_example():
    sol = solve_linear(np.array([[0.0], [2.0]]), [1.0, -1.0], LossKind.hinge, 0.25, [2], tol=1e-12)
    np.testing.assert_allclose(sol.weights, [-0.5], atol=1e-12)
    assert sol.objective == pytest.approx(0.5625, abs=1e-12)
    assert sol.converged


def test_linear_wide_tube_keeps_zero_weights():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(20, 3))
    y = rng.uniform(-1.0, 1.0, size=20)
    sol = solve_linear(Z, y, LossKind.eps_insensitive, 0.1, [10, 10], epsilon=2.0)
    np.testing.assert_array_equal(sol.weights, np.zeros(3))


def test_linear_huge_lambda_shrinks_weights():
    Z, labels, _ = _random_problem(3, size=40)
    sol = solve_linear(Z, labels, LossKind.hinge, 1e6, [20, 20])
    assert np.linalg.norm(sol.weights) <= 1e-3


@pytest.mark.parametrize("kind", [LossKind.hinge, LossKind.eps_insensitive])
def test_linear_agrees_with_kernel_solver(kind):
    rng = np.random.default_rng(17)
    Z = rng.normal(size=(24, 5))
    if kind == LossKind.hinge:
        y = np.where(Z[:, 0] + 0.3 * rng.normal(size=24) > 0, 1.0, -1.0)
    else:
        y = Z[:, 1] + 0.1 * rng.normal(size=24)
    sizes = [8, 6, 10]
    costs = dual_costs(sizes, 0.05)
    linear = solve_linear(Z, y, kind, 0.05, sizes, tol=1e-9, max_iter=20_000, epsilon=0.1)
    if kind == LossKind.hinge:
        dual = solve_dual_svm(Z @ Z.T, y, costs, tol=1e-9)
    else:
        dual = solve_dual_svr(Z @ Z.T, y, costs, 0.1, tol=1e-9)
    queries = rng.normal(size=(10, 5))
    np.testing.assert_allclose(queries @ linear.weights, predict_dual(dual, queries @ Z.T), atol=1e-3)
    assert linear.objective == pytest.approx(2.0 * 0.05 * (dual.objective + dual.gap), abs=1e-3)


def test_linear_explicit_costs_override_task_sizes():
    Z, labels, _ = _random_problem(21, size=6)
    costs = dual_costs([6], 0.5, concatenate=True)
    a = solve_linear(Z, labels, LossKind.hinge, 0.5, [6], costs=costs, tol=1e-10)
    b = solve_linear(Z, labels, LossKind.hinge, 0.5, [6], concatenate=True, tol=1e-10)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-12)


def test_linear_input_checks():
    with pytest.raises(DimensionMismatchError):
        solve_linear(np.zeros((3, 2)), [1.0, -1.0], LossKind.hinge, 1.0, [2])
    with pytest.raises(DimensionMismatchError):
        solve_linear(np.zeros((3, 2)), [1.0, -1.0, 1.0], LossKind.hinge, 1.0, [2])
