import numpy as np
import pytest

from venteval.propensity import (
    LogisticModel,
    fit_logistic,
    loss_and_grad,
    predict_propensity,
    select_l2,
    sigmoid,
)


def _logistic_data(n, w, b, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, len(w)))
    y = (rng.random(n) < sigmoid(X @ w + b)).astype(float)
    return X, y


def test_separable_points():
    m = fit_logistic(np.array([[-1.0], [1.0]]), np.array([0.0, 1.0]), l2=1e-6, feature_names=("x",))
    p = m.predict(np.array([[-1.0], [1.0]]))
    assert p[0] < 0.01 and p[1] > 0.99


def test_gradient_at_zero_is_closed_form():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 3))
    y = (rng.random(40) < 0.4).astype(float)
    _, g = loss_and_grad(np.zeros(4), X, y, l2=0.1)
    np.testing.assert_allclose(g[:-1], ((0.5 - y)[:, None] * X).mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(g[-1], np.mean(0.5 - y), rtol=1e-14)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(10):
        X = rng.standard_normal((30, 4))
        y = (rng.random(30) < 0.5).astype(float)
        params = rng.standard_normal(5)
        _, g = loss_and_grad(params, X, y, l2=0.05)
        h = 1e-5
        fd = np.array([(loss_and_grad(params + h * e, X, y, 0.05)[0] - loss_and_grad(params - h * e, X, y, 0.05)[0])
                       / (2 * h) for e in np.eye(5)])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-10)


def test_recovers_generating_weights():
    w = np.array([1.0, -0.5, 0.25])
    X, y = _logistic_data(5000, w, -0.3, seed=2)
    m = fit_logistic(X, y, l2=1e-6, feature_names=("a", "b", "c"))
    # undo the internal standardization
    w_raw = m.weights / m.std
    b_raw = m.intercept - np.sum(m.weights * m.mean / m.std)
    np.testing.assert_allclose(w_raw, w, atol=0.1)
    assert abs(b_raw + 0.3) < 0.1


def test_loss_monotone_and_converged():
    X, y = _logistic_data(500, np.array([0.8, -1.2]), 0.1, seed=3)
    m = fit_logistic(X, y, feature_names=("a", "b"))
    assert np.all(np.diff(m.loss_history) <= 0)
    Xs = m.standardize(X)
    _, g = loss_and_grad(np.append(m.weights, m.intercept), Xs, y, m.l2)
    assert np.linalg.norm(g) < 1e-8


def test_refit_is_bit_identical():
    X, y = _logistic_data(300, np.array([0.5, 0.5]), 0.0, seed=4)
    a = fit_logistic(X, y, feature_names=("a", "b"))
    b = fit_logistic(X, y, feature_names=("a", "b"))
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.intercept == b.intercept


def test_errors():
    with pytest.raises(ValueError, match="both outcome classes"):
        fit_logistic(np.ones((5, 1)), np.zeros(5), feature_names=("x",))
    X = np.ones((4, 2))
    X[1, 1] = np.nan
    with pytest.raises(ValueError, match="b"):
        fit_logistic(X, np.array([0, 1, 0, 1.0]), feature_names=("a", "b"))


def test_predict_properties():
    m = LogisticModel(np.zeros(3), 0.0, np.zeros(3), np.ones(3), 1e-4, ("a", "b", "c"))
    assert predict_propensity(m, [1.0, 2.0, 3.0]) == 0.5
    m = LogisticModel(np.array([0.5, 0.0, 0.0]), 0.1, np.zeros(3), np.ones(3), 1e-4, ("a", "b", "c"))
    zs = [predict_propensity(m, [x, 0, 0]) for x in np.linspace(-3, 3, 7)]
    assert np.all(np.diff(zs) > 0)
    with pytest.raises(ValueError):
        m.predict(np.array([[np.nan, 0, 0]]))
    with pytest.raises(ValueError):
        m.predict(np.array([[0, 0]]))


def test_cohort_z_in_unit_interval(small_cohort):
    _, eps, prop, ts = small_cohort
    z = prop.predict(np.array([e.type_features(0) for e in eps]))
    assert np.all((z > 0) & (z < 1))


def test_serialization_round_trip():
    X, y = _logistic_data(200, np.array([0.3, -0.7]), 0.2, seed=5)
    m = fit_logistic(X, y, feature_names=("a", "b"))
    m2 = LogisticModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(m.predict(X), m2.predict(X))


def test_select_l2_returns_grid_member():
    X, y = _logistic_data(300, np.array([0.3, -0.7]), 0.2, seed=6)
    best, scores = select_l2(X, y, grid=(1e-1, 1e-4), k_folds=3)
    assert best in (1e-1, 1e-4) and set(scores) == {1e-1, 1e-4}
