import numpy as np
import pytest

from oracles import qp_oracle, rbf
from routerad.detector import (OneClassSVM, SvmConfig, kernel_matrix, scale_gamma, score,
                               solve_one_class, train)
from routerad.errors import (ConfigError, ContaminationError, ConvergenceError,
                             InsufficientDataError, SchemaMismatchError)
from routerad.features import FeatureConfig, FeatureMatrix, flow_columns


def solver_fixtures():
    rng = np.random.default_rng(2024)
    nus = [0.05, 0.2, 1.0]
    for i in range(10):
        n, d = int(rng.integers(15, 41)), int(rng.integers(2, 6))
        x = rng.normal(size=(n, d))
        yield x, nus[i % 3], 1.0 / (d * x.var())


def matrix(x, labels=None):
    n, p = x.shape
    return FeatureMatrix(x, flow_columns()[:p], labels if labels is not None else np.zeros(n, int),
                         np.arange(n), FeatureConfig(1.0, 2, 1.0))


def test_kernel_matches_loops():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    assert np.allclose(kernel_matrix(a, b, "rbf", 0.7), rbf(a, b, 0.7), atol=1e-14)


def test_scale_gamma_rule():
    x = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert scale_gamma(x) == 1.0 / (2 * 1.0)
    assert scale_gamma(np.ones((3, 2))) == 1.0


@pytest.mark.parametrize("x, nu, gamma", list(solver_fixtures()))
def test_oracle_equivalence(x, nu, gamma):
    K = rbf(x, x, gamma)
    res = solve_one_class(K, nu)
    a_ref, rho_ref, obj_ref = qp_oracle(K, nu)
    assert abs(res.objective - obj_ref) <= 1e-6 * abs(obj_ref)
    cap = 1.0 / (nu * len(x))
    assert res.alpha.min() >= 0 and res.alpha.max() <= cap * (1 + 1e-12)
    assert abs(res.alpha.sum() - 1) <= 1e-9
    assert res.violation <= 1e-6
    f, f_ref = K @ res.alpha - res.rho, K @ a_ref - rho_ref
    disagree = np.sign(f) != np.sign(f_ref)
    assert np.all(np.minimum(np.abs(f), np.abs(f_ref))[disagree] <= 1e-6)


def test_nu_one_bounds_every_point():
    x = np.random.default_rng(1).normal(size=(20, 2))
    svm = OneClassSVM(SvmConfig(nu=1.0)).fit(x)
    assert svm.support_.size == 20 and np.allclose(svm.dual_coef_, 1 / 20)
    a_ref, _, _ = qp_oracle(kernel_matrix(x, x, "rbf", svm.gamma_), 1.0)
    assert np.allclose(a_ref, 1 / 20)


def test_thirty_points_fixed_gamma():
    x = np.random.default_rng(7).normal(size=(30, 2))
    svm = OneClassSVM(SvmConfig(nu=0.1, gamma=0.5)).fit(x)
    _, _, obj = qp_oracle(rbf(x, x, 0.5), 0.1)
    assert abs(svm.result_.objective - obj) <= 1e-6 * obj


def test_margin_vector_and_far_point():
    x = np.random.default_rng(3).normal(size=(40, 3))
    svm = OneClassSVM(SvmConfig(nu=0.2)).fit(x)
    cap = 1 / (0.2 * 40)
    free = (svm.dual_coef_ > 0) & (svm.dual_coef_ < cap)
    assert free.any()
    f = svm.decision_function(svm.support_vectors_[free])
    assert np.abs(f).max() <= 10 * svm.config.tol
    far = svm.decision_function(np.full((1, 3), 1e3))
    assert far[0] == pytest.approx(-svm.rho_) and far[0] < 0


@pytest.mark.parametrize("seed", range(20))
def test_nu_property(seed):
    rng = np.random.default_rng(seed)
    n, nu = int(rng.integers(20, 80)), float(rng.choice([0.05, 0.1, 0.3]))
    x = rng.normal(size=(n, 3))
    svm = OneClassSVM(SvmConfig(nu=nu)).fit(x)
    f = svm.decision_function(x)
    tol = svm.config.tol
    # margin vectors sit at f = 0 up to the stopping tolerance; only clear negatives are outliers
    assert np.mean(f < -tol) <= nu + 2 / n
    a = np.zeros(n)
    a[svm.support_] = svm.dual_coef_
    outside = f < -tol
    assert np.all(a[outside] >= 1 / (nu * n) * (1 - 1e-12))
    assert svm.support_.size / n >= nu - 2 / n


def test_convergence_error_carries_violation():
    x = np.random.default_rng(0).normal(size=(30, 2))
    with pytest.raises(ConvergenceError) as err:
        solve_one_class(rbf(x, x, 0.5), 0.1, tol=1e-12, max_iter=2)
    assert err.value.violation > 0


def test_config_validation():
    for kw in ({"nu": 0}, {"nu": 1.5}, {"gamma": -1}, {"kernel": "poly"}, {"max_iter": 0}):
        with pytest.raises(ConfigError):
            SvmConfig(**kw)


def test_train_contract():
    x = np.random.default_rng(0).normal(size=(30, 4))
    with pytest.raises(ContaminationError, match="row 3"):
        train(matrix(x, np.r_[0, 0, 0, 1, np.zeros(26, int)]))
    with pytest.raises(InsufficientDataError):
        train(matrix(x[:9]))
    model = train(matrix(x))
    assert model.alpha.min() > 0 and abs(model.alpha.sum() - 1) <= 1e-9
    assert model.support_vectors.shape == (model.alpha.size, model.pca.k)
    s = score(model, matrix(x))
    assert np.all(np.isfinite(s))


def test_schema_mismatch_names_columns():
    x = np.random.default_rng(0).normal(size=(20, 3))
    model = train(matrix(x))
    other = FeatureMatrix(x, flow_columns()[1:4], np.zeros(20, int), np.arange(20), FeatureConfig(1.0, 2, 1.0))
    with pytest.raises(SchemaMismatchError) as err:
        score(model, other)
    assert flow_columns()[0].name in str(err.value) and flow_columns()[3].name in str(err.value)


def test_training_is_deterministic():
    x = np.random.default_rng(9).normal(size=(25, 4))
    a, b = train(matrix(x)), train(matrix(x.copy()))
    assert np.array_equal(a.alpha, b.alpha) and a.rho == b.rho
