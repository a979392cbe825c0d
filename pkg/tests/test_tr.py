import numpy as np
import pytest

from oracles import bilinear_ls_predictions
from vistr.errors import DataError, SingularNormalEquations
from vistr.tr import (
    TrainConfig,
    TrModel,
    accuracy,
    fit,
    load_model,
    predict,
    residual,
    save_model,
)


def bilinear_problem(seed, N=3, T=12, H=6, W=7, J=2, noise=0.0):
    rng = np.random.default_rng(seed)
    b_h, b_w = rng.standard_normal((J, H)), rng.standard_normal(W)
    X = [rng.standard_normal((T, H, W)) for _ in range(N)]
    A = [np.einsum("jh,thw,w->tj", b_h, x, b_w) + noise * rng.standard_normal((T, J)) for x in X]
    return X, A


def test_exact_recovery_noiseless():
    X, A = bilinear_problem(0, N=3, T=20, H=8, W=9, J=3)
    model, trace = fit(X, A, TrainConfig(ranks=(8, 9), tol=1e-10, max_iterations=2000))
    assert trace.converged
    err = np.concatenate([model.predict_many(x) - a for x, a in zip(X, A)])
    assert np.sqrt(np.mean(err**2)) <= 1e-6


def test_objective_non_increasing():
    X, A = bilinear_problem(1, noise=0.3)
    _, trace = fit(X, A, TrainConfig(ranks=(4, 5), init="random", seed=3))
    assert np.all(np.diff(trace.objective) <= 1e-9)
    assert len(trace.delta_h) == trace.iterations == len(trace.objective) - 1


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_least_squares_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    T, H, W, J = int(rng.integers(3, 7)), int(rng.integers(2, 9)), int(rng.integers(2, 9)), 2
    N = int(np.ceil(3 * (J * H + W) / (T * J)))
    X, A = bilinear_problem(100 + seed, N=N, T=T, H=H, W=W, J=J, noise=0.05)
    model, _ = fit(X, A, TrainConfig(ranks=(H, W), ridge=0.0, tol=1e-13, max_iterations=20000))
    ours = np.concatenate([model.predict_many(x) for x in X])
    ref, _ = bilinear_ls_predictions(X, A)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-6)


def test_replication_order_invariance():
    X, A = bilinear_problem(2, N=4, noise=0.2)
    m1, _ = fit(X, A, TrainConfig(tol=1e-12, max_iterations=5000))
    perm = [2, 0, 3, 1]
    m2, _ = fit([X[i] for i in perm], [A[i] for i in perm], TrainConfig(tol=1e-12, max_iterations=5000))
    for x in X:
        np.testing.assert_allclose(m1.predict_many(x), m2.predict_many(x), rtol=0, atol=1e-8)


def test_energy_rank_selection_recorded():
    X, A = bilinear_problem(3, N=2, T=10, H=8, W=8)
    _, trace = fit(X, A, TrainConfig(energy=0.95))
    n, t, p, q = trace.ranks
    assert (n, t) == (2, 10)
    assert 1 <= p <= 8 and 1 <= q <= 8
    assert trace.energy[2] >= 0.95 - 1e-12 and trace.energy[3] >= 0.95 - 1e-12


def test_zero_masks_raise_singular():
    with pytest.raises(SingularNormalEquations, match="C_h"):
        fit([np.zeros((2, 4, 4))], [np.ones((2, 2))])


def test_singular_without_ridge_reports_step():
    # a mask that is constant along width makes the C_w system rank one
    rng = np.random.default_rng(4)
    X = [np.repeat(rng.standard_normal((6, 5, 1)), 4, axis=2) for _ in range(2)]
    A = [rng.standard_normal((6, 2)) for _ in range(2)]
    with pytest.raises(SingularNormalEquations):
        fit(X, A, TrainConfig(ranks=(5, 4), ridge=0.0))


def test_inconsistent_shapes_rejected():
    with pytest.raises(DataError, match="cycle 1"):
        fit([np.ones((3, 4, 4)), np.ones((3, 4, 5))], [np.ones((3, 2))] * 2)
    with pytest.raises(DataError):
        fit([np.ones((3, 4, 4))], [np.ones((4, 2))])


def test_non_convergence_is_flagged():
    X, A = bilinear_problem(5, noise=0.5)
    model, trace = fit(X, A, TrainConfig(init="random", max_iterations=2, tol=1e-15))
    assert not trace.converged and trace.iterations == 2
    assert isinstance(model, TrModel)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tol=0)
    with pytest.raises(ValueError):
        TrainConfig(ridge=-1)
    with pytest.raises(ValueError):
        TrainConfig(init="zeros")


def test_predict_linear_and_factorized():
    rng = np.random.default_rng(6)
    m = TrModel(b_h=rng.standard_normal((3, 5)), b_w=rng.standard_normal(4))
    np.testing.assert_array_equal(predict(m, np.zeros((5, 4))), np.zeros(3))
    x1, x2 = rng.standard_normal((2, 5, 4))
    np.testing.assert_allclose(
        predict(m, 2.5 * x1 - 0.7 * x2), 2.5 * predict(m, x1) - 0.7 * predict(m, x2), atol=1e-10
    )
    u, v = rng.standard_normal(5), rng.standard_normal(4)
    np.testing.assert_allclose(predict(m, np.outer(u, v)), (m.b_h @ u) * (v @ m.b_w), rtol=1e-12)
    np.testing.assert_allclose(m.predict_many(np.stack([x1, x2])), [predict(m, x1), predict(m, x2)])
    with pytest.raises(ValueError):
        predict(m, np.zeros((4, 5)))


def test_residual():
    rng = np.random.default_rng(7)
    m = TrModel(b_h=rng.standard_normal((3, 5)), b_w=rng.standard_normal(4))
    x = rng.standard_normal((5, 4))
    a = predict(m, x)
    np.testing.assert_array_equal(residual(m, a, x), np.zeros(3))
    np.testing.assert_allclose(residual(m, a + 1.25, x), np.full(3, 1.25), atol=1e-12)
    with pytest.raises(ValueError):
        residual(m, np.zeros(2), x)


def test_accuracy_metrics():
    rng = np.random.default_rng(8)
    m = TrModel(b_h=rng.standard_normal((3, 5)), b_w=rng.standard_normal(4))
    X = [rng.standard_normal((6, 5, 4)) for _ in range(2)]
    perfect = [m.predict_many(x) for x in X]
    acc = accuracy(m, X, perfect)
    assert acc.rmse_avg == pytest.approx(0.0, abs=1e-12) and acc.mae_avg == pytest.approx(0.0, abs=1e-12)
    biased = [p + np.array([0.0, 1.0, 0.0]) for p in perfect]
    acc = accuracy(m, X, biased)
    assert acc.mae[1] == pytest.approx(1.0) and acc.rmse[1] == pytest.approx(1.0)
    assert acc.mae[0] == pytest.approx(0.0, abs=1e-12)


def test_accuracy_average_reporting_convention():
    # averages are plain means over joints, rounded to four places
    rmse = np.array([3.0210, 2.0391, 1.7602, 2.9293, 3.4146, 3.5566])
    mae = np.array([2.3733, 1.5469, 1.2892, 2.1754, 2.5097, 2.6163])
    from vistr.tr import Accuracy

    acc = Accuracy(rmse=rmse, mae=mae)
    assert round(acc.rmse_avg, 4) == 2.7868
    assert round(acc.mae_avg, 4) == 2.0851


def test_model_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    m = TrModel(b_h=rng.standard_normal((3, 5)), b_w=rng.standard_normal(4))
    save_model(m, tmp_path, config={"energy": 0.95})
    back = load_model(tmp_path)
    assert back.b_h.tobytes() == m.b_h.tobytes() and back.b_w.tobytes() == m.b_w.tobytes()
    with pytest.raises(DataError):
        load_model(tmp_path / "missing")


def test_model_is_immutable():
    m = TrModel(b_h=np.ones((2, 3)), b_w=np.ones(4))
    with pytest.raises(ValueError):
        m.b_h[0, 0] = 5.0
    with pytest.raises(ValueError):
        TrModel(b_h=np.full((2, 3), np.nan), b_w=np.ones(4))


@pytest.mark.parametrize("seed", range(4))
def test_accelerated_als_is_monotone_and_matches_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    T, H, W, J = 5, int(rng.integers(3, 8)), int(rng.integers(3, 8)), 2
    N = int(np.ceil(3 * (J * H + W) / (T * J)))
    X, A = bilinear_problem(200 + seed, N=N, T=T, H=H, W=W, J=J, noise=0.05)
    cfg = TrainConfig(ranks=(H, W), ridge=0.0, tol=1e-13, max_iterations=20000, accelerate=True)
    model, trace = fit(X, A, cfg)
    assert np.all(np.diff(trace.objective) <= 1e-9)
    ref, _ = bilinear_ls_predictions(X, A)
    np.testing.assert_allclose(np.concatenate([model.predict_many(x) for x in X]), ref, atol=1e-6)
    _, plain = fit(X, A, TrainConfig(ranks=(H, W), ridge=0.0, tol=1e-13, max_iterations=20000))
    assert trace.objective[-1] <= plain.objective[-1] + 1e-9
