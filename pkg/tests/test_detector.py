import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from oracles import chi2_cdf_quadrature, chi2_quantile_bisection
from vistr.detector import (
    DetectorConfig,
    IidModel,
    OnlineDetector,
    alarm_frequency,
    chi2_quantile,
    detection_delay,
    evaluate,
    fit_iid,
    load_iid,
    mahalanobis,
    save_iid,
)
from vistr.errors import DataError, NumericalError
from vistr.mvgp import MvgpModel, SeKernel
from vistr.tr import TrModel


def spd(rng, J):
    a = rng.standard_normal((J, J))
    return a @ a.T + 0.5 * np.eye(J)


def test_chi2_quantile_oracle_dof6():
    x = chi2_quantile(6, 0.995)
    assert abs(x - chi2_quantile_bisection(6, 0.995)) <= 1e-3
    assert x == pytest.approx(18.5476, abs=1e-4)


@pytest.mark.parametrize("alpha", [0.5, 0.05, 0.005, 1e-6])
def test_chi2_quantile_dof2_closed_form(alpha):
    assert chi2_quantile(2, 1 - alpha) == pytest.approx(-2 * math.log(alpha), abs=1e-9)


def test_chi2_quantile_dof1_median():
    assert chi2_quantile(1, 0.5) == pytest.approx(0.4549, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(dof=st.integers(1, 40), p=st.floats(0.01, 0.999))
def test_chi2_quantile_inverts_cdf(dof, p):
    assert chi2_cdf_quadrature(chi2_quantile(dof, p), dof) == pytest.approx(p, abs=1e-9)


def test_chi2_quantile_rejects_bad_input():
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            chi2_quantile(3, p)
    with pytest.raises(ValueError):
        chi2_quantile(0, 0.5)


def test_mahalanobis_basic():
    assert mahalanobis([1.0, 2.0], [1.0, 2.0], 1.0, np.eye(2)) == 0.0
    assert mahalanobis([1.0, 0.0, 0.0], np.zeros(3), 1.0, np.eye(3)) == 1.0
    assert mahalanobis([2.0, 0.0], np.zeros(2), 4.0, np.eye(2)) == 1.0


def test_mahalanobis_matches_explicit_inverse():
    rng = np.random.default_rng(0)
    for _ in range(100):
        J = int(rng.integers(1, 7))
        S, r, m, s = spd(rng, J), rng.standard_normal(J), rng.standard_normal(J), rng.uniform(0.1, 3)
        expect = (r - m) @ np.linalg.inv(S) @ (r - m) / s
        assert mahalanobis(r, m, s, S) == pytest.approx(expect, rel=1e-10, abs=1e-10)


def test_mahalanobis_congruence_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        J = 4
        S, d, A = spd(rng, J), rng.standard_normal(J), rng.standard_normal((J, J)) + 3 * np.eye(J)
        g1 = mahalanobis(d, np.zeros(J), 1.3, S)
        g2 = mahalanobis(A @ d, np.zeros(J), 1.3, A @ S @ A.T)
        assert g2 == pytest.approx(g1, rel=1e-8)


def test_mahalanobis_errors():
    with pytest.raises(NumericalError):
        mahalanobis([1.0, 1.0], [0.0, 0.0], 1.0, -np.eye(2))
    with pytest.raises(ValueError):
        mahalanobis([1.0], [0.0], 0.0, np.eye(1))


def test_detector_config_threshold():
    cfg = DetectorConfig(dof=6)
    assert cfg.alpha == 0.005 and cfg.threshold == chi2_quantile(6, 0.995)
    with pytest.raises(ValueError):
        DetectorConfig(dof=6, alpha=1.0)
    with pytest.raises(ValueError):
        DetectorConfig(dof=6, residual_model="cusum")


def test_fit_iid_hand_example():
    m = fit_iid([np.array([[1.0, 0.0], [-1.0, 0.0]])])
    np.testing.assert_array_equal(m.mean, [0.0, 0.0])
    np.testing.assert_allclose(m.cov, np.diag([1.0 + 1e-10, 1e-10]), rtol=0, atol=1e-15)


def test_fit_iid_monte_carlo_and_permutation():
    rng = np.random.default_rng(2)
    mu, S = rng.standard_normal(3), spd(rng, 3)
    x = rng.multivariate_normal(mu, S, size=10_000)
    m = fit_iid([x[:4000], x[4000:]])
    assert np.linalg.norm(m.cov - S) <= 0.05 * np.linalg.norm(S)
    assert np.linalg.norm(m.mean - mu) <= 0.05 * max(np.linalg.norm(mu), 1.0)
    p = fit_iid([x[rng.permutation(len(x))]])
    np.testing.assert_allclose(p.mean, m.mean, atol=1e-12)
    np.testing.assert_allclose(p.cov, m.cov, atol=1e-12)


def test_fit_iid_too_few_samples():
    with pytest.raises(ValueError):
        fit_iid([np.zeros((1, 3))])


def test_detection_delay_and_frequency():
    alarms = np.array([1, 0, 0, 0, 1, 1, 0, 1], bool)
    assert detection_delay(alarms, 4) == 0
    assert detection_delay(alarms, 2) == 2
    assert detection_delay(np.zeros(5, bool), 1) is None
    assert detection_delay(alarms, None) is None
    assert alarm_frequency(alarms, 4) == 0.75
    assert alarm_frequency(alarms, None) is None


def test_evaluate_unit_covariance():
    T = 7
    rep = evaluate(np.zeros((T, 2)), np.zeros((T, 2)), np.ones(T), np.eye(2), threshold=5.0)
    assert rep.nll == pytest.approx(math.log(2 * math.pi), abs=1e-14)
    assert rep.log_vol == pytest.approx(0.0, abs=1e-14)
    assert rep.false_alarm_rate == 0.0 and rep.delay is None and rep.alarm_frequency is None


def test_evaluate_matches_dense_densities():
    rng = np.random.default_rng(3)
    T, J = 9, 3
    r, m, s, S = rng.standard_normal((T, J)), rng.standard_normal((T, J)), rng.uniform(0.2, 2, T), spd(rng, J)
    rep = evaluate(r, m, s, S, threshold=chi2_quantile(J, 0.9), onset=3)
    from scipy.stats import multivariate_normal

    nll = -np.mean([multivariate_normal(m[t], s[t] * S).logpdf(r[t]) for t in range(T)])
    vol = np.mean([0.5 * np.linalg.slogdet(s[t] * S)[1] for t in range(T)])
    assert rep.nll == pytest.approx(nll, rel=1e-12) and rep.log_vol == pytest.approx(vol, rel=1e-12)
    assert 0 <= rep.alarm_frequency <= 1 and 0 <= rep.false_alarm_rate <= 1
    with pytest.raises(NumericalError):
        evaluate(r, m, np.zeros(T), S, threshold=1.0)


def make_tr(rng, J=3, H=4, W=5):
    return TrModel(b_h=rng.standard_normal((J, H)), b_w=rng.standard_normal(W))


def test_step_zero_residual_no_alarm():
    rng = np.random.default_rng(4)
    tr = make_tr(rng)
    det = OnlineDetector(tr, IidModel(mean=np.zeros(3), cov=np.eye(3)))
    mask = rng.integers(0, 2, (4, 5)).astype(float)
    g, alarm = det.step(0, mask, tr.predict(mask))
    assert g == pytest.approx(0.0, abs=1e-20) and not alarm


def test_mvgp_prior_mode_is_memoryless():
    rng = np.random.default_rng(5)
    tr = make_tr(rng)
    gp = MvgpModel(mean=rng.standard_normal((10, 3)), kernel=SeKernel(1.0, 2.0), noise_var=0.1,
                   output_cov=spd(rng, 3), replications=4)
    det = OnlineDetector(tr, gp)
    mask, rep = rng.standard_normal((4, 5)), rng.standard_normal(3)
    g1, _ = det.step(6, mask, rep)
    det.step(7, rng.standard_normal((4, 5)), rng.standard_normal(3))
    g2, _ = det.step(6, mask, rep)
    assert g1 == g2


def test_iid_equals_white_noise_mvgp():
    rng = np.random.default_rng(6)
    T, J = 12, 3
    S = spd(rng, J)
    # a vanishing length scale makes the kernel white
    gp = MvgpModel(mean=np.tile(rng.standard_normal(J), (T, 1)), kernel=SeKernel(0.8, 1e-3),
                   noise_var=0.36, output_cov=S, replications=5)
    # on-grid, a white kernel leaves the same conditional scale at every frame
    scale = gp.grid_scale[0]
    np.testing.assert_allclose(gp.grid_scale, scale, rtol=1e-12)
    iid = IidModel(mean=gp.mean[0], cov=scale * S)
    tr = make_tr(rng, J=J)
    for t in range(T):
        mask, reported = rng.standard_normal((4, 5)), rng.standard_normal(J)
        g_gp, _ = OnlineDetector(tr, gp).step(t, mask, reported)
        g_iid, _ = OnlineDetector(tr, iid).step(t, mask, reported)
        assert g_gp == pytest.approx(g_iid, rel=1e-6)


def test_false_alarm_rate_under_null():
    rng = np.random.default_rng(7)
    T, J, alpha = 50, 6, 0.005
    gp = MvgpModel(mean=rng.standard_normal((T, J)), kernel=SeKernel(1.0, 5.0), noise_var=0.04,
                   output_cov=spd(rng, J), replications=8)
    cfg = DetectorConfig(dof=J, alpha=alpha)
    n, alarms = 0, 0
    while n < 25_000:
        t = n % T
        pd = gp.predict(t)
        r = rng.multivariate_normal(pd.mean, pd.cov)
        alarms += mahalanobis(r, pd.mean, pd.scale, gp.output_cov) > cfg.threshold
        n += 1
    lo, hi = binom.ppf(0.005, n, alpha) / n, binom.ppf(0.995, n, alpha) / n
    assert lo <= alarms / n <= hi


def test_run_report_and_exports(tmp_path):
    rng = np.random.default_rng(8)
    tr = make_tr(rng)
    iid = IidModel(mean=np.zeros(3), cov=np.eye(3))
    masks = rng.standard_normal((20, 4, 5))
    reported = np.array([tr.predict(m) for m in masks])
    reported[10:] += 10.0
    rep = OnlineDetector(tr, iid).run(masks, reported, onset=10, meta={"cycle": "a1"})
    assert rep.delay == 0 and rep.alarm_frequency == 1.0 and rep.false_alarm_rate == 0.0
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["cycle"] == "a1" and len(data["g"]) == 20 and data["alarms"][10] == 1
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["t", "g", "alarm"] and len(rows) == 21
    assert float(rows[15][1]) == rep.g[15]


def test_run_shape_checks():
    rng = np.random.default_rng(9)
    tr = make_tr(rng)
    det = OnlineDetector(tr, IidModel(mean=np.zeros(3), cov=np.eye(3)))
    with pytest.raises(DataError):
        det.run(np.zeros((5, 4, 6)), np.zeros((5, 3)))
    with pytest.raises(DataError):
        det.run(np.zeros((5, 4, 5)), np.zeros((4, 3)))
    with pytest.raises(DataError):
        OnlineDetector(tr, IidModel(mean=np.zeros(2), cov=np.eye(2)))
    with pytest.raises(ValueError):
        det.step(0, np.zeros((4, 5)), np.zeros(2))


def test_iid_roundtrip(tmp_path):
    m = fit_iid([np.random.default_rng(10).standard_normal((30, 4))])
    save_iid(m, tmp_path)
    back = load_iid(tmp_path)
    assert back.mean.tobytes() == m.mean.tobytes() and back.cov.tobytes() == m.cov.tobytes()
    with pytest.raises(DataError):
        load_iid(tmp_path / "x")
