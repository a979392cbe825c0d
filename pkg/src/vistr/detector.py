"""Per-frame chi-squared test on TR residuals, the IID baseline, and metrics.

The detector compares each encoder reading against the vision estimate of
the same frame. The residual is scored against a predictive distribution
``N(m, scale * Sigma)`` supplied by a residual model (MVGP or IID), and an
alarm is raised when the Mahalanobis statistic exceeds the ``1 - alpha``
quantile of ``chi2_J``. Each frame is tested on its own; nothing is
accumulated across frames.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import gammainc

from . import __version__
from .errors import DataError, NumericalError
from .mvgp import PredictiveDist
from .tensor import read_ten, write_ten
from .tr import TrModel

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_ALPHA",
    "DetectorConfig",
    "IidModel",
    "DetectionReport",
    "OnlineDetector",
    "chi2_quantile",
    "mahalanobis",
    "fit_iid",
    "evaluate",
    "detection_delay",
    "alarm_frequency",
    "save_iid",
    "load_iid",
]

DEFAULT_ALPHA = 0.005
IID_FLOOR = 1e-10


def chi2_quantile(dof: int, p: float) -> float:
    """Quantile of the chi-squared distribution with ``dof`` degrees of freedom.

    Inverts the regularized lower incomplete gamma function with Brent's
    method on a bracket grown until it contains the root.
    """
    if not (0.0 < p < 1.0):
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    k = 0.5 * dof

    def excess(x):
        return gammainc(k, 0.5 * x) - p

    hi = max(2.0 * dof, 1.0)
    while excess(hi) < 0:
        hi *= 2.0
    return float(scipy.optimize.brentq(excess, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps,
                                       maxiter=500))


def _chol(sigma):
    try:
        return scipy.linalg.cho_factor(np.asarray(sigma, dtype=np.float64), lower=True,
                                       check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("output covariance is not positive definite") from exc


def mahalanobis(r, m_hat, scale: float, sigma, *, sigma_chol=None) -> float:
    """``(r - m)^T Sigma^{-1} (r - m) / scale`` via a Cholesky solve."""
    if not scale > 0:
        raise ValueError(f"predictive scale must be positive, got {scale}")
    d = np.asarray(r, dtype=np.float64) - np.asarray(m_hat, dtype=np.float64)
    chol = sigma_chol if sigma_chol is not None else _chol(sigma)
    z = scipy.linalg.solve_triangular(chol[0], d, lower=True, check_finite=False)
    return float(z @ z) / scale


@dataclass(frozen=True)
class DetectorConfig:
    dof: int
    alpha: float = DEFAULT_ALPHA
    residual_model: str = "mvgp"

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.residual_model not in ("mvgp", "iid"):
            raise ValueError(f"unknown residual model {self.residual_model!r}")
        object.__setattr__(self, "threshold", chi2_quantile(self.dof, 1.0 - self.alpha))


@dataclass
class IidModel:
    """Time-invariant Gaussian residual model: one mean and covariance for all frames."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=np.float64)
        self.cov = np.array(self.cov, dtype=np.float64)
        J = self.mean.shape[0]
        if self.mean.shape != (J,) or self.cov.shape != (J, J):
            raise ValueError("inconsistent IID model shapes")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12):
            raise ValueError("IID covariance must be symmetric")
        self.cov_chol = _chol(self.cov)
        self.mean.flags.writeable = False
        self.cov.flags.writeable = False

    @property
    def J(self) -> int:
        return self.mean.shape[0]

    scale_floor = 0.0

    @property
    def output_cov(self) -> np.ndarray:
        return self.cov

    def predict(self, t_star) -> PredictiveDist:
        return PredictiveDist(self.mean, 1.0, self.cov)


def fit_iid(residual_cycles) -> IidModel:
    """Pooled mean and maximum-likelihood covariance over every frame of every cycle."""
    R = np.concatenate([np.asarray(r, dtype=np.float64) for r in residual_cycles])
    n, J = R.shape
    if n < 2:
        raise ValueError(f"IID fit needs at least two residual frames, got {n}")
    if n < J + 1:
        log.warning("IID fit on %d frames for J=%d: covariance is rank deficient before flooring", n, J)
    mean = R.mean(axis=0)
    d = R - mean
    cov = d.T @ d / n
    cov = 0.5 * (cov + cov.T) + IID_FLOOR * np.eye(J)
    return IidModel(mean=mean, cov=cov)


def save_iid(model: IidModel, directory, name: str = "iid") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"mean": f"{name}_mean.ten", "cov": f"{name}_cov.ten"}
    write_ten(directory / files["mean"], model.mean)
    write_ten(directory / files["cov"], model.cov)
    path = directory / f"{name}.json"
    manifest = {"J": model.J, "created": {"by": f"vistr {__version__}"}, "files": files}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_iid(directory, name: str = "iid") -> IidModel:
    directory = Path(directory)
    path = directory / f"{name}.json"
    try:
        m = json.loads(path.read_text())
        model = IidModel(mean=read_ten(directory / m["files"]["mean"]),
                         cov=read_ten(directory / m["files"]["cov"]))
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load IID model from {path}: {exc}") from exc
    if model.J != m["J"]:
        raise DataError(f"{path}: manifest J disagrees with payload")
    return model


def detection_delay(alarms, onset: int | None) -> int | None:
    """Frames from ``onset`` to the first alarm at or after it; None if none fires."""
    if onset is None:
        return None
    hits = np.flatnonzero(np.asarray(alarms, dtype=bool)[onset:])
    return int(hits[0]) if hits.size else None


def alarm_frequency(alarms, onset: int | None) -> float | None:
    """Share of post-onset frames flagged."""
    alarms = np.asarray(alarms, dtype=bool)
    if onset is None or onset >= alarms.size:
        return None
    return float(alarms[onset:].mean())


@dataclass
class DetectionReport:
    g: np.ndarray
    alarms: np.ndarray
    threshold: float
    alpha: float
    onset: int | None
    delay: int | None
    alarm_frequency: float | None
    false_alarm_rate: float | None
    nll: float
    log_vol: float
    meta: dict = field(default_factory=dict)

    @property
    def detected(self) -> bool:
        return self.delay is not None

    def to_dict(self) -> dict:
        return {
            **self.meta,
            "alpha": self.alpha,
            "threshold": self.threshold,
            "onset": self.onset,
            "delay": self.delay,
            "alarm_frequency": self.alarm_frequency,
            "false_alarm_rate": self.false_alarm_rate,
            "nll": self.nll,
            "log_vol": self.log_vol,
            "g": [float(v) for v in self.g],
            "alarms": [int(a) for a in self.alarms],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "g", "alarm"])
            for t, (g, a) in enumerate(zip(self.g, self.alarms)):
                w.writerow([t, repr(float(g)), int(a)])


def evaluate(residuals, means, scales, output_cov, threshold: float, alpha: float = DEFAULT_ALPHA,
             onset: int | None = None, meta: dict | None = None, g=None) -> DetectionReport:
    """Score a residual sequence against per-frame predictives ``N(m_t, s_t * Sigma)``.

    Returns the statistic and alarm per frame together with detection delay,
    post-onset alarm frequency, the pre-onset (or whole-run) false-alarm
    rate, the average negative log predictive density and the log-volume
    ``mean_t 0.5 log|s_t Sigma|``. A precomputed statistic ``g`` (as
    streamed by :class:`OnlineDetector`) is used as-is when given.
    """
    r = np.asarray(residuals, dtype=np.float64)
    m = np.asarray(means, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    T, J = r.shape
    if m.shape != (T, J) or s.shape != (T,):
        raise ValueError("residuals, means and scales disagree in shape")
    if np.any(s <= 0):
        raise NumericalError("predictive covariance is singular (non-positive scale)")
    chol = _chol(output_cov)
    if g is None:
        z = scipy.linalg.solve_triangular(chol[0], (r - m).T, lower=True, check_finite=False)
        g = np.sum(z * z, axis=0) / s
    g = np.asarray(g, dtype=np.float64)
    alarms = g > threshold
    logdet = J * np.log(s) + 2.0 * np.sum(np.log(np.diag(chol[0])))
    log_vol = float(np.mean(0.5 * logdet))
    nll = float(np.mean(0.5 * (J * math.log(2 * math.pi) + logdet) + 0.5 * g))
    if onset is not None and not (0 <= onset <= T):
        raise ValueError(f"onset {onset} outside [0, {T}]")
    nominal = alarms[:onset] if onset is not None else alarms
    return DetectionReport(
        g=g,
        alarms=alarms,
        threshold=float(threshold),
        alpha=float(alpha),
        onset=onset,
        delay=detection_delay(alarms, onset),
        alarm_frequency=alarm_frequency(alarms, onset),
        false_alarm_rate=float(nominal.mean()) if nominal.size else None,
        nll=nll,
        log_vol=log_vol,
        meta=dict(meta or {}),
    )


class OnlineDetector:
    """Streams frames through the vision estimator and the residual test.

    One instance per monitored stream; ``step`` calls must be sequential.
    The models themselves are read-only and may be shared across detectors.
    """

    def __init__(self, tr_model: TrModel, residual_model, config: DetectorConfig | None = None):
        if tr_model.J != residual_model.J:
            raise DataError(f"TR model has J={tr_model.J} but residual model has J={residual_model.J}")
        self.tr = tr_model
        self.model = residual_model
        self.config = config or DetectorConfig(dof=tr_model.J)
        if self.config.dof != tr_model.J:
            raise ValueError("detector dof must equal the joint count")
        self._chol = _chol(residual_model.output_cov)
        self.reset()

    def reset(self) -> None:
        self._r, self._m, self._s, self._g = [], [], [], []

    def step(self, t_star, mask, reported) -> tuple[float, bool]:
        reported = np.asarray(reported, dtype=np.float64)
        if reported.shape != (self.tr.J,):
            raise ValueError(f"reported angles must have shape ({self.tr.J},)")
        r = reported - self.tr.predict(mask)
        pd = self.model.predict(t_star)
        scale = max(pd.scale, self.model.scale_floor)
        g = mahalanobis(r, pd.mean, scale, None, sigma_chol=self._chol)
        self._r.append(r)
        self._m.append(pd.mean)
        self._s.append(scale)
        self._g.append(g)
        return g, g > self.config.threshold

    def run(self, masks, reported, onset: int | None = None, meta: dict | None = None) -> DetectionReport:
        """Stream a full cycle frame by frame and summarize it."""
        self.reset()
        masks = np.asarray(masks)
        reported = np.asarray(reported, dtype=np.float64)
        if masks.shape[0] != reported.shape[0]:
            raise DataError("mask and angle streams have different lengths")
        if masks.shape[1:] != (self.tr.H, self.tr.W):
            raise DataError(f"masks are {masks.shape[1:]}, model expects ({self.tr.H}, {self.tr.W})")
        for t in range(reported.shape[0]):
            self.step(t, masks[t], reported[t])
        return self.report(onset, meta)

    def report(self, onset: int | None = None, meta: dict | None = None) -> DetectionReport:
        J = self.tr.J
        return evaluate(np.array(self._r).reshape(-1, J), np.array(self._m).reshape(-1, J),
                        np.array(self._s), self.model.output_cov, self.config.threshold,
                        self.config.alpha, onset, meta, g=np.array(self._g))
