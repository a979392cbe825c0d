"""Matrix-variate Gaussian process model of nominal residual cycles.

Each nominal residual cycle ``R_i`` (T x J) is modelled as
``MN(M, K', Sigma)``: the mean ``M`` is the per-frame empirical mean over
replications, the row covariance ``K' = K_se + sigma^2 I`` comes from a
squared-exponential kernel over frame indices plus white noise, and the
column covariance ``Sigma`` couples joints.

Hyperparameters (length scale, signal std, noise std) are fit by gradient
ascent on the log-likelihood in log space. ``Sigma`` is never optimized
directly: at every evaluation it is set to its closed-form maximizer for the
current kernel, so the ascent runs on the profile likelihood.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import __version__
from .errors import DataError, NumericalError
from .kernels import se_kernel_matrix
from .tensor import read_ten, write_ten

log = logging.getLogger(__name__)

__all__ = [
    "SeKernel",
    "MvgpOptions",
    "MvgpModel",
    "PredictiveDist",
    "se_kernel",
    "empirical_mean",
    "log_likelihood",
    "grad_log_likelihood",
    "fit",
    "save_model",
    "load_model",
]

JITTER = 1e-8
SIGMA_FLOOR = 1e-10
DEGENERATE_STD = 1e-6


@dataclass(frozen=True)
class SeKernel:
    signal_std: float
    length_scale: float

    def __post_init__(self):
        for name in ("signal_std", "length_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v}")

    def __call__(self, t, t2) -> float:
        return se_kernel(self, t, t2)

    def matrix(self, t1, t2) -> np.ndarray:
        return se_kernel_matrix(t1, t2, self.signal_std, self.length_scale)


def se_kernel(k: SeKernel, t, t2) -> float:
    d = float(t) - float(t2)
    return k.signal_std**2 * math.exp(-(d * d) / (2.0 * k.length_scale**2))


def empirical_mean(residual_cycles) -> np.ndarray:
    R = _as_cycles(residual_cycles)
    return R.mean(axis=0)


def _as_cycles(residual_cycles) -> np.ndarray:
    R = np.asarray([np.asarray(r, dtype=np.float64) for r in residual_cycles])
    if R.ndim != 3 or R.shape[0] < 1:
        raise ValueError("residual cycles must be a non-empty list of T x J matrices")
    return R


def _grid(T, grid):
    if grid is None:
        return np.arange(T, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (T,):
        raise ValueError(f"grid must have length {T}")
    return grid


def _cholesky(a, what):
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def _noisy_kernel(kernel: SeKernel, noise_var: float, grid, noise_scale=1.0):
    k_se = kernel.matrix(grid, grid)
    diag = JITTER * kernel.signal_std**2 + noise_var * noise_scale
    return k_se, k_se + diag * np.eye(grid.size)


def _logdet(chol) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol[0]))))


class _Terms:
    """Factorizations shared by the likelihood, its gradient and the Sigma update."""

    def __init__(self, dev, kernel, noise_var, grid):
        self.dev = dev
        self.N, self.T, self.J = dev.shape
        self.kernel = kernel
        self.noise_var = noise_var
        self.grid = grid
        self.k_se, self.k_noisy = _noisy_kernel(kernel, noise_var, grid)
        self.k_chol = _cholesky(self.k_noisy, "K'")
        # K'^{-1/2}-whitened deviations, (N, T, J)
        lower = self.k_chol[0]
        flat = np.transpose(dev, (1, 0, 2)).reshape(self.T, -1)
        self.white = scipy.linalg.solve_triangular(lower, flat, lower=True, check_finite=False)

    def sigma_mle(self) -> np.ndarray:
        w = self.white.reshape(self.T, self.N, self.J)
        s = np.einsum("tnj,tnk->jk", w, w) / (self.N * self.T)
        s = 0.5 * (s + s.T)
        return s + SIGMA_FLOOR * np.eye(self.J)

    def loglik(self, sigma) -> float:
        s_chol = _cholesky(sigma, "Sigma")
        N, T, J = self.N, self.T, self.J
        w = self.white.reshape(T, N, J)
        # tr(Sigma^{-1} D^T K'^{-1} D) summed over replications
        z = scipy.linalg.solve_triangular(
            s_chol[0], w.reshape(-1, J).T, lower=True, check_finite=False
        )
        quad = float(np.sum(z * z))
        return (
            -0.5 * N * T * J * math.log(2 * math.pi)
            - 0.5 * N * T * _logdet(s_chol)
            - 0.5 * N * J * _logdet(self.k_chol)
            - 0.5 * quad
        )

    def grad(self, sigma) -> np.ndarray:
        N, T, J = self.N, self.T, self.J
        s_chol = _cholesky(sigma, "Sigma")
        flat = np.transpose(self.dev, (1, 0, 2)).reshape(T * N, J)
        # D_i Sigma^{-1/2}, stacked column-wise into T x (N J)
        z = scipy.linalg.solve_triangular(s_chol[0], flat.T, lower=True, check_finite=False)
        z = z.T.reshape(T, N * J)
        alpha = scipy.linalg.cho_solve(self.k_chol, z, check_finite=False)
        k_inv = scipy.linalg.cho_solve(self.k_chol, np.eye(T), check_finite=False)
        w = alpha @ alpha.T - N * J * k_inv
        d2 = (self.grid[:, None] - self.grid[None, :]) ** 2
        ell = self.kernel.length_scale
        s2 = self.kernel.signal_std**2
        d_log_ell = self.k_se * d2 / ell**2
        g_ell = 0.5 * float(np.sum(w * d_log_ell))
        g_sig = 0.5 * float(np.sum(w * (2.0 * self.k_se)) + np.trace(w) * 2.0 * JITTER * s2)
        g_noise = 0.5 * float(np.trace(w)) * 2.0 * self.noise_var
        return np.array([g_ell, g_sig, g_noise])


def _deviations(residual_cycles, mean):
    R = _as_cycles(residual_cycles)
    M = np.asarray(mean, dtype=np.float64)
    if M.shape != R.shape[1:]:
        raise ValueError(f"mean shape {M.shape} does not match residual cycles {R.shape[1:]}")
    return R - M


def log_likelihood(residual_cycles, mean, kernel: SeKernel, noise_var: float, output_cov,
                   grid=None) -> float:
    """Joint log-density of independent replications under ``MN(M, K', Sigma)``."""
    dev = _deviations(residual_cycles, mean)
    terms = _Terms(dev, kernel, float(noise_var), _grid(dev.shape[1], grid))
    return terms.loglik(np.asarray(output_cov, dtype=np.float64))


def grad_log_likelihood(residual_cycles, mean, kernel: SeKernel, noise_var: float, output_cov,
                        grid=None) -> np.ndarray:
    """Gradient of :func:`log_likelihood` w.r.t. (log ell, log sigma_s, log sigma).

    ``output_cov`` is held fixed. With ``W = K'^{-1} S K'^{-1} - N J K'^{-1}``
    and ``S = sum_i D_i Sigma^{-1} D_i^T``, each component is
    ``0.5 * sum(W * dK'/dtheta)``.
    """
    dev = _deviations(residual_cycles, mean)
    terms = _Terms(dev, kernel, float(noise_var), _grid(dev.shape[1], grid))
    return terms.grad(np.asarray(output_cov, dtype=np.float64))


@dataclass
class MvgpOptions:
    """Fit settings.

    ``mode`` selects the conditioning matrix used online: ``"prior"`` conditions
    on the mean itself, ``"averaged"`` on the replication average with noise
    variance ``sigma^2 / N``. ``min_length_scale`` keeps the SE kernel from
    collapsing onto the white-noise term, where the two are indistinguishable
    on an integer frame grid. Ascent stops once the per-step gain drops below
    ``tol`` and the gradient norm is below ``gtol``.
    """

    max_iterations: int = 500
    tol: float = 1e-8
    gtol: float = 1e-7
    starts: int = 3
    seed: int = 0
    mode: str = "prior"
    min_length_scale: float = 1.0
    max_length_scale: float | None = None

    def __post_init__(self):
        if self.mode not in ("prior", "averaged"):
            raise ValueError(f"unknown conditioning mode {self.mode!r}")
        if self.starts < 1 or self.max_iterations < 1:
            raise ValueError("starts and max_iterations must be >= 1")


@dataclass(frozen=True)
class PredictiveDist:
    mean: np.ndarray
    scale: float
    output_cov: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return self.scale * self.output_cov


@dataclass
class MvgpModel:
    mean: np.ndarray
    kernel: SeKernel
    noise_var: float
    output_cov: np.ndarray
    replications: int
    mode: str = "prior"
    conditioning: np.ndarray | None = None
    loglik: float = float("nan")
    degenerate: bool = False
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=np.float64)
        self.output_cov = np.array(self.output_cov, dtype=np.float64)
        if self.conditioning is None:
            self.conditioning = self.mean
        self.conditioning = np.array(self.conditioning, dtype=np.float64)
        T, J = self.mean.shape
        if self.output_cov.shape != (J, J) or self.conditioning.shape != (T, J):
            raise ValueError("inconsistent MVGP shapes")
        if not np.allclose(self.output_cov, self.output_cov.T, rtol=0, atol=1e-12):
            raise ValueError("output covariance must be symmetric")
        if not (math.isfinite(self.noise_var) and self.noise_var >= 0) or self.replications < 1:
            raise ValueError("noise variance must be >= 0 and replications >= 1")
        self.grid = np.arange(T, dtype=np.float64)
        self.sigma_chol = _cholesky(self.output_cov, "Sigma")
        noise_scale = 1.0 / self.replications if self.mode == "averaged" else 1.0
        k_se, k_cond = _noisy_kernel(self.kernel, self.noise_var, self.grid, noise_scale)
        self.k_chol = _cholesky(k_cond, "K'")
        self._alpha = scipy.linalg.cho_solve(self.k_chol, self.conditioning - self.mean,
                                             check_finite=False)
        # on-grid predictive, computed once for every frame index
        gain = scipy.linalg.cho_solve(self.k_chol, k_se, check_finite=False)
        self.prior_var = self.kernel.signal_std**2 * (1.0 + JITTER) + self.noise_var
        self.grid_scale = np.clip(self.prior_var - np.einsum("ij,ij->j", k_se, gain), 0.0, None)
        self.grid_mean = self.mean + k_se @ self._alpha
        for a in (self.mean, self.output_cov, self.conditioning, self.grid_scale,
                  self.grid_mean, self._alpha, self.k_chol[0], self.sigma_chol[0]):
            a.flags.writeable = False

    @property
    def T(self) -> int:
        return self.mean.shape[0]

    @property
    def J(self) -> int:
        return self.mean.shape[1]

    @property
    def scale_floor(self) -> float:
        # guards the near-interpolation regime where the predictive scale cancels to ~0
        return 1e-12 * self.kernel.signal_std**2

    def grid_index(self, t_star) -> int | None:
        """Exact grid index for ``t_star``, or None when it is off-grid."""
        t = float(t_star)
        if t.is_integer() and 0 <= t < self.T:
            return int(t)
        return None

    def predict(self, t_star) -> PredictiveDist:
        """One-step-ahead predictive distribution of the residual at ``t_star``."""
        idx = self.grid_index(t_star)
        if idx is not None:
            return PredictiveDist(self.grid_mean[idx].copy(), float(self.grid_scale[idx]),
                                  self.output_cov)
        nearest = int(np.clip(np.rint(float(t_star)), 0, self.T - 1))
        warnings.warn(f"frame {t_star} is off the training grid; using mean at frame {nearest}",
                      stacklevel=2)
        k_star = self.kernel.matrix(self.grid, [float(t_star)])[:, 0]
        gain = scipy.linalg.cho_solve(self.k_chol, k_star, check_finite=False)
        scale = max(self.prior_var - float(k_star @ gain), 0.0)
        return PredictiveDist(self.mean[nearest] + k_star @ self._alpha, scale, self.output_cov)


def _initial_points(dev, opts: MvgpOptions):
    T = dev.shape[1]
    s0 = float(np.sqrt(np.mean(dev * dev)))
    base = np.log([max(T / 10.0, opts.min_length_scale), s0, s0 / 3.0])
    rng = np.random.default_rng(opts.seed)
    points = [base]
    for _ in range(opts.starts - 1):
        points.append(base + rng.normal(0.0, 0.5, size=3))
    return points


def _bounds(T, dev, opts: MvgpOptions):
    s0 = float(np.sqrt(np.mean(dev * dev)))
    hi_ell = opts.max_length_scale or 10.0 * T
    lo = np.log([opts.min_length_scale, s0 * 1e-6, s0 * 1e-6])
    hi = np.log([hi_ell, s0 * 1e3, s0 * 1e3])
    return lo, hi


def _evaluate(dev, x, grid):
    kernel = SeKernel(signal_std=float(np.exp(x[1])), length_scale=float(np.exp(x[0])))
    terms = _Terms(dev, kernel, float(np.exp(2 * x[2])), grid)
    sigma = terms.sigma_mle()
    return terms.loglik(sigma), terms.grad(sigma), sigma


def _free(g, x, lo, hi):
    # gradient components that are not pushing against an active bound
    blocked = ((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0))
    return np.where(blocked, 0.0, g)


def _ascend(dev, x0, grid, opts: MvgpOptions, lo, hi):
    """Projected gradient ascent with Barzilai-Borwein trial steps and Armijo backtracking."""
    x = np.clip(x0, lo, hi)
    f, g, sigma = _evaluate(dev, x, grid)
    history = [f]
    step = 0.1 / max(np.linalg.norm(g), 1e-12)
    x_prev = g_prev = None
    for _ in range(opts.max_iterations):
        if x_prev is not None:
            sx, sg = x - x_prev, g - g_prev
            curv = float(sx @ sg)
            step = float(sx @ sx) / -curv if curv < 0 else 2.0 * step
        step = min(step, 1.0 / max(np.linalg.norm(g), 1e-12))
        accepted = False
        for _ in range(60):
            x_new = np.clip(x + step * g, lo, hi)
            move = x_new - x
            if not np.any(move):
                break
            try:
                f_new, g_new, sigma_new = _evaluate(dev, x_new, grid)
            except NumericalError:
                step *= 0.5
                continue
            predicted = float(g @ move)
            if f_new >= f + 1e-4 * predicted:
                accepted = True
                break
            # below roundoff in f: accept a non-decreasing step that reduces the gradient
            if (predicted < 1e-10 * max(1.0, abs(f)) and f_new >= f
                    and np.linalg.norm(g_new) < np.linalg.norm(g)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        x_prev, g_prev = x, g
        gain = f_new - f
        x, f, g, sigma = x_new, f_new, g_new, sigma_new
        history.append(f)
        if gain < opts.tol and np.linalg.norm(_free(g, x, lo, hi)) <= opts.gtol:
            break
    return x, f, sigma, history


def fit(residual_cycles, opts: MvgpOptions | None = None) -> MvgpModel:
    """Maximum-likelihood MVGP fit to N nominal residual cycles (each T x J)."""
    opts = opts or MvgpOptions()
    R = _as_cycles(residual_cycles)
    N, T, J = R.shape
    if T < 2:
        raise ValueError("need at least two frames per cycle")
    if N == 1:
        log.warning("MVGP fit on a single replication: the empirical mean absorbs all variation")
    M = R.mean(axis=0)
    dev = R - M
    grid = np.arange(T, dtype=np.float64)

    if np.max(np.abs(dev)) <= 1e-12 * max(1.0, float(np.max(np.abs(R)))):
        log.warning("residual cycles are identical; returning a degenerate floored model")
        kernel = SeKernel(signal_std=DEGENERATE_STD,
                          length_scale=max(T / 10.0, opts.min_length_scale))
        return MvgpModel(mean=M, kernel=kernel, noise_var=DEGENERATE_STD**2,
                         output_cov=np.eye(J), replications=N, mode=opts.mode,
                         degenerate=True)

    lo, hi = _bounds(T, dev, opts)
    best = None
    for x0 in _initial_points(dev, opts):
        x, f, sigma, history = _ascend(dev, x0, grid, opts, lo, hi)
        gnorm = float(np.linalg.norm(_free(_evaluate(dev, x, grid)[1], x, lo, hi)))
        log.debug("MVGP start %s -> loglik %.6f in %d steps", np.exp(x0), f, len(history) - 1)
        # ties in loglik (to roundoff) go to the more stationary point
        tie = best is not None and abs(f - best[1]) <= 1e-10 * max(1.0, abs(f))
        if best is None or (f > best[1] and not tie) or (tie and gnorm < best[4]):
            best = (x, f, sigma, history, gnorm)
    x, f, sigma, history, _ = best
    kernel = SeKernel(signal_std=float(np.exp(x[1])), length_scale=float(np.exp(x[0])))
    conditioning = R.mean(axis=0) if opts.mode == "averaged" else M
    return MvgpModel(mean=M, kernel=kernel, noise_var=float(np.exp(2 * x[2])),
                     output_cov=sigma, replications=N, mode=opts.mode,
                     conditioning=conditioning, loglik=f, history=history)


def save_model(model: MvgpModel, directory, name: str = "mvgp") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"M": f"{name}_M.ten", "Sigma": f"{name}_Sigma.ten", "Rbar": f"{name}_Rbar.ten"}
    write_ten(directory / files["M"], model.mean)
    write_ten(directory / files["Sigma"], model.output_cov)
    write_ten(directory / files["Rbar"], model.conditioning)
    manifest = {
        "T": model.T,
        "J": model.J,
        "N": model.replications,
        "kernel": {"sigma_s": model.kernel.signal_std, "ell": model.kernel.length_scale},
        "sigma2": model.noise_var,
        "mode": model.mode,
        "loglik": model.loglik,
        "degenerate": model.degenerate,
        "created": {"by": f"vistr {__version__}"},
        "files": files,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_model(directory, name: str = "mvgp") -> MvgpModel:
    directory = Path(directory)
    path = directory / f"{name}.json"
    try:
        m = json.loads(path.read_text())
        files = m["files"]
        model = MvgpModel(
            mean=read_ten(directory / files["M"]),
            kernel=SeKernel(signal_std=m["kernel"]["sigma_s"], length_scale=m["kernel"]["ell"]),
            noise_var=m["sigma2"],
            output_cov=read_ten(directory / files["Sigma"]),
            replications=m["N"],
            mode=m["mode"],
            conditioning=read_ten(directory / files["Rbar"]),
            loglik=m.get("loglik", float("nan")),
            degenerate=m.get("degenerate", False),
        )
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load MVGP model from {path}: {exc}") from exc
    if (model.T, model.J) != (m["T"], m["J"]):
        raise DataError(f"{path}: manifest dims disagree with payloads")
    return model
