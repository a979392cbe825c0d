"""Bilinear vision-to-state estimator.

A mask ``X`` (H x W) is mapped to joint angles by ``a_hat = B_h @ X @ b_w``
with ``B_h`` of shape (J, H) and ``b_w`` of length W. The two bases are fit in
a Tucker-compressed space: the stacked masks ``Y`` (N x T x H x W) are
compressed by HOSVD, the reduced regressor ``V = S x_0 U_n x_1 U_t`` is
formed, and the compressed bases ``C_h`` (J x P) and ``c_w`` (Q) are found by
alternating least squares. Finally ``B_h = C_h U_h^T`` and ``b_w = U_w c_w``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import __version__
from .errors import DataError, SingularNormalEquations
from .tensor import hosvd, mode_mul, read_ten, unfold, vec_mul, write_ten

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "FitTrace",
    "TrModel",
    "Accuracy",
    "fit",
    "predict",
    "residual",
    "accuracy",
    "save_model",
    "load_model",
]


@dataclass
class TrainConfig:
    """ALS settings.

    ``ranks`` fixes (P, Q) explicitly; otherwise both are chosen per mode by
    the ``energy`` target. ``ridge`` is added to every Gram matrix. With
    ``accelerate`` each sweep also tries an extrapolated ``c_w`` along the last
    update direction (``C_h`` re-solved exactly) and keeps it only when it
    lowers the objective, so the objective stays monotone.
    """

    ranks: tuple[int, int] | None = None
    energy: float = 0.95
    tol: float = 1e-6
    max_iterations: int = 200
    ridge: float = 1e-10
    seed: int = 0
    init: str = "spectral"
    accelerate: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("ALS tolerance must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if not 0.0 < self.energy <= 1.0:
            raise ValueError("energy target must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.init not in ("spectral", "random"):
            raise ValueError(f"unknown ALS initialization {self.init!r}")
        if self.ranks is not None:
            self.ranks = tuple(int(r) for r in self.ranks)


@dataclass
class FitTrace:
    objective: list[float] = field(default_factory=list)
    delta_h: list[float] = field(default_factory=list)
    delta_w: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    ranks: tuple[int, ...] = ()
    energy: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranks"] = list(self.ranks)
        d["energy"] = list(self.energy)
        return d


@dataclass(frozen=True)
class TrModel:
    b_h: np.ndarray
    b_w: np.ndarray

    def __post_init__(self):
        b_h = np.asarray(self.b_h, dtype=np.float64)
        b_w = np.asarray(self.b_w, dtype=np.float64)
        if b_h.ndim != 2 or b_w.ndim != 1:
            raise ValueError("b_h must be J x H and b_w a length-W vector")
        if not (np.all(np.isfinite(b_h)) and np.all(np.isfinite(b_w))):
            raise ValueError("model parameters must be finite")
        b_h.setflags(write=False)
        b_w.setflags(write=False)
        object.__setattr__(self, "b_h", b_h)
        object.__setattr__(self, "b_w", b_w)

    @property
    def J(self) -> int:
        return self.b_h.shape[0]

    @property
    def H(self) -> int:
        return self.b_h.shape[1]

    @property
    def W(self) -> int:
        return self.b_w.shape[0]

    def predict(self, mask) -> np.ndarray:
        return predict(self, mask)

    def predict_many(self, masks) -> np.ndarray:
        """Predictions for a (T, H, W) stack, returned as (T, J)."""
        masks = np.asarray(masks, dtype=np.float64)
        if masks.ndim != 3 or masks.shape[1:] != (self.H, self.W):
            raise ValueError(f"expected (T, {self.H}, {self.W}) masks, got {masks.shape}")
        return (masks @ self.b_w) @ self.b_h.T


def predict(model: TrModel, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (model.H, model.W):
        raise ValueError(f"mask shape {mask.shape} does not match model ({model.H}, {model.W})")
    return model.b_h @ (mask @ model.b_w)


def residual(model: TrModel, reported, mask) -> np.ndarray:
    reported = np.asarray(reported, dtype=np.float64)
    if reported.shape != (model.J,):
        raise ValueError(f"reported angles must have shape ({model.J},), got {reported.shape}")
    return reported - predict(model, mask)


def _stack(mask_cycles, angle_cycles):
    masks = [np.asarray(m, dtype=np.float64) for m in mask_cycles]
    angles = [np.asarray(a, dtype=np.float64) for a in angle_cycles]
    if not masks:
        raise DataError("need at least one training cycle")
    if len(masks) != len(angles):
        raise DataError(f"{len(masks)} mask cycles but {len(angles)} angle cycles")
    shape, ashape = masks[0].shape, angles[0].shape
    if len(shape) != 3 or len(ashape) != 2 or ashape[0] != shape[0]:
        raise DataError(f"cycle 0: masks {shape} and angles {ashape} are inconsistent")
    for i, (m, a) in enumerate(zip(masks, angles)):
        if m.shape != shape or a.shape != ashape:
            raise DataError(f"cycle {i}: shapes {m.shape}/{a.shape} differ from {shape}/{ashape}")
        if not np.all(np.isfinite(m)):
            raise DataError(f"cycle {i}: non-finite mask values")
    return np.stack(masks), np.stack(angles)


def _solve_normal(gram, rhs, ridge, step):
    if not np.any(gram):
        raise SingularNormalEquations(f"zero regressor in the {step} update")
    if ridge > 0:
        gram = gram + ridge * np.eye(gram.shape[0])
    elif np.linalg.cond(gram) > 1e14:
        raise SingularNormalEquations(f"singular normal equations in the {step} update (ridge=0)")
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularNormalEquations(f"singular normal equations in the {step} update") from exc
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def _rel_change(new, old) -> float:
    num = np.max(np.abs(new - old))
    den = np.max(np.abs(new))
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return float(num / den)


_SPECTRAL_MAX = 4096


def _spectral_init(V, A, ridge):
    """Leading right singular vector of the unconstrained coefficient stack.

    Each joint gets its own unconstrained P x Q coefficient matrix; stacking
    them gives a (J*P) x Q matrix whose best rank-one approximation is the
    bilinear model. Starting ALS there avoids the spurious stationary points
    a random start can fall into.
    """
    N, T, P, Q = V.shape
    design = V.reshape(N * T, P * Q)
    gram = design.T @ design
    floor = max(ridge, 1e-12 * np.trace(gram) / gram.shape[0])
    coef = np.linalg.solve(gram + floor * np.eye(P * Q), design.T @ A.reshape(N * T, -1))
    stacked = coef.T.reshape(-1, Q)
    _, _, vt = np.linalg.svd(stacked, full_matrices=False)
    return vt[0]


def _check_orthonormal(u, name):
    if not np.allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-8):
        raise AssertionError(f"{name} lost column orthonormality")


def fit(mask_cycles, angle_cycles, cfg: TrainConfig | None = None) -> tuple[TrModel, FitTrace]:
    """Fit the bilinear estimator on N replications.

    Parameters
    ----------
    mask_cycles : sequence of (T, H, W) arrays
    angle_cycles : sequence of (T, J) arrays
    cfg : TrainConfig, optional

    Returns
    -------
    (TrModel, FitTrace)
        The model is returned even when ALS hits the iteration cap; the trace
        then has ``converged=False``.
    """
    cfg = cfg or TrainConfig()
    Y, A = _stack(mask_cycles, angle_cycles)
    N, T, H, W = Y.shape
    J = A.shape[2]
    if cfg.ranks is not None:
        P, Q = cfg.ranks
        if not (1 <= P <= H and 1 <= Q <= W):
            raise ValueError(f"ranks {cfg.ranks} exceed mask extents ({H}, {W})")
        ranks, energy = (N, T, P, Q), None
    else:
        ranks, energy = (N, T, None, None), (None, None, cfg.energy, cfg.energy)

    tucker = hosvd(Y, ranks=ranks, energy=energy)
    if tucker.degenerate:
        raise SingularNormalEquations("zero regressor in the C_h update (all-zero masks)")
    u_n, u_t, u_h, u_w = tucker.factors
    _check_orthonormal(u_h, "U_h")
    _check_orthonormal(u_w, "U_w")
    P, Q = u_h.shape[1], u_w.shape[1]
    V = mode_mul(mode_mul(tucker.core, u_n, 0), u_t, 1)
    log.info("Tucker ranks %s keep energy %s", tucker.ranks, np.round(tucker.energy, 4))

    rng = np.random.default_rng(cfg.seed)
    c_h = rng.standard_normal((J, P))
    c_w = rng.standard_normal(Q)
    if cfg.init == "spectral" and P * Q <= _SPECTRAL_MAX:
        c_w = _spectral_init(V, A, cfg.ridge)
    a_rows = unfold(A, 2).T              # NT x J
    a_vec = A.reshape(-1, order="F")     # vec(A), mode 0 fastest

    def objective(pred):
        r = A - pred
        return 0.5 * float(np.sum(r * r))

    trace = FitTrace(ranks=tucker.ranks, energy=tuple(tucker.energy))
    trace.objective.append(objective(vec_mul(mode_mul(V, c_h, 2), c_w, 3)))
    def update_h(cw):
        v_tilde = unfold(vec_mul(V, cw, 3), 2).T                  # NT x P
        return _solve_normal(v_tilde.T @ v_tilde, v_tilde.T @ a_rows, cfg.ridge, "C_h").T

    step = 2.0
    for k in range(cfg.max_iterations):
        c_h_new = update_h(c_w)
        vc = mode_mul(V, c_h_new, 2)                              # N x T x J x Q
        v_bar = unfold(vc, 3).T                                   # NTJ x Q
        c_w_new = _solve_normal(v_bar.T @ v_bar, v_bar.T @ a_vec, cfg.ridge, "C_w")
        f_new = objective(vec_mul(vc, c_w_new, 3))

        if cfg.accelerate:
            c_w_ext = c_w + step * (c_w_new - c_w)
            try:
                c_h_ext = update_h(c_w_ext)
                f_ext = objective(vec_mul(mode_mul(V, c_h_ext, 2), c_w_ext, 3))
            except SingularNormalEquations:
                f_ext = np.inf
            if f_ext < f_new:
                c_h_new, c_w_new, f_new = c_h_ext, c_w_ext, f_ext
                step *= 1.5
            else:
                step = max(2.0, step / 4.0)

        trace.delta_h.append(_rel_change(c_h_new, c_h))
        trace.delta_w.append(_rel_change(c_w_new, c_w))
        c_h, c_w = c_h_new, c_w_new
        trace.objective.append(f_new)
        trace.iterations = k + 1
        if max(trace.delta_h[-1], trace.delta_w[-1]) < cfg.tol:
            trace.converged = True
            break
    if not trace.converged:
        log.warning("ALS stopped at the iteration cap (%d) before reaching tol=%g",
                    cfg.max_iterations, cfg.tol)

    model = TrModel(b_h=c_h @ u_h.T, b_w=u_w @ c_w)
    return model, trace


@dataclass
class Accuracy:
    rmse: np.ndarray
    mae: np.ndarray

    @property
    def rmse_avg(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def mae_avg(self) -> float:
        return float(np.mean(self.mae))

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse.tolist(),
            "mae": self.mae.tolist(),
            "rmse_avg": self.rmse_avg,
            "mae_avg": self.mae_avg,
        }


def accuracy(model: TrModel, mask_cycles, angle_cycles) -> Accuracy:
    """Per-joint RMSE / MAE (degrees) pooled over every frame of every cycle."""
    masks = list(mask_cycles)
    angles = list(angle_cycles)
    if not masks or len(masks) != len(angles):
        raise ValueError("need matching, non-empty mask and angle cycles")
    err = np.concatenate(
        [np.asarray(a, dtype=np.float64) - model.predict_many(m) for m, a in zip(masks, angles)]
    )
    return Accuracy(rmse=np.sqrt(np.mean(err**2, axis=0)), mae=np.mean(np.abs(err), axis=0))


def save_model(model: TrModel, directory, config: dict | None = None, name: str = "tr") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ten(directory / f"{name}_b_h.ten", model.b_h)
    write_ten(directory / f"{name}_b_w.ten", model.b_w)
    manifest = {
        "J": model.J,
        "H": model.H,
        "W": model.W,
        "created": {"by": f"vistr {__version__}"},
        "config": config or {},
        "files": {"b_h": f"{name}_b_h.ten", "b_w": f"{name}_b_w.ten"},
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_model(directory, name: str = "tr") -> TrModel:
    directory = Path(directory)
    path = directory / f"{name}.json"
    try:
        manifest = json.loads(path.read_text())
        b_h = read_ten(directory / manifest["files"]["b_h"])
        b_w = read_ten(directory / manifest["files"]["b_w"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load TR model from {path}: {exc}") from exc
    model = TrModel(b_h=b_h, b_w=b_w)
    if (model.J, model.H, model.W) != (manifest["J"], manifest["H"], manifest["W"]):
        raise DataError(f"{path}: manifest dims disagree with payloads")
    return model

