"""Synthetic planar work-cell: repetitive arm motion, silhouettes, encoders, replay attacks.

World coordinates are centimetres with the origin at the image centre and
``y`` pointing up. Pixel centres sit on integer (row, col) positions, so a
world point maps to ``col = (W-1)/2 + x*ppc`` and ``row = (H-1)/2 - y*ppc``.
Angles are degrees, relative per joint.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, DataError, SingularConfiguration
from .kernels import render_capsules
from .tensor import write_ten

log = logging.getLogger(__name__)

__all__ = [
    "ArmSpec",
    "AttackSpec",
    "CycleData",
    "gen_trajectory",
    "forward_kinematics",
    "jacobian",
    "render_mask",
    "render_cycle",
    "nominal_cycle",
    "perturb_for_displacement",
    "apply_replay_attack",
    "write_dataset",
    "read_dataset",
]

DOWN = (0.0, -1.0)


@dataclass(frozen=True)
class ArmSpec:
    joint_count: int = 6
    link_lengths: tuple = (5.0, 4.5, 4.0, 3.0, 2.0, 1.5)
    link_thickness: float = 2.0
    base_position: tuple = (0.0, 0.0)
    pixels_per_cm: float = 2.0
    height: int = 96
    width: int = 96

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", tuple(float(v) for v in self.link_lengths))
        object.__setattr__(self, "base_position", tuple(float(v) for v in self.base_position))
        if len(self.link_lengths) != self.joint_count or self.joint_count < 1:
            raise ValueError("link_lengths must have one entry per joint")
        if any(not (math.isfinite(v) and v >= 0) for v in self.link_lengths):
            raise ValueError("link lengths must be finite and non-negative")
        if not (self.link_thickness > 0 and self.pixels_per_cm > 0):
            raise ValueError("link thickness and pixels_per_cm must be positive")
        r, c = self.to_pixels(np.array([self.base_position]))
        room = min(r[0], self.height - 1 - r[0], c[0], self.width - 1 - c[0])
        need = (self.reach + self.link_thickness) * self.pixels_per_cm
        if need > room:
            raise ValueError(
                f"arm reach {self.reach} cm plus margin needs {need:.1f} px but the frame allows {room:.1f}"
            )

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    @property
    def radius_px(self) -> float:
        return 0.5 * self.link_thickness * self.pixels_per_cm

    def to_pixels(self, points) -> tuple[np.ndarray, np.ndarray]:
        """World (x, y) cm -> (row, col) pixel coordinates."""
        p = np.asarray(points, dtype=np.float64)
        cols = (self.width - 1) / 2.0 + p[:, 0] * self.pixels_per_cm
        rows = (self.height - 1) / 2.0 - p[:, 1] * self.pixels_per_cm
        return rows, cols


@dataclass(frozen=True)
class AttackSpec:
    """Replay attack: from ``onset`` on, encoders replay a recording while the arm deviates.

    ``onset`` is a 0-based frame, ``replay_shift`` defaults to one full cycle
    and ``deviation_cm`` is the commanded end-effector displacement along
    ``direction`` (downward by default), reached linearly over ``ramp_frames``.
    """

    onset: int
    deviation_cm: float = 0.0
    replay_shift: int | None = None
    ramp_frames: int = 10
    direction: tuple = DOWN
    kind: str = "replay"

    def __post_init__(self):
        if self.kind != "replay":
            raise ValueError(f"unsupported attack kind {self.kind!r}")
        if not (math.isfinite(self.deviation_cm) and self.deviation_cm >= 0):
            raise ValueError("deviation must be a finite non-negative distance")
        if self.ramp_frames < 1:
            raise ValueError("ramp_frames must be >= 1")
        object.__setattr__(self, "direction", tuple(float(v) for v in self.direction))

    def shift(self, T: int) -> int:
        return T if self.replay_shift is None else int(self.replay_shift)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CycleData:
    masks: np.ndarray
    true_angles: np.ndarray
    reported_angles: np.ndarray
    attack: AttackSpec | None = None
    seed: int | None = None
    id: str = ""
    role: str = "nominal"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.true_angles.shape[0]
        if self.masks.shape[0] != T or self.reported_angles.shape != self.true_angles.shape:
            raise DataError(f"cycle {self.id!r}: masks and angle streams have different lengths")

    @property
    def T(self) -> int:
        return self.true_angles.shape[0]

    @property
    def J(self) -> int:
        return self.true_angles.shape[1]


def gen_trajectory(arm: ArmSpec, T: int, seed: int, slew: float = 2.0,
                   joint_limit: float = 170.0) -> np.ndarray:
    """Smooth periodic joint trajectories, shape (T, J), in degrees.

    Each joint follows an offset plus 2-4 integer-frequency harmonics, so the
    motion closes on itself at the cycle boundary. The oscillating part is
    shrunk until the largest per-frame step (wrap-around included) is within
    ``slew`` and joints 2..J stay at least 10 degrees away from the straight
    (singular) pose.
    """
    if T < 2:
        raise ValueError("a trajectory needs at least two frames")
    if slew <= 0:
        raise ValueError("slew limit must be positive")
    rng = np.random.default_rng(seed)
    J = arm.joint_count
    t = np.arange(T) / T
    offset = np.empty(J)
    offset[0] = rng.uniform(35.0, 65.0)
    offset[1:] = rng.uniform(25.0, 50.0, J - 1) * np.where(np.arange(1, J) % 2, -1.0, 1.0)
    wave = np.zeros((T, J))
    for j in range(J):
        n = int(rng.integers(2, 5))
        freqs = rng.choice(np.arange(1, 5), size=n, replace=False)
        for k in freqs:
            amp = rng.uniform(4.0, 14.0) / k
            wave[:, j] += amp * np.sin(2 * np.pi * k * t + rng.uniform(0, 2 * np.pi))
    step = np.abs(np.diff(np.vstack([wave, wave[:1]]), axis=0)).max()
    scale = min(1.0, 0.98 * slew / step) if step > 0 else 1.0
    # relative joints keep a bend so the chain never straightens
    room = np.abs(offset[1:]) - 10.0
    swing = np.abs(wave[:, 1:]).max(axis=0)
    if J > 1 and np.any(swing > 0):
        scale = min(scale, float(np.min(room / np.maximum(swing, 1e-12))))
    angles = offset + scale * wave
    if np.abs(angles).max() > joint_limit:
        raise ValueError(f"trajectory exceeds the joint limit of {joint_limit} degrees")
    return angles


def forward_kinematics(angles, arm: ArmSpec) -> np.ndarray:
    """Planar chain positions (J+1, 2) in cm: base first, end-effector last."""
    a = np.deg2rad(np.asarray(angles, dtype=np.float64))
    if a.shape != (arm.joint_count,):
        raise ValueError(f"expected {arm.joint_count} joint angles")
    phi = np.cumsum(a)
    L = np.asarray(arm.link_lengths)
    steps = np.column_stack([L * np.cos(phi), L * np.sin(phi)])
    return np.vstack([arm.base_position, arm.base_position + np.cumsum(steps, axis=0)])


def jacobian(angles, arm: ArmSpec) -> np.ndarray:
    """End-effector Jacobian (2, J) in cm per radian."""
    p = forward_kinematics(angles, arm)
    rel = p[-1] - p[:-1]
    return np.vstack([-rel[:, 1], rel[:, 0]])


def render_mask(angles, arm: ArmSpec, frame: int | None = None) -> np.ndarray:
    """Binary silhouette (H, W) of the arm: union of thick capsules along the links."""
    pts = forward_kinematics(angles, arm)
    rows, cols = arm.to_pixels(pts)
    r = arm.radius_px
    if (rows.min() - r < 0 or cols.min() - r < 0 or rows.max() + r > arm.height - 1
            or cols.max() + r > arm.width - 1):
        where = f" at frame {frame}" if frame is not None else ""
        raise ValueError(f"arm leaves the image{where}")
    return render_capsules(rows, cols, r, arm.height, arm.width)


def render_cycle(angles, arm: ArmSpec) -> np.ndarray:
    return np.stack([render_mask(a, arm, frame=t) for t, a in enumerate(angles)])


def nominal_cycle(trajectory, arm: ArmSpec, seed: int, encoder_std: float = 0.05,
                  masks=None, cycle_id: str = "", role: str = "nominal") -> CycleData:
    """One clean replication: shared true motion, independent encoder noise."""
    true = np.array(trajectory, dtype=np.float64)
    rng = np.random.default_rng(seed)
    reported = true + rng.normal(0.0, encoder_std, size=true.shape)
    masks = render_cycle(true, arm) if masks is None else masks
    return CycleData(masks=masks, true_angles=true, reported_angles=reported, seed=seed,
                     id=cycle_id, role=role)


def perturb_for_displacement(angles, arm: ArmSpec, d_cm: float, direction=DOWN,
                             frame: int | None = None, damping: float = 1e-9,
                             substeps: int = 1) -> np.ndarray:
    """Joint offsets (degrees) that move the end-effector by ``d_cm`` along ``direction``.

    A damped least-squares (minimum-norm) predictor walks the straight
    displacement path in ``substeps`` increments; up to five Newton corrections
    on the exact kinematics, each again minimum-norm, then remove the residual
    error. With ``substeps=1`` the predictor is the plain linearized step; it
    is refined automatically when the corrections leave more than ``1e-4 * d_cm``
    of error, and the solve fails only if the error stays above 2% of ``d_cm``.
    Targets outside the workspace raise :class:`SingularConfiguration`.
    """
    angles = np.asarray(angles, dtype=np.float64)
    J = arm.joint_count
    if d_cm == 0:
        return np.zeros(J)
    if d_cm < 0 or d_cm > 0.5 * arm.reach:
        raise ValueError(f"displacement {d_cm} cm outside [0, {0.5 * arm.reach}] cm")
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    target = d_cm * u
    where = f" at frame {frame}" if frame is not None else ""

    def min_norm_step(jac, rhs):
        sv = np.linalg.svd(jac, compute_uv=False)
        if sv[-1] < 1e-6 * arm.reach:
            raise SingularConfiguration(f"arm Jacobian is singular{where}")
        lam2 = (damping * arm.reach) ** 2
        return jac.T @ np.linalg.solve(jac @ jac.T + lam2 * np.eye(2), rhs)

    base = forward_kinematics(angles, arm)[-1]
    goal = np.linalg.norm(base + target - np.asarray(arm.base_position))
    if goal > arm.reach:
        raise SingularConfiguration(
            f"target {goal:.3g} cm from the base is outside the {arm.reach:.3g} cm workspace{where}")

    def solve(n_sub):
        # predictor: follow the straight displacement path in min-norm substeps
        delta = np.zeros(J)
        for k in range(1, n_sub + 1):
            moved = np.rad2deg(delta)
            err = k / n_sub * target - (forward_kinematics(angles + moved, arm)[-1] - base)
            delta = delta + min_norm_step(jacobian(angles + moved, arm), err)
        for _ in range(5):
            moved = np.rad2deg(delta)
            err = target - (forward_kinematics(angles + moved, arm)[-1] - base)
            if np.linalg.norm(err) <= 1e-9 * d_cm:
                break
            delta = delta + min_norm_step(jacobian(angles + moved, arm), err)
        moved = np.rad2deg(delta)
        return moved, np.linalg.norm(target - (forward_kinematics(angles + moved, arm)[-1] - base))

    # near the workspace boundary the path bends; refine the predictor before giving up
    n_sub = substeps
    while True:
        moved, err = solve(n_sub)
        if err <= 1e-4 * d_cm:
            return moved
        if n_sub >= 64:
            if err <= 0.02 * d_cm:
                return moved
            raise ConvergenceError(f"displacement solve missed by {err:.3g} cm{where}")
        n_sub *= 4


def apply_replay_attack(nominal: CycleData, recorded: CycleData, spec: AttackSpec, arm: ArmSpec,
                        cycle_id: str | None = None) -> CycleData:
    """Inject a replay attack into a clean cycle.

    Encoder readings from ``spec.onset`` on are taken from the stream
    ``recorded + nominal`` delayed by ``replay_shift`` frames, so the default
    shift of one cycle replays ``recorded`` frame for frame. The true motion is
    displaced along the attack direction (ramped) and the masks are re-rendered
    from it, since the camera sees what the arm actually does.
    """
    T = nominal.T
    if recorded.true_angles.shape != nominal.true_angles.shape:
        raise DataError("recorded and nominal cycles differ in shape")
    shift = spec.shift(T)
    if not (0 <= shift <= T):
        raise ValueError(f"replay shift {shift} outside [0, {T}]")
    if not (0 <= spec.onset < T):
        raise ValueError(f"attack onset {spec.onset} outside [0, {T})")
    stream = np.concatenate([recorded.reported_angles, nominal.reported_angles])
    reported = nominal.reported_angles.copy()
    post = np.arange(spec.onset, T)
    reported[post] = stream[T + post - shift]
    true = nominal.true_angles.copy()
    masks = nominal.masks.copy()
    if spec.deviation_cm > 0:
        for t in post:
            d_t = spec.deviation_cm * min(1.0, (t - spec.onset + 1) / spec.ramp_frames)
            true[t] = nominal.true_angles[t] + perturb_for_displacement(
                nominal.true_angles[t], arm, d_t, spec.direction, frame=int(t))
            masks[t] = render_mask(true[t], arm, frame=int(t))
    return CycleData(masks=masks, true_angles=true, reported_angles=reported, attack=spec,
                     seed=nominal.seed, id=cycle_id or nominal.id, role="attack")


# -- dataset directory -------------------------------------------------------

def _png_write(path, mask):
    from PIL import Image

    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path, format="PNG", optimize=False)


def _png_read(path):
    from PIL import Image

    with Image.open(path) as im:
        a = np.asarray(im.convert("L"))
    return (a > 127).astype(np.uint8)


def write_dataset(directory, cycles, arm: ArmSpec | None = None, pack_masks: bool = False,
                  extra: dict | None = None) -> Path:
    """Write cycles as ``manifest.json`` plus per-cycle ``angles.csv`` and PNG masks."""
    directory = Path(directory)
    if not cycles:
        raise ValueError("nothing to write")
    T, J = cycles[0].true_angles.shape
    H, W = cycles[0].masks.shape[1:]
    entries = []
    for c in cycles:
        if c.true_angles.shape != (T, J) or c.masks.shape[1:] != (H, W):
            raise DataError(f"cycle {c.id!r} does not match the dataset shape")
        cdir = directory / "cycles" / c.id
        (cdir / "masks").mkdir(parents=True, exist_ok=True)
        with open(cdir / "angles.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"true_{j + 1}" for j in range(J)]
                       + [f"reported_{j + 1}" for j in range(J)])
            for t in range(T):
                w.writerow([t] + [repr(float(v)) for v in c.true_angles[t]]
                           + [repr(float(v)) for v in c.reported_angles[t]])
        for t in range(T):
            _png_write(cdir / "masks" / f"frame_{t:05d}.png", c.masks[t])
        if pack_masks:
            write_ten(cdir / "masks.ten", c.masks.astype(np.float64))
        entry = {"id": c.id, "role": c.role, "seed": c.seed}
        if c.attack is not None:
            entry["attack"] = c.attack.to_dict()
        if c.meta:
            entry["meta"] = c.meta
        entries.append(entry)
    manifest = {"J": J, "T": T, "H": H, "W": W, "cycles": entries}
    if arm is not None:
        manifest["arm"] = asdict(arm)
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        m = json.loads(path.read_text())
        for key in ("J", "T", "H", "W", "cycles"):
            m[key]
    except FileNotFoundError as exc:
        raise DataError(f"no dataset at {path.parent} (missing manifest.json)") from exc
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    return m


def _read_cycle(directory: Path, m: dict, entry: dict) -> CycleData:
    cid = entry.get("id")
    cdir = directory / "cycles" / str(cid)
    J, T, H, W = m["J"], m["T"], m["H"], m["W"]
    try:
        with open(cdir / "angles.csv", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cycle {cid!r}: cannot read angles.csv") from exc
    body = rows[1:]
    if len(body) != T or any(len(r) != 1 + 2 * J for r in body):
        raise DataError(f"cycle {cid!r}: angles.csv does not hold {T} rows of {2 * J} angles")
    vals = np.array([[float(v) for v in r[1:]] for r in body])
    frames = sorted((cdir / "masks").glob("frame_*.png"))
    if len(frames) != T:
        raise DataError(f"cycle {cid!r}: expected {T} mask frames, found {len(frames)}")
    masks = np.stack([_png_read(f) for f in frames])
    if masks.shape[1:] != (H, W):
        raise DataError(f"cycle {cid!r}: masks are {masks.shape[1:]}, manifest says ({H}, {W})")
    attack = AttackSpec(**entry["attack"]) if entry.get("attack") else None
    return CycleData(masks=masks, true_angles=vals[:, :J], reported_angles=vals[:, J:],
                     attack=attack, seed=entry.get("seed"), id=str(cid),
                     role=entry.get("role", "attack" if attack else "nominal"),
                     meta=dict(entry.get("meta", {})))


def read_dataset(directory, ids=None) -> tuple[dict, list[CycleData]]:
    """Load a dataset directory; ``ids`` restricts which cycles are read."""
    directory = Path(directory)
    m = read_manifest(directory)
    entries = m["cycles"]
    if ids is not None:
        known = {e["id"] for e in entries}
        missing = [i for i in ids if i not in known]
        if missing:
            raise DataError(f"unknown cycle id(s): {', '.join(map(str, missing))}")
        entries = [e for e in entries if e["id"] in set(ids)]
    return m, [_read_cycle(directory, m, e) for e in entries]


def arm_from_manifest(m: dict) -> ArmSpec | None:
    arm = m.get("arm")
    return ArmSpec(**arm) if arm else None


def with_id(cycle: CycleData, cycle_id: str, role: str | None = None) -> CycleData:
    return replace(cycle, id=cycle_id, role=role or cycle.role)
