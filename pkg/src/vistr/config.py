"""Run configuration: packaged TOML defaults, a user TOML on top, then flag overrides.

Every section is validated into the dataclass its stage consumes. The config
hash covers everything except ``paths``, so the same run written to two
directories carries the same hash.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .detector import DetectorConfig
from .errors import ConfigError
from .mvgp import MvgpOptions
from .sim import ArmSpec
from .tr import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["SimConfig", "RunConfig", "load_config", "default_config_text", "derive_seed"]

_ARM_KEYS = ("joint_count", "link_lengths", "link_thickness", "base_position",
             "pixels_per_cm", "height", "width")


def default_config_text() -> str:
    return resources.files("vistr").joinpath("default_config.toml").read_text()


@dataclass
class SimConfig:
    arm: ArmSpec
    frames: int = 240
    slew: float = 2.0
    joint_limit: float = 170.0
    encoder_std: float = 0.05
    train_cycles: int = 8
    holdout_cycles: int = 2
    severities: tuple = (0.2, 0.5, 1.0, 5.0)
    attack_replications: int = 3
    ramp_frames: int = 10
    pack_masks: bool = False
    onset: int | None = None
    replay_shift: int | None = None

    def __post_init__(self):
        self.severities = tuple(float(s) for s in self.severities)
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.train_cycles < 1 or self.holdout_cycles < 0 or self.attack_replications < 0:
            raise ValueError("need at least one training cycle and non-negative cycle counts")
        if any(not (np.isfinite(s) and s >= 0) for s in self.severities):
            raise ValueError("severities must be finite and non-negative")
        if self.encoder_std < 0:
            raise ValueError("encoder_std must be non-negative")
        if not 0 <= self.attack_onset < self.frames:
            raise ValueError(f"onset {self.attack_onset} outside [0, {self.frames})")

    @property
    def attack_onset(self) -> int:
        return self.frames // 4 if self.onset is None else int(self.onset)


@dataclass
class RunConfig:
    seed: int
    paths: dict
    sim: SimConfig
    tr: TrainConfig
    mvgp: MvgpOptions
    alpha: float = 0.005
    mode: str = "mvgp"
    raw: dict = field(default_factory=dict, repr=False)

    def path(self, key: str) -> Path:
        p = Path(self.paths[key])
        return p if p.is_absolute() else Path(self.paths["root"]) / p

    @property
    def dataset_dir(self) -> Path:
        return self.path("dataset")

    @property
    def models_dir(self) -> Path:
        return self.path("models")

    @property
    def reports_dir(self) -> Path:
        return self.path("reports")

    def detector_config(self, dof: int) -> DetectorConfig:
        return DetectorConfig(dof=dof, alpha=self.alpha, residual_model=self.mode)

    def to_dict(self) -> dict:
        """Resolved settings (paths excluded) in a JSON-friendly form."""
        sim = asdict(self.sim)
        sim["arm"] = asdict(self.sim.arm)
        sim["onset"] = self.sim.attack_onset
        return {
            "seed": self.seed,
            "sim": _jsonable(sim),
            "tr": _jsonable(asdict(self.tr)),
            "mvgp": _jsonable(asdict(self.mvgp)),
            "detector": {"alpha": self.alpha, "mode": self.mode},
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{where}{k}"
        if k not in base and not (where == "sim." and k in ("onset", "replay_shift")):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base.get(k), dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a table")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _parse(text: str, origin: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 32-bit seed for a (run seed, stream tag, index) triple."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


def load_config(path=None, *, seed=None, out=None, alpha=None, mode=None) -> RunConfig:
    """Resolve a run configuration; explicit arguments win over the file."""
    raw = _parse(default_config_text(), "default config")
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw = _merge(raw, _parse(text, str(path)))
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["paths"]["root"] = str(out)
    if alpha is not None:
        raw["detector"]["alpha"] = alpha
    if mode is not None:
        raw["detector"]["mode"] = mode
    try:
        s = dict(raw["sim"])
        arm = ArmSpec(**{k: s.pop(k) for k in _ARM_KEYS})
        sim = SimConfig(arm=arm, **s)
        det = raw["detector"]
        alpha_v, mode_v = float(det["alpha"]), str(det["mode"])
        if not 0.0 < alpha_v < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha_v}")
        if mode_v not in ("mvgp", "iid"):
            raise ValueError(f"mode must be 'mvgp' or 'iid', got {mode_v!r}")
        cfg = RunConfig(seed=int(raw["seed"]), paths=dict(raw["paths"]), sim=sim,
                        tr=TrainConfig(seed=int(raw["seed"]), **raw["tr"]),
                        mvgp=MvgpOptions(seed=int(raw["seed"]), **raw["mvgp"]),
                        alpha=alpha_v, mode=mode_v, raw=raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg
