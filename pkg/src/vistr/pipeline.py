"""Pipeline stages behind the CLI: simulate, fit, detect, bench and report.

Each stage reads and writes plain files under the configured directories and
is a pure function of (config, inputs): no timestamps, absolute paths or
unseeded randomness reach an artifact.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, detector, mvgp, tr
from .config import RunConfig, derive_seed
from .errors import ConvergenceError, DataError
from .sim import (
    AttackSpec,
    apply_replay_attack,
    gen_trajectory,
    nominal_cycle,
    read_dataset,
    read_manifest,
    render_cycle,
    write_dataset,
)

log = logging.getLogger(__name__)

__all__ = ["simulate", "fit_models", "load_models", "detect", "bench", "report", "METHODS"]

# stream tags for derive_seed
_TRAJ, _TRAIN, _HOLDOUT, _LIVE = 0, 1, 2, 3

METHODS = (("ViSTR-GP", "mvgp"), ("TR+IID", "iid"))


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash, "version": __version__}


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def attack_id(severity: float, rep: int) -> str:
    return f"attack_{severity:g}cm_r{rep}"


# -- simulate ----------------------------------------------------------------

def simulate(cfg: RunConfig) -> Path:
    """Generate nominal, hold-out and attacked cycles and write the dataset.

    Attack replication ``k`` replays training cycle ``k mod N`` over a fresh
    live cycle, so the replayed stream is a recording the attacker could have
    made during a clean run.
    """
    sc, arm = cfg.sim, cfg.sim.arm
    if len(set(sc.severities)) != len(sc.severities):
        raise DataError("severities must be distinct")
    T = sc.frames
    traj = gen_trajectory(arm, T, derive_seed(cfg.seed, _TRAJ), sc.slew, sc.joint_limit)
    masks = render_cycle(traj, arm)
    train = [nominal_cycle(traj, arm, derive_seed(cfg.seed, _TRAIN, i), sc.encoder_std, masks,
                           cycle_id=f"nominal_{i:03d}") for i in range(sc.train_cycles)]
    holdout = [nominal_cycle(traj, arm, derive_seed(cfg.seed, _HOLDOUT, i), sc.encoder_std, masks,
                             cycle_id=f"holdout_{i:03d}", role="holdout")
               for i in range(sc.holdout_cycles)]
    attacks = []
    for si, sev in enumerate(sc.severities):
        spec = AttackSpec(onset=sc.attack_onset, deviation_cm=sev, replay_shift=sc.replay_shift,
                          ramp_frames=sc.ramp_frames)
        for k in range(sc.attack_replications):
            live = nominal_cycle(traj, arm, derive_seed(cfg.seed, _LIVE, si, k), sc.encoder_std, masks)
            recorded = train[k % len(train)]
            c = apply_replay_attack(live, recorded, spec, arm, cycle_id=attack_id(sev, k))
            c.meta = {"recorded": recorded.id, "severity_cm": sev}
            attacks.append(c)
        log.info("simulated %d cycles at %g cm", sc.attack_replications, sev)
    out = cfg.dataset_dir
    if (out / "manifest.json").exists():
        # replace a previous dataset rather than leave stale cycles behind
        shutil.rmtree(out / "cycles", ignore_errors=True)
    return write_dataset(out, train + holdout + attacks, arm=arm, pack_masks=sc.pack_masks,
                         extra={**_stamp(cfg), "seed": cfg.seed})


# -- fit ---------------------------------------------------------------------

def _ids(manifest: dict, role: str) -> list[str]:
    return [e["id"] for e in manifest["cycles"] if e.get("role") == role]


def _masks(c) -> np.ndarray:
    return c.masks.astype(np.float64)


def fit_models(cfg: RunConfig) -> dict:
    """Fit the TR estimator on nominal cycles, then both residual models.

    Raises :class:`ConvergenceError` when ALS stops at its iteration cap.
    """
    manifest = read_manifest(cfg.dataset_dir)
    ids = _ids(manifest, "nominal")
    if not ids:
        raise DataError(f"{cfg.dataset_dir}: dataset has no nominal cycles")
    _, cycles = read_dataset(cfg.dataset_dir, ids)
    X = [_masks(c) for c in cycles]
    A = [c.reported_angles for c in cycles]
    model, trace = tr.fit(X, A, cfg.tr)
    if not trace.converged:
        raise ConvergenceError(
            f"ALS did not reach tol={cfg.tr.tol} within {cfg.tr.max_iterations} iterations")
    acc = tr.accuracy(model, X, A)
    R = [a - model.predict_many(x) for x, a in zip(X, A)]
    gp = mvgp.fit(R, cfg.mvgp)
    iid = detector.fit_iid(R)
    out = cfg.models_dir
    tr.save_model(model, out, config=cfg.to_dict()["tr"])
    mvgp.save_model(gp, out)
    detector.save_iid(iid, out)
    summary = {
        **_stamp(cfg),
        "cycles": ids,
        "tr": {**trace.to_dict(), "accuracy": acc.to_dict()},
        "mvgp": {
            "sigma_s": gp.kernel.signal_std,
            "ell": gp.kernel.length_scale,
            "sigma2": gp.noise_var,
            "loglik": gp.loglik,
            "degenerate": gp.degenerate,
            "output_cov_diag": [float(v) for v in np.diag(gp.output_cov)],
            "history": [float(v) for v in gp.history],
        },
        "iid": {"cov_diag": [float(v) for v in np.diag(iid.cov)]},
    }
    _dump(out / "fit_trace.json", summary)
    return summary


def load_models(cfg: RunConfig):
    d = cfg.models_dir
    if not (d / "tr.json").exists():
        raise DataError(f"no fitted models in {d} (run `vistr fit` first)")
    return tr.load_model(d), mvgp.load_model(d), detector.load_iid(d)


# -- detect ------------------------------------------------------------------

@dataclass
class _Models:
    tr: tr.TrModel
    mvgp: mvgp.MvgpModel
    iid: detector.IidModel

    def residual(self, mode: str):
        return self.mvgp if mode == "mvgp" else self.iid


def _check_dims(models: _Models, manifest: dict) -> None:
    want = (models.tr.J, models.tr.H, models.tr.W)
    have = (manifest["J"], manifest["H"], manifest["W"])
    if want != have:
        raise DataError(f"models expect (J, H, W) = {want} but the dataset has {have}")


def _run(models: _Models, cycle, mode: str, cfg: RunConfig) -> detector.DetectionReport:
    det = detector.OnlineDetector(models.tr, models.residual(mode), cfg.detector_config(models.tr.J))
    onset = cycle.attack.onset if cycle.attack is not None else None
    meta = {"cycle": cycle.id, "role": cycle.role, "mode": mode, **_stamp(cfg)}
    if cycle.attack is not None:
        meta["severity_cm"] = cycle.attack.deviation_cm
    return det.run(cycle.masks, cycle.reported_angles, onset=onset, meta=meta)


def detect(cfg: RunConfig, cycle_id: str, mode: str | None = None) -> detector.DetectionReport:
    """Stream one cycle through the detector and write JSON and CSV reports."""
    mode = mode or cfg.mode
    models = _Models(*load_models(cfg))
    manifest = read_manifest(cfg.dataset_dir)
    _check_dims(models, manifest)
    _, (cycle,) = read_dataset(cfg.dataset_dir, [cycle_id])
    rep = _run(models, cycle, mode, cfg)
    out = cfg.reports_dir
    out.mkdir(parents=True, exist_ok=True)
    rep.write_json(out / f"detect_{cycle_id}_{mode}.json")
    rep.write_csv(out / f"detect_{cycle_id}_{mode}.csv")
    return rep


# -- bench -------------------------------------------------------------------

def _mean(xs):
    return float(np.mean(xs)) if xs else None


def bench(cfg: RunConfig) -> dict:
    """Delay and alarm frequency per severity and method, plus hold-out fit quality.

    A replication with no post-onset alarm is scored with the censored delay
    ``T - onset`` in the mean and counted as missed.
    """
    models = _Models(*load_models(cfg))
    manifest = read_manifest(cfg.dataset_dir)
    _check_dims(models, manifest)
    T = manifest["T"]
    attack_ids = _ids(manifest, "attack")
    holdout_ids = _ids(manifest, "holdout")
    _, attacks = read_dataset(cfg.dataset_dir, attack_ids) if attack_ids else (None, [])
    _, holdout = read_dataset(cfg.dataset_dir, holdout_ids) if holdout_ids else (None, [])

    severities = sorted({c.attack.deviation_cm for c in attacks})
    per_cycle, rows = [], []
    for sev in severities:
        group = [c for c in attacks if c.attack.deviation_cm == sev]
        for name, mode in METHODS:
            delays, freqs, missed = [], [], 0
            for c in group:
                r = _run(models, c, mode, cfg)
                censored = r.delay is None
                missed += censored
                delays.append(T - c.attack.onset if censored else r.delay)
                freqs.append(r.alarm_frequency)
                per_cycle.append({"cycle": c.id, "method": name, "severity_cm": sev,
                                  "delay": r.delay, "alarm_frequency": r.alarm_frequency,
                                  "false_alarm_rate": r.false_alarm_rate})
            rows.append({"severity_cm": sev, "method": name, "replications": len(group),
                         "missed": missed, "mean_delay": _mean(delays),
                         "mean_alarm_frequency": _mean(freqs)})
    fit_rows = []
    for name, mode in METHODS:
        reps = [_run(models, c, mode, cfg) for c in holdout]
        fit_rows.append({"method": name, "cycles": len(reps),
                         "nll": _mean([r.nll for r in reps]),
                         "log_vol": _mean([r.log_vol for r in reps]),
                         "false_alarm_rate": _mean([r.false_alarm_rate for r in reps])})
    summary = {
        **_stamp(cfg),
        "alpha": cfg.alpha,
        "threshold": cfg.detector_config(models.tr.J).threshold,
        "T": T,
        "detection": rows,
        "holdout": fit_rows,
        "cycles": per_cycle,
    }
    out = cfg.reports_dir
    _dump(out / "bench.json", summary)
    (out / "bench.txt").write_text(format_bench(summary))
    return summary


def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [["-" if v is None else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _f(v, spec):
    return None if v is None else format(v, spec)


def format_bench(summary: dict) -> str:
    det = _table(
        ["severity_cm", "method", "reps", "missed", "mean_delay", "mean_alarm_freq"],
        [[f"{r['severity_cm']:g}", r["method"], r["replications"], r["missed"],
          _f(r["mean_delay"], ".2f"), _f(r["mean_alarm_frequency"], ".3f")]
         for r in summary["detection"]])
    fit = _table(
        ["method", "cycles", "nll", "log_vol", "false_alarm_rate"],
        [[r["method"], r["cycles"], _f(r["nll"], ".4f"), _f(r["log_vol"], ".4f"),
          _f(r["false_alarm_rate"], ".4f")] for r in summary["holdout"]])
    head = (f"alpha={summary['alpha']:g} threshold={summary['threshold']:.4f} "
            f"config={summary['config_hash'][:12]} vistr {summary['version']}\n")
    return head + "\nDetection after attack onset\n" + det + "\nHold-out residual fit\n" + fit


# -- report ------------------------------------------------------------------

def report(cfg: RunConfig) -> str:
    """Collect the fit summary and bench tables into ``report.txt``."""
    fit_path = cfg.models_dir / "fit_trace.json"
    bench_path = cfg.reports_dir / "bench.json"
    parts = []
    if fit_path.exists():
        f = json.loads(fit_path.read_text())
        acc = f["tr"]["accuracy"]
        g = f["mvgp"]
        parts.append(
            "Models\n"
            f"  TR ranks {tuple(f['tr']['ranks'])}, {f['tr']['iterations']} ALS sweeps, "
            f"RMSE avg {acc['rmse_avg']:.4f} deg, MAE avg {acc['mae_avg']:.4f} deg\n"
            f"  MVGP sigma_s={g['sigma_s']:.4g} ell={g['ell']:.4g} sigma2={g['sigma2']:.4g} "
            f"loglik={g['loglik']:.4f}\n")
    if bench_path.exists():
        parts.append(format_bench(json.loads(bench_path.read_text())))
    if not parts:
        raise DataError(f"nothing to report: neither {fit_path} nor {bench_path} exists")
    text = "\n".join(parts)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    (cfg.reports_dir / "report.txt").write_text(text)
    return text
