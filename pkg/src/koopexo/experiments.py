"""Collection, training and evaluation stages of the simulated study.

Every random draw is seeded from the manifest built by :func:`seed_manifest`,
so one master seed reproduces every file.  Output layout under ``out``::

    config.txt, manifest.txt, subjects.csv
    episodes/{subject}_{mode}_{idx}.log     PID-collected training data
    models/{subject}.koop, {subject}_curve.csv
    eval/*.log, prediction_error.csv, prediction_overlay.csv
    timing/*.csv                            wall-clock sidecars (not reproducible)
"""
from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, format_config
from .control import KoopmanMpc, PidController
from .episodes import episode_name, read_episode, write_episode, write_timing
from .koopman import KoopmanModel, load_model, predict_multistep, save_model
from .plant import DT, ActuatorGeometry, PlantParams, Reference, perturbed_params, simulate_episode
from .training import (DatasetError, build_dataset, episode_inputs, fit_scaling,
                       prediction_errors, train)

log = logging.getLogger(__name__)

DEVELOPER = "developer"
HELDOUT = "heldout"
ABLATION = "developer_noemg"
MODES = ("passive", "active")


# --- seeds ------------------------------------------------------------------

def child_seed(master: int, *tags) -> int:
    """Stable 32-bit seed for a named use of the master seed."""
    key = [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


def grid_tag(col) -> str:
    f, lo, hi = col
    return f"{f:g}hz_{lo:g}-{hi:g}"


def seed_manifest(cfg: ExperimentConfig) -> dict[str, int]:
    """Every seed the pipeline uses, keyed by purpose."""
    names = []
    for subj in cfg.subject_names:
        names.append(f"subject.{subj}")
    for subj in [DEVELOPER, *cfg.subject_names]:
        for mode in MODES:
            names += [f"collect.{subj}.{mode}.{i}" for i in range(cfg.episodes)]
        names.append(f"train.{subj}")
    names += [f"collect.{HELDOUT}.active.{i}" for i in range(cfg.heldout_episodes)]
    names.append(f"train.{ABLATION}")
    for subj in cfg.subject_names:
        names += [f"eval.{subj}.{mode}" for mode in MODES]
        names += [f"eval.{subj}.{grid_tag(col)}" for col in cfg.grid]
    return {name: child_seed(cfg.seed, *name.split(".")) for name in names}


def write_manifest(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    lines = [f"{k} = {v}" for k, v in seed_manifest(cfg).items()]
    (out / "manifest.txt").write_text(f"master = {cfg.seed}\n" + "\n".join(lines) + "\n")


# --- subjects and controllers ---------------------------------------------

def subject_params(cfg: ExperimentConfig) -> dict[str, PlantParams]:
    """The developer's (nominal) plant followed by the perturbed subject plants."""
    seeds = seed_manifest(cfg)
    out = {DEVELOPER: cfg.plant}
    for subj in cfg.subject_names:
        out[subj] = perturbed_params(cfg.plant, seeds[f"subject.{subj}"], cfg.spread)
    return out


def write_subjects(params: dict[str, PlantParams], path: Path) -> None:
    names = [f.name for f in fields(PlantParams)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", *names])
        for subj, p in params.items():
            w.writerow([subj, *(repr(getattr(p, n)) for n in names)])


def make_pid(cfg: ExperimentConfig) -> PidController:
    return PidController(**asdict(cfg.pid))


def make_kmpc(model: KoopmanModel, cfg: ExperimentConfig, n_emg: int = 2) -> KoopmanMpc:
    if model.m - 1 not in (0, n_emg):
        raise ConfigError(f"model expects {model.m - 1} EMG inputs, plant provides {n_emg}")
    if model.C.shape != (1, model.d):
        raise ConfigError("model output map does not select a single angle")
    return KoopmanMpc(model, cfg.mpc)


def reference(cfg: ExperimentConfig, col=None) -> Reference:
    if col is None:
        return Reference(cfg.frequency, cfg.low, cfg.high)
    return Reference(*col)


# --- metrics ------------------------------------------------------------------

def rmse(trajectory, ref) -> float:
    """Root mean square difference of two equal-length sequences (degrees)."""
    th = np.asarray(trajectory, dtype=float)
    r = np.asarray(ref, dtype=float)
    if th.shape != r.shape:
        raise ValueError(f"length mismatch: {th.shape} vs {r.shape}")
    if th.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean((th - r) ** 2)))


def transient_ticks(cfg: ExperimentConfig) -> int:
    return int(round(cfg.transient / DT))


def episode_rmse(ep, cfg: ExperimentConfig) -> float:
    """Tracking RMSE of an episode with the start-up transient excluded."""
    n0 = transient_ticks(cfg)
    return rmse(ep.theta[n0:], ep.ref[n0:])


# --- stages -------------------------------------------------------------------

def run_collection(cfg: ExperimentConfig, out) -> list[Path]:
    """Simulate PID-controlled episodes for the developer and every subject.

    Also records a few extra active-mode episodes on the developer plant that
    no model is trained on, for the prediction study.
    """
    out = Path(out)
    ep_dir = out / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(cfg, out)
    seeds = seed_manifest(cfg)
    params = subject_params(cfg)
    write_subjects(params, out / "subjects.csv")
    geom = ActuatorGeometry()
    ref = reference(cfg)

    jobs = [(subj, mode, i) for subj in params for mode in MODES for i in range(cfg.episodes)]
    jobs += [(HELDOUT, "active", i) for i in range(cfg.heldout_episodes)]
    paths = []
    for subj, mode, i in jobs:
        plant = params[DEVELOPER if subj == HELDOUT else subj]
        ep = simulate_episode(plant, geom, make_pid(cfg), ref, cfg.duration,
                              seeds[f"collect.{subj}.{mode}.{i}"], mode, cfg.patient)
        paths.append(write_episode(ep, ep_dir / episode_name(subj, mode, i)))
    log.info("collected %d episodes", len(paths))
    return paths


def load_episodes(out, subject: str) -> list:
    files = sorted(Path(out, "episodes").glob(f"{subject}_*.log"))
    return [read_episode(f) for f in files]


def write_curve(curve, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "train_loss", "heldout_loss"])
        for step, lr, tr, ho in curve:
            w.writerow([step, repr(lr), repr(tr), "" if np.isnan(ho) else repr(ho)])


def train_subject(cfg: ExperimentConfig, episodes, seed: int, include_emg: bool = True):
    if not episodes:
        raise DatasetError("no episodes to train on")
    scaling = fit_scaling(episodes, include_emg)
    ds = build_dataset(episodes, scaling, delta=cfg.mpc.delta, include_emg=include_emg)
    if len(ds) == 0:
        raise DatasetError("episodes too short to form any training window")
    return train(ds, replace(cfg.train, seed=seed))


def run_training(cfg: ExperimentConfig, out) -> dict[str, Path]:
    """Train one model per subject plus the developer's no-EMG ablation."""
    out = Path(out)
    model_dir = out / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    seeds = seed_manifest(cfg)
    jobs = [(s, s, True) for s in [DEVELOPER, *cfg.subject_names]] + [(ABLATION, DEVELOPER, False)]
    paths = {}
    for name, source, include_emg in jobs:
        episodes = load_episodes(out, source)
        if not episodes:
            raise ConfigError(f"no episodes for {source!r} under {out / 'episodes'}; run collect first")
        result = train_subject(cfg, episodes, seeds[f"train.{name}"], include_emg)
        path = model_dir / f"{name}.koop"
        save_model(result.model, path)
        write_curve(result.curve, model_dir / f"{name}_curve.csv")
        log.info("%s: best held-out loss %.4g at epoch %d", name, result.best_heldout,
                 result.best_epoch)
        paths[name] = path
    return paths


def load_models(cfg: ExperimentConfig, out) -> dict[str, KoopmanModel]:
    model_dir = Path(out) / "models"
    models = {}
    for name in [DEVELOPER, ABLATION, *cfg.subject_names]:
        path = model_dir / f"{name}.koop"
        if not path.exists():
            raise ConfigError(f"missing model {path}; run train first")
        models[name] = load_model(path)
    return models


def eval_name(subj: str, mode: str, controller: str, col=None) -> str:
    tail = "" if col is None else "_" + grid_tag(col)
    return f"{subj}_{mode}_{controller}{tail}"


def run_episode(cfg: ExperimentConfig, plant: PlantParams, controller, mode: str, seed: int,
                col=None):
    return simulate_episode(plant, ActuatorGeometry(), controller, reference(cfg, col),
                            cfg.duration, seed, mode, cfg.patient)


def prediction_study(models: dict[str, KoopmanModel], heldout, horizon: int = 16):
    """Mean 1..horizon step absolute errors of the EMG and no-EMG developer models."""
    with_emg = prediction_errors(models[DEVELOPER], heldout, horizon)
    without = prediction_errors(models[ABLATION], heldout, horizon)
    return np.column_stack([with_emg.mean(axis=0), without.mean(axis=0)])


def prediction_overlay(model: KoopmanModel, ep, n_windows: int = 4, horizon: int = 16,
                       start: int = 500, spacing: int = 60) -> list[tuple]:
    """Rows (window, step, tick, actual, predicted) of multi-step predictions on one episode."""
    sc = model.scaling
    u = episode_inputs(ep, sc)
    rows = []
    for w in range(n_windows):
        k0 = start + w * spacing
        if k0 + horizon >= len(ep):
            break
        z = predict_multistep(model, float(sc.scale_angle(ep.theta[k0])), u[k0:k0 + horizon])
        pred = sc.unscale_angle(z[:, 0])
        for s in range(horizon + 1):
            rows.append((w, s, k0 + s, float(ep.theta[k0 + s]), float(pred[s])))
    return rows


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def run_control_eval(cfg: ExperimentConfig, out) -> list[Path]:
    """Closed-loop evaluation matrix plus the held-out prediction study.

    Per subject: KMPC (own model) and PID in both modes at the nominal
    reference, then passive KMPC with the own and the developer's model over
    every grid column.  Episodes sharing a cell share a seed.
    """
    out = Path(out)
    ev_dir = out / "eval"
    tm_dir = out / "timing"
    ev_dir.mkdir(parents=True, exist_ok=True)
    tm_dir.mkdir(parents=True, exist_ok=True)
    seeds = seed_manifest(cfg)
    params = subject_params(cfg)
    models = load_models(cfg, out)

    written = []

    def record(name, ep):
        written.append(write_episode(ep, ev_dir / f"{name}.log"))
        if ep.wall_time is not None:
            write_timing(ep, tm_dir / f"{name}.csv")

    for subj in cfg.subject_names:
        plant = params[subj]
        for mode in MODES:
            seed = seeds[f"eval.{subj}.{mode}"]
            record(eval_name(subj, mode, "kmpc"),
                   run_episode(cfg, plant, make_kmpc(models[subj], cfg), mode, seed))
            record(eval_name(subj, mode, "pid"), run_episode(cfg, plant, make_pid(cfg), mode, seed))
        for col in cfg.grid:
            seed = seeds[f"eval.{subj}.{grid_tag(col)}"]
            for tag, model in (("pers", models[subj]), ("nonpers", models[DEVELOPER])):
                record(eval_name(subj, "passive", f"kmpc-{tag}", col),
                       run_episode(cfg, plant, make_kmpc(model, cfg), "passive", seed, col))
        log.info("evaluated %s", subj)

    heldout = [read_episode(f) for f in sorted((out / "episodes").glob(f"{HELDOUT}_*.log"))]
    if heldout:
        curve = prediction_study(models, heldout)
        rows = [(k + 1, float(a), float(b)) for k, (a, b) in enumerate(curve)]
        _write_rows(ev_dir / "prediction_error.csv", ["step", "emg_model", "no_emg_model"], rows)
        _write_rows(ev_dir / "prediction_overlay.csv", ["window", "step", "tick", "actual", "predicted"],
                    prediction_overlay(models[DEVELOPER], heldout[0]))
    return written
