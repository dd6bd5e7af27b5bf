"""Episode log files: one CSV row per control tick.

Floats are written with ``repr`` so a log reads back bit-exact.  Wall-clock
timing goes to a separate sidecar because it differs from run to run.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .plant import DT, DEADLINE_S, EpisodeLog

COLUMNS = ("tick", "time_s", "theta_deg", "ref_deg", "duty", "emg_rms_ch1", "emg_rms_ch2", "mode",
           "qp_iters", "kkt_residual")
TIMING_COLUMNS = ("tick", "wall_time_s", "deadline_miss")


class LogFormatError(ValueError):
    pass


def episode_name(subject: str, mode: str, idx) -> str:
    return f"{subject}_{mode}_{idx}.log"


def write_episode(log: EpisodeLog, path) -> Path:
    path = Path(path)
    qp = log.qp_iters if log.qp_iters is not None else np.zeros(len(log), dtype=int)
    kkt = log.kkt_residual if log.kkt_residual is not None else np.zeros(len(log))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for k in range(len(log)):
            w.writerow([k, repr(k * DT), repr(float(log.theta[k])), repr(float(log.ref[k])),
                        repr(float(log.duty[k])), repr(float(log.emg[k, 0])),
                        repr(float(log.emg[k, 1])), log.mode, int(qp[k]), repr(float(kkt[k]))])
    return path


def read_episode(path) -> EpisodeLog:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0][:8]) != COLUMNS[:8]:
        raise LogFormatError(f"{path.name}: unexpected header")
    header = rows[0]
    body = rows[1:]
    if not body:
        raise LogFormatError(f"{path.name}: no data rows")
    if any(len(r) != len(header) for r in body):
        raise LogFormatError(f"{path.name}: ragged rows")
    col = {name: i for i, name in enumerate(header)}

    def floats(name):
        return np.array([float(r[col[name]]) for r in body])

    modes = {r[col["mode"]] for r in body}
    if len(modes) != 1:
        raise LogFormatError(f"{path.name}: mixed modes {sorted(modes)}")
    qp = np.array([int(r[col["qp_iters"]]) for r in body]) if "qp_iters" in col else None
    kkt = floats("kkt_residual") if "kkt_residual" in col else None
    emg = np.column_stack([floats("emg_rms_ch1"), floats("emg_rms_ch2")])
    return EpisodeLog(floats("theta_deg"), floats("ref_deg"), floats("duty"), emg, modes.pop(),
                      qp, kkt)


def write_timing(log: EpisodeLog, path) -> Path:
    """Per-tick controller wall time and deadline flags (not reproducible byte-for-byte)."""
    path = Path(path)
    wall = log.wall_time if log.wall_time is not None else np.zeros(len(log))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for k, t in enumerate(wall):
            w.writerow([k, repr(float(t)), int(t > DEADLINE_S)])
    return path


def read_timing(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([float(r[1]) for r in rows])
