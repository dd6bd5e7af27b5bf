"""Tables and figures from the evaluation outputs.

RMSE values are recomputed from the episode logs on disk, so every number in
a table can be traced to a file.  Figures are matplotlib SVGs with a fixed
hash salt and no date stamp, making them byte-stable across runs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import ExperimentConfig  # noqa: E402
from .episodes import read_episode, read_timing  # noqa: E402
from .experiments import MODES, episode_rmse, eval_name, transient_ticks  # noqa: E402
from .plant import DEADLINE_S, DT  # noqa: E402

CONTROLLERS = ("kmpc", "pid")
TABLE_II_COLUMNS = ("passive_kmpc", "passive_pid", "active_kmpc", "active_pid")
HIST_BIN = 0.05  # degrees

STYLE = {
    "svg.hashsalt": "koopexo",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


@dataclass
class MetricsReport:
    """Everything the report renders."""

    rmse: dict  # eval episode name -> RMSE (deg)
    table_i: list  # rows (freq, low, high, model, *per-subject RMSE)
    table_ii: list  # rows (subject, *TABLE_II_COLUMNS)
    edges: np.ndarray
    histograms: dict  # "mode_controller" -> counts over ``edges``
    prediction_error: np.ndarray  # (horizon, 2): EMG / no-EMG mean abs error
    overlay: np.ndarray  # rows (window, step, tick, actual, predicted)
    step_time: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _read_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows]) if rows else np.zeros((0, 0))


def abs_errors(ep, cfg: ExperimentConfig) -> np.ndarray:
    n0 = transient_ticks(cfg)
    return np.abs(ep.theta[n0:] - ep.ref[n0:])


def histogram_edges(max_error: float, width: float = HIST_BIN) -> np.ndarray:
    n = max(1, int(np.ceil(max_error / width - 1e-9)))
    return np.arange(n + 1) * width


def collect_metrics(cfg: ExperimentConfig, out) -> MetricsReport:
    out = Path(out)
    ev = out / "eval"
    names = cfg.subject_names
    rmse = {}
    errors = {}
    for subj in names:
        for mode in MODES:
            for ctrl in CONTROLLERS:
                name = eval_name(subj, mode, ctrl)
                ep = read_episode(ev / f"{name}.log")
                rmse[name] = episode_rmse(ep, cfg)
                errors.setdefault(f"{mode}_{ctrl}", []).append(abs_errors(ep, cfg))
        for col in cfg.grid:
            for tag in ("pers", "nonpers"):
                name = eval_name(subj, "passive", f"kmpc-{tag}", col)
                rmse[name] = episode_rmse(read_episode(ev / f"{name}.log"), cfg)

    table_ii = [(subj, *(rmse[eval_name(subj, c.split("_")[0], c.split("_")[1])]
                         for c in TABLE_II_COLUMNS)) for subj in names]
    table_i = []
    for col in cfg.grid:
        for tag in ("pers", "nonpers"):
            table_i.append((*col, tag, *(rmse[eval_name(s, "passive", f"kmpc-{tag}", col)]
                                         for s in names)))

    pooled = {k: np.concatenate(v) for k, v in errors.items()}
    top = max((float(v.max()) for v in pooled.values() if v.size), default=0.0)
    edges = histogram_edges(top)
    hists = {k: np.histogram(v, bins=edges)[0] for k, v in pooled.items()}

    times = [read_timing(p) for p in sorted((out / "timing").glob("*_kmpc*.csv"))]
    pe = ev / "prediction_error.csv"
    ov = ev / "prediction_overlay.csv"
    return MetricsReport(
        rmse, table_i, table_ii, edges, hists,
        _read_csv(pe)[:, 1:] if pe.exists() else np.zeros((0, 2)),
        _read_csv(ov) if ov.exists() else np.zeros((0, 5)),
        np.concatenate(times) if times else np.zeros(0),
    )


# --- writers --------------------------------------------------------------------

def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_prediction_error(curve: np.ndarray, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        steps = np.arange(1, len(curve) + 1)
        ax.plot(steps, curve[:, 0], marker="o", ms=3, label="with EMG")
        ax.plot(steps, curve[:, 1], marker="s", ms=3, label="without EMG")
        ax.set_xlabel("prediction step")
        ax.set_ylabel("mean abs error (deg)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_overlay(rows: np.ndarray, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        for w in np.unique(rows[:, 0]) if len(rows) else []:
            r = rows[rows[:, 0] == w]
            ax.plot(r[:, 2] * DT, r[:, 3], color="k", lw=1.2, label="measured" if w == 0 else None)
            ax.plot(r[:, 2] * DT, r[:, 4], color="C3", ls="--", marker=".", ms=3,
                    label="predicted" if w == 0 else None)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("knee angle (deg)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_personalization(report: MetricsReport, cfg: ExperimentConfig, path: Path) -> Path:
    nominal = (cfg.frequency, cfg.low, cfg.high)
    rows = {r[3]: r[4:] for r in report.table_i if tuple(r[:3]) == nominal}
    names = cfg.subject_names
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for i, (tag, label) in enumerate((("pers", "personalized"), ("nonpers", "non-personalized"))):
            if tag in rows:
                ax.bar(x + (i - 0.5) * 0.38, rows[tag], width=0.38, label=label)
        ax.set_xticks(x, names)
        ax.set_ylabel("tracking RMSE (deg)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_histograms(report: MetricsReport, path: Path) -> Path:
    edges = report.edges
    width = np.diff(edges)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7, 3), sharey=True)
        for ax, mode in zip(axes, MODES):
            for i, ctrl in enumerate(CONTROLLERS):
                counts = report.histograms.get(f"{mode}_{ctrl}", np.zeros(len(width), dtype=int))
                ax.bar(edges[:-1] + i * width / 2, counts, width=width / 2, align="edge",
                       label=ctrl.upper())
            ax.set_title(f"{mode} mode")
            ax.set_xlabel("absolute tracking error (deg)")
        axes[0].set_ylabel("ticks")
        axes[0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def emit_report(report: MetricsReport, cfg: ExperimentConfig, out) -> list[Path]:
    """Write CSV tables and SVG figures under ``out/report``; return the paths."""
    rep = Path(out) / "report"
    rep.mkdir(parents=True, exist_ok=True)
    names = cfg.subject_names
    paths = [
        _write(rep / "table_ii.csv", ["subject", *TABLE_II_COLUMNS], report.table_ii),
        _write(rep / "table_i.csv", ["frequency_hz", "low_deg", "high_deg", "model", *names],
               report.table_i),
    ]
    hist_keys = [f"{m}_{c}" for m in MODES for c in CONTROLLERS]
    hist_rows = [(float(lo), float(hi), *(int(report.histograms[k][i]) for k in hist_keys))
                 for i, (lo, hi) in enumerate(zip(report.edges[:-1], report.edges[1:]))]
    paths.append(_write(rep / "error_histogram.csv", ["bin_lo", "bin_hi", *hist_keys], hist_rows))
    paths.append(plot_histograms(report, rep / "error_histogram.svg"))
    paths.append(plot_personalization(report, cfg, rep / "personalization.svg"))
    if len(report.prediction_error):
        rows = [(k + 1, *map(float, r)) for k, r in enumerate(report.prediction_error)]
        paths.append(_write(rep / "prediction_error.csv", ["step", "emg_model", "no_emg_model"], rows))
        paths.append(plot_prediction_error(report.prediction_error, rep / "prediction_error.svg"))
    if len(report.overlay):
        rows = [(int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4])) for r in report.overlay]
        paths.append(_write(rep / "prediction_overlay.csv",
                            ["window", "step", "tick", "actual", "predicted"], rows))
        paths.append(plot_overlay(report.overlay, rep / "prediction_overlay.svg"))
    if report.step_time.size:
        t = report.step_time
        _write(Path(out) / "timing" / "summary.csv",
               ["ticks", "mean_s", "p99_s", "max_s", "deadline_misses"],
               [(t.size, float(t.mean()), float(np.percentile(t, 99)), float(t.max()),
                 int(np.sum(t > DEADLINE_S)))])
    return paths


def render_tables(report: MetricsReport, cfg: ExperimentConfig) -> str:
    """Delimited text of the two RMSE tables, for the terminal."""
    lines = ["# table_ii: tracking RMSE (deg)", "subject," + ",".join(TABLE_II_COLUMNS)]
    lines += [f"{r[0]}," + ",".join(f"{v:.4f}" for v in r[1:]) for r in report.table_ii]
    lines += ["", "# table_i: passive KMPC RMSE (deg), personalized vs developer model",
              "frequency_hz,low_deg,high_deg,model," + ",".join(cfg.subject_names)]
    lines += [f"{r[0]:g},{r[1]:g},{r[2]:g},{r[3]}," + ",".join(f"{v:.4f}" for v in r[4:])
              for r in report.table_i]
    if len(report.prediction_error):
        lines += ["", "# prediction error (deg) by step", "step,emg_model,no_emg_model"]
        lines += [f"{k + 1},{a:.4f},{b:.4f}" for k, (a, b) in enumerate(report.prediction_error)]
    return "\n".join(lines) + "\n"

