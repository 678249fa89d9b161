"""Aggregate tables and static SVG plots for a directory of run logs."""

from __future__ import annotations

import csv
import json
from dataclasses import fields
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import harness as hs  # noqa: E402


def _metrics_results(run_dir: Path) -> list:
    out = []
    names = {f.name for f in fields(hs.RunMetrics)}
    for path in sorted(run_dir.glob("*_metrics.json")):
        meta = json.loads(path.read_text())
        m = hs.RunMetrics(**{k: v for k, v in meta.items() if k in names})
        out.append((f"{meta['scenario']}/{meta['variant']}", meta["seed"], m))
    return out


def _read_reference(path: Path):
    if not path.exists():
        return None
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows])


def plot_run(log_path: Path, out_path: Path) -> Path:
    """Four panels: top view, speed, smallest barrier value and disturbance estimate."""
    log = hs.read_log(log_path)
    stem = log_path.stem
    t = np.array([r["t"] for r in log])
    xy = np.array([[r["px"], r["py"]] for r in log])
    speed = np.linalg.norm([[r["vx"], r["vy"], r["vz"]] for r in log], axis=1)
    fig, ax = plt.subplots(2, 2, figsize=(11, 7))
    top = ax[0, 0]
    world_path = log_path.with_name(f"{stem}_world.json")
    if world_path.exists():
        world = json.loads(world_path.read_text())
        for cx, cy, d, _ in world["cylinders"]:
            top.add_patch(plt.Circle((cx, cy), d / 2, color="0.4"))
        top.plot(*world["goal"][:2], "g*", ms=12, label="goal")
    ref = _read_reference(log_path.with_name(f"{stem}_reference.csv"))
    if ref is not None:
        top.plot(ref[:, 0], ref[:, 1], "k--", lw=1, label="reference")
    top.plot(xy[:, 0], xy[:, 1], "b", lw=1.5, label="flown")
    top.set_aspect("equal")
    top.set_title("top view")
    top.legend(loc="best", fontsize=8)
    ax[0, 1].plot(t, speed)
    ax[0, 1].set_title("speed [m/s]")
    hsv = np.array([r["h_s"] for r in log])
    hov = np.array([r["h_o_min"] for r in log])
    big = hs.SENTINEL_CUTOFF
    if np.any(hsv < big):
        ax[1, 0].plot(t, np.where(hsv < big, hsv, np.nan), label="h_s")
    if np.any(hov < big):
        ax[1, 0].plot(t, np.where(hov < big, hov, np.nan), label="min h_o")
    ax[1, 0].axhline(0.0, color="r", lw=0.8)
    ax[1, 0].set_title("barrier values [m]")
    if ax[1, 0].get_legend_handles_labels()[0]:
        ax[1, 0].legend(fontsize=8)
    ax[1, 1].plot(t, [r["sigma_hat_norm"] for r in log], label="|estimate|")
    ax[1, 1].plot(t, np.linalg.norm([[r["sigma_x"], r["sigma_y"], r["sigma_z"]] for r in log], axis=1),
                  "--", label="|true|")
    ax[1, 1].set_title("disturbance [m/s^2]")
    ax[1, 1].legend(fontsize=8)
    for a in ax.flat[1:]:
        a.set_xlabel("t [s]")
    fig.suptitle(stem)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


def build_report(run_dir: Path) -> list:
    """Write ``summary.csv``, ``summary.txt`` and one SVG per run log; return the paths."""
    run_dir = Path(run_dir)
    produced = []
    results = _metrics_results(run_dir)
    if results:
        rows = hs.summarize(results)
        hs.write_table_csv(run_dir / "summary.csv", rows)
        (run_dir / "summary.txt").write_text(hs.format_table(rows) + "\n")
        produced += [run_dir / "summary.csv", run_dir / "summary.txt"]
    for log_path in sorted(run_dir.glob("*.csv")):
        if log_path.stem.endswith(("_timing", "_reference")) or log_path.name == "summary.csv":
            continue
        produced.append(plot_run(log_path, log_path.with_suffix(".svg")))
    return produced
