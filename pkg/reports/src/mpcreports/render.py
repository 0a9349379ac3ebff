"""Deterministic figure and table renderers over the documented CSV schemas.

Rendering is a pure function of the input files: fixed style, fixed dpi, no
timestamps, so identical inputs produce byte-identical outputs.
"""

import statistics
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import schemas
from .schemas import SchemaError

KINDS = ("latency_bars", "trajectory_topview", "training_curve", "laptime_table")

_FIG_KW = dict(figsize=(8.0, 4.5), dpi=120)
_SAVE_KW = dict(metadata={"Software": "mpc-report"})


@dataclass(frozen=True)
class ReportJob:
    kind: str
    inputs: tuple
    out: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown report kind {self.kind!r}; choose from {KINDS}")
        if not self.inputs:
            raise SchemaError("at least one input file is required")


def _float(value, default=np.nan):
    try:
        return float(value)
    except (TypeError, ValueError):
        return default


def latency_groups(rows):
    """Group bench rows into ordered (T, mode) bar groups.

    Returns a list of ((T, mode), [(B, K, forward_ms), ...]) sorted by horizon
    first, so bars cluster by prediction horizon with one group per mode.
    """
    groups = {}
    for row in rows:
        key = (int(row["T"]), row["mode"])
        groups.setdefault(key, []).append(
            (int(row["B"]), int(row["K"]), _float(row["forward_ms"]))
        )
    ordered = []
    for key in sorted(groups, key=lambda k: (k[0], k[1])):
        ordered.append((key, sorted(groups[key])))
    return ordered


def render_latency_bars(job: ReportJob):
    rows = []
    for path in job.inputs:
        rows.extend(schemas.read_rows(path, schemas.BENCH))
    groups = latency_groups(rows)
    fig, ax = plt.subplots(**_FIG_KW)
    x = 0.0
    ticks, labels = [], []
    for (T, mode), bars in groups:
        positions = x + np.arange(len(bars)) * 0.8
        heights = [b[2] for b in bars]
        color = "#2a6fbb" if mode == "fused" else "#c45a29"
        ax.bar(positions, heights, width=0.7, color=color)
        for pos, (B, K, _h) in zip(positions, bars):
            ax.text(pos, 0.0, f"B={B}", ha="center", va="bottom", fontsize=6,
                    rotation=90, color="white")
        ticks.append(positions.mean() if len(bars) else x)
        labels.append(f"T={T} {mode}")
        x = (positions[-1] + 1.6) if len(bars) else (x + 1.6)
    ax.set_xticks(ticks)
    ax.set_xticklabels(labels, fontsize=8, rotation=20, ha="right")
    ax.set_ylabel("forward time [ms]")
    if rows:
        ax.set_yscale("log")
    ax.set_title("solver latency by horizon and execution mode")
    fig.subplots_adjust(bottom=0.18, left=0.09, right=0.98, top=0.92)
    fig.savefig(job.out, **_SAVE_KW)
    plt.close(fig)


def render_trajectory_topview(job: ReportJob):
    fig, ax = plt.subplots(**_FIG_KW)
    mappable = None
    vmax = 0.0
    data = []
    for path in job.inputs:
        rows = schemas.read_rows(path, schemas.TRAJECTORY)
        xs = np.array([_float(r["x"]) for r in rows])
        ys = np.array([_float(r["y"]) for r in rows])
        speed = np.array(
            [np.hypot(_float(r["vx"]), _float(r["vy"])) for r in rows]
        )
        data.append((xs, ys, speed))
        if speed.size:
            vmax = max(vmax, float(speed.max()))
    for xs, ys, speed in data:
        if xs.size == 0:
            continue
        ax.plot(xs, ys, color="0.8", linewidth=0.8, zorder=1)
        mappable = ax.scatter(xs, ys, c=speed, s=6.0, cmap="viridis",
                              vmin=0.0, vmax=max(vmax, 1e-9), zorder=2)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title("trajectory top view")
    if mappable is not None:
        fig.colorbar(mappable, ax=ax, label="speed [m/s]")
    fig.tight_layout()
    fig.savefig(job.out, **_SAVE_KW)
    plt.close(fig)


def render_training_curve(job: ReportJob):
    fig, ax = plt.subplots(**_FIG_KW)
    ax2 = ax.twinx()
    for path in job.inputs:
        rows = schemas.read_rows(path, schemas.METRICS)
        upd = np.array([_float(r["update"]) for r in rows])
        rew = np.array([_float(r["mean_reward"]) for r in rows])
        lap = np.array([_float(r["lap_rate"]) for r in rows])
        ax.plot(upd, rew, color="#2a6fbb", label="mean episode reward")
        ax2.plot(upd, lap, color="#c45a29", linestyle="--", label="lap completion rate")
    ax.set_xlabel("update")
    ax.set_ylabel("mean episode reward")
    ax2.set_ylabel("lap completion rate")
    ax2.set_ylim(-0.05, 1.05)
    ax.set_title("training progress")
    fig.tight_layout()
    fig.savefig(job.out, **_SAVE_KW)
    plt.close(fig)


def render_laptime_table(job: ReportJob):
    rows = []
    for path in job.inputs:
        rows.extend(schemas.read_rows(path, schemas.LAPS))
    groups = {}
    for row in rows:
        key = (row["mode"], row["T"], row["K"])
        groups.setdefault(key, []).append(row)
    lines = [
        f"{'mode':>10} {'T':>4} {'K':>4} {'episodes':>9} {'completion':>11} "
        f"{'median_lap_s':>13} {'best_lap_s':>11}"
    ]
    for key in sorted(groups):
        mode, T, K = key
        entries = groups[key]
        times = [_float(r["lap_time_s"]) for r in entries if r["lap_time_s"]]
        completion = sum(int(r["completed"]) for r in entries) / len(entries)
        median = f"{statistics.median(times):.3f}" if times else "none"
        best = f"{min(times):.3f}" if times else "none"
        lines.append(
            f"{mode:>10} {T!s:>4} {K!s:>4} {len(entries):>9} {completion:>11.3f} "
            f"{median:>13} {best:>11}"
        )
    with open(job.out, "w") as f:
        f.write("\n".join(lines) + "\n")


_RENDERERS = {
    "latency_bars": render_latency_bars,
    "trajectory_topview": render_trajectory_topview,
    "training_curve": render_training_curve,
    "laptime_table": render_laptime_table,
}


def render(job: ReportJob):
    """Render one report job to its output file."""
    _RENDERERS[job.kind](job)
    return job.out
