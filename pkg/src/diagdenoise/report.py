"""Figure rendering for the CLI report paths.

Whenever bench or train writes a delimited report, a matching .png is rendered
next to it (same stem). Headless backend; no display required.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .step_planner import ScheduleReport  # noqa: E402


def figure_path_for(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".png")


def render_bench_figure(reports: list[ScheduleReport], out_path: str | Path) -> Path:
    labels = [r.schedule for r in reports]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].bar(labels, [r.nfe for r in reports], color="#4878d0")
    axes[0].set_ylabel("NFE")
    axes[1].bar(labels, [r.in_flight_latency for r in reports], color="#ee854a")
    axes[1].set_ylabel("in-flight latency (units)")
    axes[2].bar(labels, [r.throughput for r in reports], color="#6acc64")
    axes[2].set_ylabel("throughput (frames/unit)")
    for ax in axes:
        ax.tick_params(axis="x", rotation=60, labelsize=7)
    fig.suptitle("step schedule accounting")
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def render_train_figure(rows: list[dict], out_path: str | Path) -> Path:
    steps = [r["step"] for r in rows]
    fig, axes = plt.subplots(1, 2 if "bias_gap" in rows[0] else 1,
                             figsize=(9 if "bias_gap" in rows[0] else 5.5, 3.4),
                             squeeze=False)
    ax = axes[0][0]
    for key in ("L_DMD", "L_reg", "L_DMD_flow", "L_reg_flow", "total"):
        ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    if "bias_gap" in rows[0]:
        ax2 = axes[0][1]
        ax2.plot(steps, [r["bias_gap"] for r in rows], color="#d65f5f")
        ax2.set_xlabel("step")
        ax2.set_ylabel("|b - m|")
        ax2.set_yscale("log")
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out
