"""Render the emitted plot-data CSVs to PNG figures.

Kept separate from the data emission so runs can stay headless; uses the Agg
backend and writes files only.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _read_rows(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def render_figures(out_dir: str | Path) -> list[Path]:
    """Produce path-overlay, RMSE-bar, and margin figures next to the CSVs."""
    plots = Path(out_dir) / "plots"
    written = []

    overlay = plots / "path_overlay.csv"
    if overlay.exists():
        series = defaultdict(lambda: ([], []))
        for row in _read_rows(overlay):
            xs, ys = series[(row["trial"], row["kind"])]
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
        fig, ax = plt.subplots(figsize=(7, 3.2))
        for (trial, kind), (xs, ys) in sorted(series.items()):
            style = dict(lw=1.6, ls="--", color="k") if kind == "planned" \
                else dict(lw=1.0, alpha=0.8)
            label = f"{kind} (trial {trial})" if kind == "actual" else \
                ("planned" if trial == "0" else None)
            ax.plot(xs, ys, label=label, **style)
        ax.set_xlabel("x (mm, phantom frame)")
        ax.set_ylabel("y (mm)")
        ax.set_title("Planned vs actual tip path")
        ax.legend(fontsize=7, loc="best")
        ax.set_aspect("equal", adjustable="datalim")
        fig.tight_layout()
        out = plots / "path_overlay.png"
        fig.savefig(out, dpi=150)
        plt.close(fig)
        written.append(out)

    bars = plots / "rmse_bars.csv"
    if bars.exists():
        rows = _read_rows(bars)
        if rows:
            slots = [int(r["waypoint_slot"]) for r in rows]
            vals = [float(r["rmse_mm"]) for r in rows]
            fig, ax = plt.subplots(figsize=(4.5, 3))
            ax.bar(slots, vals, color="tab:blue")
            ax.set_xlabel("waypoint")
            ax.set_ylabel("RMSE (mm)")
            ax.set_title("Per-waypoint RMSE across trials")
            fig.tight_layout()
            out = plots / "rmse_bars.png"
            fig.savefig(out, dpi=150)
            plt.close(fig)
            written.append(out)

    margins = plots / "margins.csv"
    if margins.exists():
        per_trial = defaultdict(lambda: ([], []))
        for row in _read_rows(margins):
            xs, ys = per_trial[row["trial"]]
            xs.append(int(row["step"]))
            ys.append(float(row["min_margin"]))
        if per_trial:
            fig, ax = plt.subplots(figsize=(6, 3))
            for trial, (xs, ys) in sorted(per_trial.items()):
                ax.plot(xs, ys, lw=1.0, label=f"trial {trial}")
            ax.set_xlabel("control step")
            ax.set_ylabel("min body-point clearance (mm)")
            ax.set_title("Obstacle margin during execution")
            ax.legend(fontsize=7)
            fig.tight_layout()
            out = plots / "margins.png"
            fig.savefig(out, dpi=150)
            plt.close(fig)
            written.append(out)

    return written
