"""Run artifacts: CSV logs, structured-text summaries, rendered figures.

Writers are deterministic for identical inputs: column order follows the log
row order, floats are formatted with repr (shortest round-trip), and figures
render through the Agg backend so no display is needed.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import yaml

from .harness import RunResult


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, rows: list[dict]) -> Path:
    """One log stream to CSV; header from the first row, empty file if none."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if rows:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(rows[0].keys())
            for row in rows:
                writer.writerow([_fmt(v) for v in row.values()])
    return path


def write_yaml(path: Path, doc: dict) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    return path


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def _residual_figure(out_dir: Path, result: RunResult) -> Path:
    target = result.summary["residual_target"]
    r = result.r_series
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for i in range(r.shape[1]):
        ax.plot(r[:, i], label=f"r[{i}]")
    if isinstance(target, list):
        for t in target:
            ax.axhline(t, color="k", linestyle="--", linewidth=0.8)
    else:
        ax.axhline(target, color="k", linestyle="--", linewidth=0.8)
    ax.set_xlabel("update")
    ax.set_ylabel("gap residual")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("learned residual (dashed: target)")
    return _save(fig, out_dir / "residual.png")


def _cartpole_states_figure(out_dir: Path, result: RunResult) -> Path:
    t = np.arange(len(result.xs_true)) / result.config.control_rate_hz
    labels = ["cart pos", "pole angle", "cart vel", "pole vel"]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for i, lab in enumerate(labels):
        ax.plot(t, result.xs_true[:, i], label=lab, linewidth=0.9)
    ax.axhspan(-0.05, 0.05, color="0.88", zorder=0)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("state")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("cart-pole closed loop (band: stabilization threshold)")
    return _save(fig, out_dir / "states.png")


def _pusher_path_figure(out_dir: Path, result: RunResult) -> Path:
    task = result.config.task
    cx, cy = task.center
    th = np.linspace(0.0, 2.0 * np.pi, 256)
    fig, ax = plt.subplots(figsize=(4.6, 4.6))
    ax.plot(cx + task.path_radius * np.cos(th), cy + task.path_radius * np.sin(th),
            "k--", linewidth=0.8, label="reference")
    for rad in (task.path_radius - task.tube_tol, task.path_radius + task.tube_tol):
        ax.plot(cx + rad * np.cos(th), cy + rad * np.sin(th), "k:", linewidth=0.5)
    ax.plot(result.xs_true[:, 2], result.xs_true[:, 3], label="ball")
    ax.plot(result.xs_true[:, 0], result.xs_true[:, 1], linewidth=0.6, alpha=0.6,
            label="finger")
    ax.plot(result.xs_true[0, 2], result.xs_true[0, 3], "o", markersize=4)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("pusher-ball path (dotted: success tube)")
    return _save(fig, out_dir / "path.png")


def write_run_report(out_dir: Path, result: RunResult) -> list[Path]:
    """CSV logs, YAML summary and figures for one closed-loop run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        write_csv(out_dir / "control_log.csv", result.control_rows),
        write_csv(out_dir / "adapt_log.csv", result.adapt_rows),
        write_yaml(out_dir / "summary.yaml", result.summary),
        _residual_figure(out_dir, result),
    ]
    if result.config.experiment == "cartpole_walls":
        paths.append(_cartpole_states_figure(out_dir, result))
    else:
        paths.append(_pusher_path_figure(out_dir, result))
    return paths


def write_map_report(out_dir: Path, rows: list[dict]) -> list[Path]:
    """Gradient region map as CSV plus a heatmap with the zero class distinct."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_csv(out_dir / "gradient_map.csv", rows)]

    n_tip = max(r["i"] for r in rows) + 1
    n_gap = max(r["j"] for r in rows) + 1
    grid = np.zeros((n_tip, n_gap))
    for r in rows:
        grid[r["i"], r["j"]] = r["grad_norm"]
    tips = sorted({r["tip"] for r in rows})
    gaps = sorted({r["gap_error"] for r in rows})
    # cells with exactly zero gradient (no event, no prediction) render gray
    masked = np.ma.masked_where(grid == 0.0, grid)
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("0.85")
    fig, ax = plt.subplots(figsize=(5.4, 4.2))
    mesh = ax.pcolormesh(
        gaps, tips, np.ma.log10(masked), cmap=cmap, shading="nearest"
    )
    fig.colorbar(mesh, ax=ax, label="log10 gradient norm")
    ax.set_xlabel("wall offset error")
    ax.set_ylabel("pole tip position")
    ax.set_title("residual gradient (gray: exactly zero)")
    paths.append(_save(fig, out_dir / "gradient_map.png"))
    return paths


def write_bench_report(out_dir: Path, report: dict) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [write_yaml(out_dir / "bench.yaml", report)]
