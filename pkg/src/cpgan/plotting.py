"""Figures for a finished (or running) training directory.

Uses the non-interactive Agg backend so it works on headless machines.
Every figure is accompanied by a CSV of the plotted numbers.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imaging import load_image, load_mask  # noqa: E402
from .losses import LOSS_NAMES  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.0,
    "savefig.dpi": 150,
}


def fig_size(scale: float = 1.0, ratio: float = 0.62) -> tuple[float, float]:
    width = 6.0 * scale
    return width, width * ratio


def read_records(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "records.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir} has no records.jsonl")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def loss_series(records: list[dict]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per loss name, the (step, value) pairs of the steps that optimize it.

    Discriminator losses come from D steps and generator losses from G
    steps; mask losses are only produced on D steps.
    """
    series = {}
    for name in LOSS_NAMES:
        kind = "g" if name.startswith("g_") else "d"
        pts = [(r["step"], r["losses"][name]) for r in records if r["kind"] == kind and name in r["losses"]]
        if pts:
            steps, vals = zip(*pts)
            series[name] = (np.array(steps), np.array(vals))
    return series


def plot_losses(records: list[dict], out: Path, fmt: str = "png", smooth: int = 25) -> Path:
    series = loss_series(records)
    n = len(series)
    cols = 3
    rows = max(1, -(-n // cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(9, 2.2 * rows), squeeze=False)
        for ax, (name, (steps, vals)) in zip(axes.flat, series.items()):
            ax.plot(steps, vals, color="0.75", lw=0.5)
            sm = _smooth(vals, smooth)
            ax.plot(steps[len(steps) - len(sm):], sm, color="C0")
            ax.set_title(name)
            ax.set_xlabel("step")
        for ax in list(axes.flat)[n:]:
            ax.axis("off")
        fig.tight_layout()
        path = out / f"losses.{fmt}"
        fig.savefig(path)
        plt.close(fig)
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss", "step", "value"])
        for name, (steps, vals) in series.items():
            w.writerows((name, int(s), f"{v:.6g}") for s, v in zip(steps, vals))
    return path


def odp_history(records: list[dict]) -> list[tuple[int, float]]:
    return [(r["step"] + 1, r["odp_eval"]) for r in records if r.get("odp_eval") is not None]


def plot_odp(records: list[dict], out: Path, fmt: str = "png") -> Path | None:
    hist = odp_history(records)
    if not hist:
        return None
    steps, vals = zip(*hist)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size(0.8))
        ax.plot(steps, vals, marker="o", ms=2.5)
        best = int(np.argmax(vals))
        ax.axhline(0.1 * vals[best], color="C3", ls=":", lw=0.8, label="stability floor")
        ax.scatter([steps[best]], [vals[best]], color="C1", zorder=3, label=f"best {vals[best]:.1f}")
        ax.set_xlabel("step")
        ax.set_ylabel("ODP (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False)
        fig.tight_layout()
        path = out / f"odp.{fmt}"
        fig.savefig(path)
        plt.close(fig)
    with open(out / "odp.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "odp"])
        w.writerows(hist)
    return path


def plot_samples(sample_dir: Path, out: Path, fmt: str = "png") -> Path | None:
    """Input / copy-mask / seediness rows from a ``samples/step_N`` directory."""
    sources = sorted(sample_dir.glob("*_source.png"), key=lambda p: int(p.name.split("_")[0]))
    if not sources:
        return None
    has_seed = any(sample_dir.glob("*_seediness.png"))
    cols = 3 if has_seed else 2
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(sources), cols, figsize=(1.3 * cols, 1.3 * len(sources)), squeeze=False)
        for row, src in zip(axes, sources):
            idx = src.name.split("_")[0]
            row[0].imshow(load_image(src), interpolation="nearest")
            row[1].imshow(load_mask(sample_dir / f"{idx}_mask.png"), cmap="gray", vmin=0, vmax=1,
                          interpolation="nearest")
            if has_seed:
                row[2].imshow(load_mask(sample_dir / f"{idx}_seediness.png"), cmap="magma", interpolation="nearest")
            for ax in row:
                ax.set_xticks([])
                ax.set_yticks([])
        titles = ["input", "copy-mask", "seediness"][:cols]
        for ax, t in zip(axes[0], titles):
            ax.set_title(t)
        fig.tight_layout()
        path = out / f"samples_{sample_dir.name}.{fmt}"
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_run(run_dir: str | Path, out_dir: str | Path | None = None, fmt: str = "png") -> list[Path]:
    """Render every figure available for ``run_dir``; returns the written figure paths."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "figures"
    out.mkdir(parents=True, exist_ok=True)
    records = read_records(run_dir)
    written = [plot_losses(records, out, fmt)]
    odp_fig = plot_odp(records, out, fmt)
    if odp_fig is not None:
        written.append(odp_fig)
    samples = sorted((run_dir / "samples").glob("step_*"), key=lambda p: int(p.name.split("_")[1]))
    if samples:
        fig = plot_samples(samples[-1], out, fmt)
        if fig is not None:
            written.append(fig)
    return written
