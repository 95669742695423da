"""PNG figures written next to the CSV outputs of the command line tools."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .objectives import OBJECTIVE_NAMES  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _as_float(val):
    if val is None or val == "":
        return np.nan
    return float(val)


def plot_training_curves(rows: list[dict], path: Path) -> Path:
    """Per-epoch mean of every logged loss component, log scale."""
    epochs = sorted({int(r["epoch"]) for r in rows})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name in OBJECTIVE_NAMES + ("total",):
            if all(r[name] in (None, "") for r in rows):
                continue                    # objective disabled
            vals = [np.nanmean([_as_float(r[name]) for r in rows if int(r["epoch"]) == e]) for e in epochs]
            ax.plot(epochs, vals, label=name, lw=2.0 if name == "total" else 1.2)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.legend(ncol=3)
        return _save(fig, path)


def plot_per_video_f1(per_video: list[dict[str, float]], path: Path) -> Path:
    """Per-video F1 averaged over prompt variants, with the variant spread as error bars."""
    videos = list(per_video[0])
    table = np.array([[pv[v] for v in videos] for pv in per_video])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(videos))
        ax.bar(x, table.mean(axis=0), yerr=table.std(axis=0), color="tab:blue", alpha=0.8, capsize=2)
        ax.set_xticks(x)
        ax.set_xticklabels(videos, rotation=60, ha="right", fontsize=7)
        ax.set_ylim(0, 1)
        ax.set_ylabel("macro-F1")
        ax.axhline(table.mean(), color="k", lw=1, ls="--")
        return _save(fig, path)


def plot_window_sweep(rows: list[dict], path: Path) -> Path:
    """F1 and mAP against the evaluation window, one line pair per dataset."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name in sorted({r["dataset"] for r in rows}):
            sub = sorted((r for r in rows if r["dataset"] == name), key=lambda r: int(r["window"]))
            w = [int(r["window"]) for r in sub]
            ax.plot(w, [float(r["f1"]) for r in sub], "o-", label=f"{name} F1")
            ax.plot(w, [float(r["map"]) for r in sub], "s--", label=f"{name} mAP")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("window (frames)")
        ax.set_ylim(0, 1)
        ax.legend()
        return _save(fig, path)
