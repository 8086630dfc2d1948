"""Render the plot-data CSVs written by the pipeline into PNG figures.

Everything here reads files under ``<out>/plots`` and writes to
``<out>/figures``; nothing is recomputed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from diffeo_pa.errors import ValidationError  # noqa: E402
from diffeo_pa.prep import WINDOW_START, unit_to_minutes  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
HOUR_TICKS = [6, 9, 12, 15, 18, 21, 24]


def _clock_axis(ax, unit=True):
    """Label an axis in clock hours; ``unit`` means the data are in [-1, 1]."""
    ticks = [(h * 60 - WINDOW_START + 1) for h in HOUR_TICKS]
    if unit:
        ticks = [2.0 * (t - 1) / 1079.0 - 1.0 for t in ticks]
    ax.set_xticks(ticks)
    ax.set_xticklabels([f"{h}:00" for h in HOUR_TICKS])


def plot_mean_momenta(df: pd.DataFrame, title: str = ""):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharex=True)
    for ax, col, label in zip(axes, ("mx", "my"), ("temporal momentum", "amplitude momentum")):
        ax.axhline(0.0, color="0.7", lw=0.8)
        ax.plot(df["x"], df[col], color="C0")
        ax.set_ylabel(label)
        _clock_axis(ax)
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def plot_pc_deformation(arrows: pd.DataFrame, curves: pd.DataFrame, component: str, title: str = ""):
    """Source mean curve, momentum arrows and the deformed curve for one component."""
    a = arrows[arrows["component"] == component]
    c = curves[curves["component"] == component]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(c["source_x"], c["source_y"], color="C0", label="mean source curve")
    ax.plot(c["deformed_x"], c["deformed_y"], color="C3", label="deformed")
    scale = max(float((a["mx"] ** 2 + a["my"] ** 2).max()) ** 0.5, 1e-12)
    ax.quiver(a["x"], a["y"], a["mx"], a["my"], angles="xy", scale_units="xy", scale=scale / 0.05, width=0.002)
    _clock_axis(ax)
    ax.set_ylabel("scaled activity")
    ax.legend(frameon=False)
    ax.set_title(title)
    fig.tight_layout()
    return fig


def plot_overlay(df: pd.DataFrame, title: str = ""):
    pcs = sorted(int(c[len("mfpca_pc"):]) for c in df.columns if c.startswith("mfpca_pc"))
    fig, axes = plt.subplots(len(pcs), 2, figsize=(8, 2.2 * max(len(pcs), 1)), squeeze=False)
    for i, l in enumerate(pcs):
        for j, dom in enumerate(("X", "Y")):
            ax = axes[i, j]
            block = df[df["domain"] == dom]
            ax.plot(block["x"], block[f"mfpca_pc{l}"], label="MFPCA")
            ax.plot(block["x"], block[f"concat_pc{l}"], ls="--", label="concatenated UFPCA")
            ax.set_title(f"PC{l}, {'temporal' if dom == 'X' else 'amplitude'} domain")
            _clock_axis(ax)
    axes[0, 0].legend(frameon=False)
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def plot_interaction(df: pd.DataFrame, title: str = ""):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for eta, block in df.groupby("period"):
        ax.plot(block["energy"], block["predicted_pf"], label=f"period {eta}")
    ax.set_xlabel("deformation energy")
    ax.set_ylabel("predicted outcome")
    ax.legend(frameon=False)
    ax.set_title(title)
    fig.tight_layout()
    return fig


def render_report(out_dir) -> list[Path]:
    """Write one PNG per plot-data CSV family; returns the written paths."""
    out_dir = Path(out_dir)
    src = out_dir / "plots"
    if not src.is_dir():
        raise ValidationError(f"no plot data under {src}; run the pipeline first")
    dst = out_dir / "figures"
    dst.mkdir(parents=True, exist_ok=True)
    written = []

    def save(fig, name):
        path = dst / name
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    with plt.rc_context(STYLE):
        for p in sorted(src.glob("mean_momenta_period*.csv")):
            eta = p.stem.removeprefix("mean_momenta_period")
            save(plot_mean_momenta(pd.read_csv(p), f"Mean initial momenta, period {eta}"), f"{p.stem}.png")
        for p in sorted(src.glob("pc_arrows_period*.csv")):
            eta = p.stem.removeprefix("pc_arrows_period")
            arrows = pd.read_csv(p)
            curves = pd.read_csv(src / f"pc_curves_period{eta}.csv")
            for comp in arrows["component"].unique():
                tag = comp.replace("+", "plus").replace("-", "minus")
                fig = plot_pc_deformation(arrows, curves, comp, f"Period {eta}: {comp}")
                save(fig, f"deformation_period{eta}_{tag}.png")
        for p in sorted(src.glob("mfpca_vs_concat_period*.csv")):
            eta = p.stem.removeprefix("mfpca_vs_concat_period")
            save(plot_overlay(pd.read_csv(p), f"MFPCA vs concatenated UFPCA, period {eta}"), f"{p.stem}.png")
        for p in sorted(src.glob("interaction_model*.csv")):
            i = p.stem.removeprefix("interaction_model")
            save(plot_interaction(pd.read_csv(p), f"Model {i}: energy by period"), f"{p.stem}.png")
    return written


def clock_minutes(x):
    """Scaled abscissa to clock minutes since midnight."""
    return unit_to_minutes(x) + WINDOW_START - 1
