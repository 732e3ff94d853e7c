"""PNG figures for training runs and ablation tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import PUBLISHED_DC, AblationTable, RunReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 120,
}
# PNG metadata carries the matplotlib version by default; drop it so reruns match
_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(report: RunReport, path: str | Path) -> Path:
    """Train loss and validation DC per epoch, constant baseline dashed."""
    epochs = [e["epoch"] for e in report.epochs]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_dc) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        ax_loss.plot(epochs, [e["train_loss"] for e in report.epochs], marker="o", ms=3)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("soft Dice loss")

        ax_dc.plot(epochs, [np.nan if e["val_dc"] is None else e["val_dc"] for e in report.epochs],
                   marker="o", ms=3, label="validation")
        if report.baseline_dc is not None:
            ax_dc.axhline(report.baseline_dc, ls="--", color="0.5", label="constant mask")
        ax_dc.set_xlabel("epoch")
        ax_dc.set_ylabel("DC")
        ax_dc.set_ylim(0, 1)
        ax_dc.legend(loc="lower right")
        fig.suptitle(report.variant)
        return _save(fig, path)


def ablation_bars(table: AblationTable, path: str | Path) -> Path:
    """Our validation DC per variant next to the published full-scale figure."""
    names = [r.variant for r in table.rows]
    ours = [r.val_dc_mean if r.status == "ok" else 0.0 for r in table.rows]
    err = [r.val_dc_std if r.status == "ok" else 0.0 for r in table.rows]
    pub = [PUBLISHED_DC.get(n, (None, np.nan))[1] for n in names]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        ax.bar(x - 0.2, ours, 0.4, yerr=err, capsize=2, label="synthetic (this run)")
        ax.bar(x + 0.2, pub, 0.4, color="0.75", label="published CT (not reproducible)")
        for xi, r in zip(x, table.rows):
            if r.status != "ok":
                ax.text(xi - 0.2, 0.02, "failed", rotation=90, ha="center", va="bottom")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("DC")
        ax.set_ylim(0, 1)
        ax.legend(loc="lower right")
        return _save(fig, path)
