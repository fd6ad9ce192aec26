"""ROC figures written as SVG files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no date stamp, so identical curves give identical files
_SVG_RC = {"svg.hashsalt": "selfadapt", "svg.fonttype": "none", "figure.figsize": (4.0, 4.0)}


def plot_roc(curves: Mapping[str, Sequence[tuple[float, float, float]]], path: str | Path,
             title: str = "") -> Path:
    """Draw one line per variant; ``curves`` maps a label to (threshold, FAR, TPR) rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots()
        for label in sorted(curves):
            pts = curves[label]
            ax.plot([p[1] for p in pts], [p[2] for p in pts], lw=1.2, label=label)
        ax.plot([0, 1], [0, 1], ls=":", color="0.6", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("FAR")
        ax.set_ylabel("TPR")
        if title:
            ax.set_title(title)
        if curves:
            ax.legend(loc="lower right", fontsize=7, frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def mean_curve(runs: Sequence[Sequence[tuple[float, float, float]]],
               grid: int = 101) -> list[tuple[float, float, float]]:
    """Average several ROC step curves on a common FAR grid (threshold column is NaN)."""
    far_grid = np.linspace(0.0, 1.0, grid)
    tprs = []
    for pts in runs:
        far = np.array([p[1] for p in pts])
        tpr = np.array([p[2] for p in pts])
        # the best TPR achievable at or below each FAR level
        idx = np.searchsorted(far, far_grid, side="right") - 1
        tprs.append(np.maximum.accumulate(tpr)[np.clip(idx, 0, len(tpr) - 1)])
    avg = np.mean(tprs, axis=0) if tprs else np.zeros(grid)
    return [(float("nan"), float(a), float(b)) for a, b in zip(far_grid, avg)]
