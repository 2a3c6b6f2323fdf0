"""Static plots: predicted-vs-true indicator scatters and mask/landmark overlays."""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .records import ALL_KEYS, LVIndicators, StudyQuad  # noqa: E402
from .training import EvalReport  # noqa: E402

_UNITS = {"EDL": "mm", "ESL": "mm", "EDV": "mL", "ESV": "mL", "EF": "%"}


def scatter_indicators(report: EvalReport, path) -> Path:
    """One panel per indicator, with the identity line and Pearson r in the title."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(LVIndicators.FIELDS), figsize=(3.2 * len(LVIndicators.FIELDS), 3.2))
    for ax, key in zip(axes, LVIndicators.FIELDS):
        true = np.array([r[f"{key}_true"] for r in report.rows], dtype=float)
        pred = np.array([r[f"{key}_pred"] for r in report.rows], dtype=float)
        ax.scatter(true, pred, s=12)
        finite = np.isfinite(true) & np.isfinite(pred)
        if finite.any():
            lo = min(true[finite].min(), pred[finite].min())
            hi = max(true[finite].max(), pred[finite].max())
            ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_title(f"{key}  r={report.corr[key]:.3f}")
        ax.set_xlabel(f"true ({_UNITS[key]})")
        ax.set_ylabel(f"predicted ({_UNITS[key]})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def overlay_study(study: StudyQuad, masks: np.ndarray, points: np.ndarray, path) -> Path:
    """2x2 grid of images with true (green) and predicted (red) contours and landmarks.

    ``masks`` (4, H, W) and ``points`` (4, 3, 2) follow the study's view/phase order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(2, 2, figsize=(7, 7))
    for ax, key, m, p in zip(axes.ravel(), ALL_KEYS, masks, points):
        rec = study[key]
        if rec.image is not None:
            ax.imshow(rec.image, cmap="gray")
        ax.contour(rec.mask.grid, levels=[0.5], colors="lime", linewidths=0.8)
        if m.any():
            ax.contour(m, levels=[0.5], colors="red", linewidths=0.8)
        gt = rec.landmarks.to_array()
        ax.plot(gt[:, 0], gt[:, 1], "o", color="lime", ms=4)
        ax.plot(p[:, 0], p[:, 1], "x", color="red", ms=5)
        ax.set_title(f"{study.study_id} {key[0].value}/{key[1].value}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_report(report: EvalReport, studies: Sequence[StudyQuad], masks: np.ndarray, points: np.ndarray,
                 out_dir, max_overlays: int = 4) -> List[Path]:
    """Scatter figure, per-study CSV and up to ``max_overlays`` overlay figures."""
    out_dir = Path(out_dir)
    written = [scatter_indicators(report, out_dir / "indicators.png"), report.write_csv(out_dir / "eval.csv")]
    for s, study in enumerate(studies[:max_overlays]):
        sl = slice(4 * s, 4 * s + 4)
        written.append(overlay_study(study, masks[sl], points[sl], out_dir / f"overlay_{study.study_id}.png"))
    return written
