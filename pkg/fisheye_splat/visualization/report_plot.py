# ============================================
# visualization/report_plot.py
# ============================================
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fisheye_splat.core.evaluation import ErrorAnalysisReport
from fisheye_splat.core.log_utils import get_logger

logger = get_logger(__name__)


def plot_error_analysis(report: ErrorAnalysisReport, path, title=None):
    """
    Bar chart of PSNR per stretch configuration, with SSIM and render time
    annotated on each bar. Saved as PNG at ``path``.
    """
    if not report.rows:
        logger.error("Cannot plot an error-analysis report without rows")
        raise ValueError("error-analysis report has no rows")

    labels = [r.label for r in report.rows]
    psnrs = np.array([r.psnr for r in report.rows])
    finite = psnrs[np.isfinite(psnrs)]
    low = float(finite.min()) if finite.size else 0.0
    high = float(finite.max()) if finite.size else 1.0
    span = max(high - low, 0.5)

    fig, ax = plt.subplots(figsize=(1.8 * len(labels) + 3, 5))
    bars = ax.bar(range(len(labels)), psnrs, color="#4c72b0", edgecolor="black", linewidth=1.0)
    for bar, row in zip(bars, report.rows):
        ax.annotate(
            f"SSIM {row.ssim:.4f}" + (f"\n{row.wall_ms:.0f} ms" if row.wall_ms is not None else ""),
            (bar.get_x() + bar.get_width() / 2.0, bar.get_height()),
            ha="center", va="bottom", fontsize=9, xytext=(0, 3), textcoords="offset points",
        )

    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=10)
    ax.set_ylabel("PSNR vs. redistorted pinhole [dB]", fontsize=11)
    ax.set_ylim(low - 0.5 * span, high + 0.5 * span)
    ax.grid(True, axis="y", alpha=0.3)
    ax.set_title(title or f"Warp error analysis: {report.camera_id} "
                          f"({report.poses} poses, {report.roi_pixels} ROI pixels)", fontsize=13)
    fig.tight_layout()

    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Saved error-analysis chart to {path}")
