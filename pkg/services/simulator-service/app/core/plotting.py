"""SVG charts from intervals.csv: threshold, SLO violation ratio and quality over time."""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .metrics import MetricsError, read_csv  # noqa: E402

logger = logging.getLogger(__name__)

PANELS = [
    ("threshold", "Confidence threshold", "threshold_over_time.svg"),
    ("violation_ratio", "SLO violation ratio", "violation_ratio_over_time.svg"),
    ("mean_delivered_quality", "Mean delivered quality", "quality_over_time.svg"),
]

# Stable element ids so re-rendering the same data gives the same file
plt.rcParams["svg.hashsalt"] = "cascade-sim"


def _panel(frame: pd.DataFrame, column: str, label: str, output_path: Path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.plot(frame["interval_start"], frame[column], marker="o", markersize=3, linewidth=1.5)
    ax.set_xlabel("Time (s)")
    ax.set_ylabel(label)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if column in ("threshold", "violation_ratio"):
        ax.set_ylim(-0.02, 1.02)

    plt.tight_layout()
    plt.savefig(output_path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


def plot_run(intervals_csv: Path | str, out_dir: Path | str | None = None, title: str | None = None) -> list[Path]:
    """
    Render the three per-interval panels for one run.

    Args:
        intervals_csv: Path of a run's intervals.csv
        out_dir: Where to write the SVGs (defaults to the CSV's directory)
        title: Chart title (defaults to the run directory name)

    Returns:
        Paths of the written SVG files
    """
    intervals_csv = Path(intervals_csv)
    frame = read_csv(intervals_csv)
    missing = {"interval_start", *(column for column, _, _ in PANELS)} - set(frame.columns)
    if missing:
        raise MetricsError(f"{intervals_csv} is missing columns {sorted(missing)}")

    out_dir = Path(out_dir) if out_dir else intervals_csv.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    title = title or intervals_csv.parent.name

    written = []
    for column, label, filename in PANELS:
        path = out_dir / filename
        _panel(frame, column, label, path, title)
        written.append(path)

    logger.info(f"Wrote {len(written)} plots to {out_dir}")
    return written
