# retrieval_xattn/evalbench/reports.py
#
# Every report is written twice: an aligned text table and a CSV.

from __future__ import annotations

import logging
import os

import pandas as pd

from ..errors import StorageError
from .analysis import RetrievalHistogram

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6g"


def render_table(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, float_format=lambda v: FLOAT_FORMAT % v)


def write_report(frame: pd.DataFrame, report_dir: str, name: str) -> dict[str, str]:
    """Write `<name>.txt` and `<name>.csv` under report_dir; returns both paths."""
    paths = {
        "text": os.path.join(report_dir, f"{name}.txt"),
        "csv": os.path.join(report_dir, f"{name}.csv"),
    }
    try:
        os.makedirs(report_dir, exist_ok=True)
        with open(paths["text"], "w", encoding="utf-8") as f:
            f.write(render_table(frame) + "\n")
        frame.to_csv(paths["csv"], index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as exc:
        raise StorageError(f"cannot write report {name} to {report_dir}: {exc}")
    logger.info("wrote %s report (%d row(s)) to %s", name, len(frame), report_dir)
    return paths


def histogram_frame(hist: RetrievalHistogram) -> pd.DataFrame:
    return pd.DataFrame({"bin_start": hist.edges[:-1], "bin_end": hist.edges[1:], "mass": hist.mass})


def write_histogram(hist: RetrievalHistogram, report_dir: str, name: str = "retrieval_histogram") -> dict[str, str]:
    """Histogram as a table pair plus bare `bin_start,bin_end,mass` lines."""
    paths = write_report(histogram_frame(hist), report_dir, name)
    paths["lines"] = os.path.join(report_dir, f"{name}.lines")
    try:
        with open(paths["lines"], "w", encoding="utf-8") as f:
            f.write("\n".join(hist.lines()) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write histogram lines to {report_dir}: {exc}")
    return paths
