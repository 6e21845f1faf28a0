# =====================================================
# Report writers: JSON, CSV companions and plot data
# =====================================================

# Loading modules
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pandas as pd


def write_json(path: Path | str, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def write_csv(path: Path | str, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def write_table(stem: Path | str, payload: dict, frame: pd.DataFrame) -> tuple[Path, Path]:
    """<stem>.json plus a <stem>.csv companion."""
    stem = Path(stem)
    return write_json(stem.with_suffix(".json"), payload), write_csv(stem.with_suffix(".csv"), frame)


def write_plot_data(path: Path | str, plot: dict) -> Path:
    """Plot data as plain JSON arrays for external chart tools."""
    return write_json(path, plot)
