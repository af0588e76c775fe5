"""Output files: atomic writes, CSV tables, JSON metrics and line-plot SVGs."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

# header of every CSV a subcommand writes, pinned by golden tests
CSV_SCHEMAS = {
    "mismatch": ("zeta", "mean", "std", "min"),
    "attack": ("zeta", "task_pga", "kl_pga", "random"),
    "landscape": ("alpha", "mean_loss", "trial", "loss"),
    "verify": ("zeta", "verified_accuracy"),
    "membrane": ("bin_lo", "bin_hi", "count"),
    "history": ("epoch", "train_loss", "val_acc"),
}


def atomic_write(path, payload: bytes | str) -> Path:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        if len(r) != len(header):
            raise ValueError(f"row has {len(r)} cells, header has {len(header)}")
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_table(path, schema: str, rows) -> Path:
    return atomic_write(path, csv_text(CSV_SCHEMAS[schema], rows))


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        data = list(csv.reader(fh))
    return data[0], data[1:]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_line_svg(path, x, series: dict[str, np.ndarray], xlabel: str, ylabel: str) -> Path:
    """Line plot of each named series against ``x``; reproducible bytes (no timestamp)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mmrobust"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, y in series.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return atomic_write(path, buf.getvalue())
