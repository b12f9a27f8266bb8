# simulation/report.py
"""Report files for a MetricsFrame: CSV tables, one JSON document, heatmaps."""
import json
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

from core.errors import InvalidInputError, StorageError
from core.logs import get_logger
from simulation.harness import (FLOPS_COLUMNS, ITERATION_COLUMNS, LATENCY_COLUMNS, MEMORY_COLUMNS,
                                MetricsFrame)

logger = get_logger(__name__)

FORMATS = ("csv", "json")
SCHEMA = {"flops": FLOPS_COLUMNS, "memory": MEMORY_COLUMNS, "latency": LATENCY_COLUMNS,
          "iterations": ITERATION_COLUMNS}


def _stable(name: str, df: pd.DataFrame) -> pd.DataFrame:
    return df.reindex(columns=SCHEMA[name])


def heatmap_data(flops: pd.DataFrame, graph: str = "sequence") -> pd.DataFrame:
    """Mean flops per (node, microbatch) across steps; rows are nodes."""
    sel = flops[flops["graph"] == graph]
    if sel.empty:
        return pd.DataFrame()
    return sel.pivot_table(index="node", columns="microbatch", values="flops", aggfunc="mean").sort_index()


def plot_heatmap(data: pd.DataFrame, path: Path, title: str):
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    im = ax.imshow(data.to_numpy(), aspect="auto", cmap="viridis")
    ax.set_xlabel("microbatch")
    ax.set_ylabel("node")
    ax.set_xticks(range(len(data.columns)))
    ax.set_xticklabels([str(c) for c in data.columns])
    ax.set_yticks(range(len(data.index)))
    ax.set_yticklabels([str(i) for i in data.index])
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="FLOPs")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def to_json_document(metrics: MetricsFrame) -> Dict:
    doc = {name: _stable(name, df).to_dict(orient="records") for name, df in metrics.tables().items()}
    doc["summary"] = metrics.summary
    return doc


def report(metrics: MetricsFrame, out_dir: Union[str, Path], formats: Sequence[str] = FORMATS,
           plots: bool = True) -> List[Path]:
    """Write ``metrics`` under ``out_dir``; returns the files written.

    CSV gives one file per table with a fixed column order, so an empty table
    still yields its header line. JSON holds every table plus the summary.
    """
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise InvalidInputError(f"unknown report formats {sorted(unknown)}; expected {FORMATS}")
    out = Path(out_dir)
    written: List[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            for name, df in metrics.tables().items():
                path = out / f"{name}.csv"
                _stable(name, df).to_csv(path, index=False)
                written.append(path)
        if "json" in formats:
            path = out / "metrics.json"
            path.write_text(json.dumps(to_json_document(metrics), indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
            written.append(path)
        for graph in sorted(set(metrics.flops["graph"])) if len(metrics.flops) else []:
            data = heatmap_data(metrics.flops, graph)
            path = out / f"heatmap_{graph}.csv"
            data.to_csv(path)
            written.append(path)
            if plots:
                png = out / f"heatmap_{graph}.png"
                plot_heatmap(data, png, f"{graph} FLOPs per (node, microbatch)")
                written.append(png)
    except OSError as exc:
        raise StorageError(f"cannot write report to {out}: {exc}") from exc
    logger.info("report: %d files in %s", len(written), out)
    return written


def read_csv_tables(out_dir: Union[str, Path]) -> Dict[str, pd.DataFrame]:
    return {name: pd.read_csv(Path(out_dir) / f"{name}.csv") for name in SCHEMA}


def write_table(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Single table as CSV or JSON records, picked by extension."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            path.write_text(json.dumps(df.to_dict(orient="records"), indent=2) + "\n", encoding="utf-8")
        else:
            df.to_csv(path, index=False)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def load_metrics(path: Union[str, Path]) -> MetricsFrame:
    """Inverse of the JSON document: a MetricsFrame from ``metrics.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"cannot read metrics from {path}: {exc}") from exc
    tables = {name: pd.DataFrame(doc.get(name, []), columns=cols) for name, cols in SCHEMA.items()}
    return MetricsFrame(summary=doc.get("summary", {}), **tables)
