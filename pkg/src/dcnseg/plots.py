"""Static loss-curve and metric-distribution plots with their CSV sources."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import FIELDS, MetricsReport  # noqa: E402
from .trainer import TrainHistory  # noqa: E402


def _history_rows(histories: dict) -> list:
    rows = []
    for run, h in histories.items():
        for e in h.epochs:
            rows.append({"run": run, "epoch": e["epoch"], "train_total": e["train_total"], "val_total": e["val_total"]})
    return rows


def _report_rows(reports: list) -> list:
    rows = []
    for r in reports:
        for name, m in r.structures.items():
            rows.append({"case_id": r.case_id, "structure": name, **{f: getattr(m, f) for f in FIELDS}})
    return rows


def _csv_bytes(rows: list) -> bytes:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue().encode()


def _png_bytes(fig) -> bytes:
    buf = io.BytesIO()
    # fixed metadata keeps the bytes stable across runs
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def loss_curve_figure(histories: dict):
    fig, ax = plt.subplots(figsize=(6, 4))
    for run, h in histories.items():
        ep = [e["epoch"] for e in h.epochs]
        line = ax.plot(ep, [e["train_total"] for e in h.epochs], label=f"{run} train")[0]
        ax.plot(ep, [e["val_total"] for e in h.epochs], "--", color=line.get_color(), label=f"{run} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def metric_figure(reports: list):
    names = list(reports[0].structures)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
    for ax, (field, label) in zip(axes, [("dc", "DC"), ("cmd_mm", "CMD (mm)"), ("msd_mm", "MSD (mm)")]):
        data = []
        for n in names:
            vals = [getattr(r.structures[n], field) for r in reports]
            data.append([v for v in vals if v is not None])
        ax.boxplot(data)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_title(label)
    fig.tight_layout()
    return fig


def emit_plots(histories, reports, out_dir) -> list:
    """Write ``loss_curve.png/.csv`` and ``metrics.png/.csv``; returns the written paths.

    ``histories`` is one ``TrainHistory`` or a ``{run_name: TrainHistory}`` mapping
    (several runs are overlaid on one figure). Inputs are validated and every
    file is rendered in memory before anything is written.
    """
    if isinstance(histories, TrainHistory):
        histories = {"run": histories}
    if not histories or any(not h.epochs for h in histories.values()):
        raise ValueError("emit_plots needs at least one nonempty training history")
    reports = [MetricsReport.from_dict(r) if isinstance(r, dict) else r for r in reports or []]
    if not reports:
        raise ValueError("emit_plots needs at least one metrics report")

    files = {
        "loss_curve.csv": _csv_bytes(_history_rows(histories)),
        "loss_curve.png": _png_bytes(loss_curve_figure(histories)),
        "metrics.csv": _csv_bytes(_report_rows(reports)),
        "metrics.png": _png_bytes(metric_figure(reports)),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, data in files.items():
        path = out_dir / name
        path.write_bytes(data)
        written.append(path)
    return written
